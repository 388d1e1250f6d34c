//! File formats: binary datasets, images and checkpoints, CSV tables and
//! PGM previews.
//!
//! Binary files are little-endian throughout and end with a SHA-256 digest of
//! every preceding byte.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use num_complex::Complex64;
use sha2::{Digest, Sha256};

use crate::error::{check_len, invalid, Error, Result};
use crate::geometry::{CanonicalGrid, MotionTimeline, MotionTriplet};
use crate::hash_encoding::{HashGrid, HashGridConfig};
use crate::image::{ComplexImage, RealImage};
use crate::metrics::EvalReport;
use crate::network::MlpParams;
use crate::simulator::{ProjectionSet, RadialKSpace};
use crate::spectral::{ProjectionProfile, Spoke};
use crate::trainer::LogRecord;

pub const DATA_MAGIC: &[u8; 4] = b"MONR";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MONK";
pub const FORMAT_VERSION: u32 = 1;
const BYTE_ORDER_MARK: u32 = 0x0102_0304;
const DIGEST_LEN: usize = 32;

pub const MOTION_SCHEMA: &str = "radmoco.motion.v1";
pub const LOG_SCHEMA: &str = "radmoco.trainlog.v1";
pub const METRICS_SCHEMA: &str = "radmoco.metrics.v1";

/// Payload kind of a data file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    KSpace = 0,
    Projection = 1,
    Image = 2,
}

impl DataKind {
    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Self::KSpace),
            1 => Ok(Self::Projection),
            2 => Ok(Self::Image),
            _ => Err(Error::Format(format!("unknown data kind {code}"))),
        }
    }
}

/// Contents of a data file.
#[derive(Debug, Clone, PartialEq)]
pub enum DataFile {
    KSpace(RadialKSpace),
    Projection(ProjectionSet),
    Image { image: ComplexImage, fov_mm: f64 },
}

/// Trained model together with its motion estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub grid: HashGrid,
    pub mlp: MlpParams,
    pub lambda: f64,
    pub epoch: usize,
    /// Object-convention estimate per view.
    pub motion: MotionTimeline,
}

/// Writes `bytes` to a temporary file beside `path` and renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut w = Self { buf: magic.to_vec() };
        w.u32(FORMAT_VERSION);
        w.u32(BYTE_ORDER_MARK);
        w
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn count(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| invalid("size exceeds the file format"))?;
        self.u32(v);
        Ok(())
    }

    fn complex(&mut self, values: &[Complex64]) {
        for z in values {
            self.f64(z.re);
            self.f64(z.im);
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks the digest, magic, version and byte order.
    fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 12 + DIGEST_LEN {
            return Err(Error::Format("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if &body[..4] != magic {
            return Err(Error::Format("bad magic".into()));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let mut r = Self { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        if r.u32()? != BYTE_ORDER_MARK {
            return Err(Error::Format("bad byte order mark".into()));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated payload".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn count(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(Error::Format("truncated payload".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn complex(&mut self, n: usize) -> Result<Vec<Complex64>> {
        let flat = self.f64s(n.saturating_mul(2))?;
        Ok(flat.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect())
    }

    fn end(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::Format("trailing bytes after payload".into()))
        }
    }
}

fn write_motion_block(w: &mut Writer, motion: &MotionTimeline) {
    for t in motion.triplets() {
        w.f64(t.rotation);
        w.f64(t.shift_x);
        w.f64(t.shift_y);
    }
}

fn read_motion_block(r: &mut Reader, stages: Vec<u32>) -> Result<MotionTimeline> {
    let flat = r.f64s(3 * stages.len())?;
    let triplets = flat
        .chunks_exact(3)
        .map(|c| MotionTriplet::new(c[0], c[1], c[2]))
        .collect::<Result<Vec<_>>>()?;
    MotionTimeline::new(triplets, stages)
}

/// Serializes a data file.
///
/// Header: magic, version, byte order mark, kind, height, width, FOV in mm,
/// view count, samples per view, ray extent, motion flag. Then per view the
/// angle in radians and stage id, the interleaved complex payload and, when
/// flagged, `(ϑ rad, τx, τy canonical)` per view.
pub fn encode_data(file: &DataFile) -> Result<Vec<u8>> {
    let (kind, grid, fov, extent) = match file {
        DataFile::KSpace(k) => {
            k.validate()?;
            (DataKind::KSpace, k.grid, k.fov_mm, k.spokes[0].extent)
        }
        DataFile::Projection(p) => {
            if p.profiles.is_empty() {
                return Err(invalid("dataset has no views"));
            }
            check_len(p.profiles.len(), p.stages.len())?;
            (DataKind::Projection, p.grid, p.fov_mm, p.profiles[0].extent)
        }
        DataFile::Image { image, fov_mm } => (DataKind::Image, image.grid(), *fov_mm, 0.0),
    };
    let mut w = Writer::new(DATA_MAGIC);
    w.u32(kind as u32);
    w.count(grid.height())?;
    w.count(grid.width())?;
    w.f64(fov);
    match file {
        DataFile::KSpace(k) => {
            w.count(k.n_views())?;
            w.count(k.spoke_length())?;
            w.f64(extent);
            w.u32(k.ground_truth.is_some() as u32);
            for (s, stage) in k.spokes.iter().zip(&k.stages) {
                w.f64(s.theta);
                w.u32(*stage);
            }
            for s in &k.spokes {
                w.complex(&s.samples);
            }
            if let Some(gt) = &k.ground_truth {
                write_motion_block(&mut w, gt);
            }
        }
        DataFile::Projection(p) => {
            let bins = p.bins();
            w.count(p.n_views())?;
            w.count(bins)?;
            w.f64(extent);
            w.u32(p.ground_truth.is_some() as u32);
            for (prof, stage) in p.profiles.iter().zip(&p.stages) {
                if prof.samples.len() != bins || prof.extent != extent {
                    return Err(invalid("inconsistent profile geometry"));
                }
                w.f64(prof.theta);
                w.u32(*stage);
            }
            for prof in &p.profiles {
                w.complex(&prof.samples);
            }
            if let Some(gt) = &p.ground_truth {
                check_len(p.n_views(), gt.len())?;
                write_motion_block(&mut w, gt);
            }
        }
        DataFile::Image { image, .. } => {
            w.u32(0);
            w.u32(0);
            w.f64(extent);
            w.u32(0);
            w.complex(image.data());
        }
    }
    Ok(w.finish())
}

pub fn decode_data(bytes: &[u8]) -> Result<DataFile> {
    let mut r = Reader::open(bytes, DATA_MAGIC)?;
    let kind = DataKind::from_code(r.u32()?)?;
    let height = r.count()?;
    let width = r.count()?;
    let grid = CanonicalGrid::new(height, width)?;
    let fov_mm = r.f64()?;
    let n_views = r.count()?;
    let samples = r.count()?;
    let extent = r.f64()?;
    let has_motion = match r.u32()? {
        0 => false,
        1 => true,
        v => return Err(Error::Format(format!("bad motion flag {v}"))),
    };
    if kind == DataKind::Image {
        let data = r.complex(grid.len())?;
        r.end()?;
        return Ok(DataFile::Image { image: ComplexImage::from_vec(grid, data)?, fov_mm });
    }
    let mut thetas = Vec::with_capacity(n_views.min(1 << 20));
    let mut stages = Vec::with_capacity(n_views.min(1 << 20));
    for _ in 0..n_views {
        thetas.push(r.f64()?);
        stages.push(r.u32()?);
    }
    let mut rows = Vec::with_capacity(n_views.min(1 << 20));
    for _ in 0..n_views {
        rows.push(r.complex(samples)?);
    }
    let ground_truth = if has_motion { Some(read_motion_block(&mut r, stages.clone())?) } else { None };
    r.end()?;
    Ok(match kind {
        DataKind::KSpace => {
            let spokes = thetas
                .into_iter()
                .zip(rows)
                .map(|(theta, samples)| Spoke { theta, samples, extent })
                .collect();
            let k = RadialKSpace { grid, fov_mm, spokes, stages, ground_truth };
            k.validate()?;
            DataFile::KSpace(k)
        }
        _ => {
            let profiles = thetas
                .into_iter()
                .zip(rows)
                .map(|(theta, samples)| ProjectionProfile { theta, samples, extent })
                .collect();
            DataFile::Projection(ProjectionSet { grid, fov_mm, profiles, stages, ground_truth })
        }
    })
}

pub fn write_data(path: &Path, file: &DataFile) -> Result<()> {
    write_atomic(path, &encode_data(file)?)
}

pub fn read_data(path: &Path) -> Result<DataFile> {
    decode_data(&fs::read(path)?)
}

pub fn write_image(path: &Path, image: &ComplexImage, fov_mm: f64) -> Result<()> {
    write_data(path, &DataFile::Image { image: image.clone(), fov_mm })
}

pub fn read_image(path: &Path) -> Result<(ComplexImage, f64)> {
    match read_data(path)? {
        DataFile::Image { image, fov_mm } => Ok((image, fov_mm)),
        _ => Err(Error::Format("expected an image file".into())),
    }
}

/// Serializes a checkpoint: hash grid configuration and tables, MLP
/// parameters, schedule position and the motion estimate.
pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let cfg = c.grid.config();
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    w.count(cfg.levels)?;
    w.count(cfg.features_per_level)?;
    w.u64(cfg.table_size as u64);
    w.count(cfg.base_resolution)?;
    w.f64(cfg.growth_factor);
    w.f64(cfg.domain_margin);
    for t in c.grid.tables() {
        w.u64(t.len() as u64);
        for v in t {
            w.f64(*v);
        }
    }
    w.count(c.mlp.input_dim)?;
    w.count(c.mlp.width)?;
    for block in [&c.mlp.w1, &c.mlp.b1, &c.mlp.w2] {
        for v in block.iter() {
            w.f64(*v);
        }
    }
    w.f64(c.mlp.b2[0]);
    w.f64(c.mlp.b2[1]);
    w.f64(c.lambda);
    w.u64(c.epoch as u64);
    w.count(c.motion.len())?;
    for s in c.motion.stages() {
        w.u32(*s);
    }
    write_motion_block(&mut w, &c.motion);
    Ok(w.finish())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC)?;
    let config = HashGridConfig {
        levels: r.count()?,
        features_per_level: r.count()?,
        table_size: usize::try_from(r.u64()?).map_err(|_| Error::Format("table size".into()))?,
        base_resolution: r.count()?,
        growth_factor: r.f64()?,
        domain_margin: r.f64()?,
    };
    let mut grid = HashGrid::zeros(config)?;
    for l in 0..grid.tables().len() {
        let n = r.u64()? as usize;
        check_len(grid.tables()[l].len(), n)?;
        let values = r.f64s(n)?;
        grid.tables_mut()[l].copy_from_slice(&values);
    }
    let input_dim = r.count()?;
    let width = r.count()?;
    check_len(grid.config().output_dim(), input_dim)?;
    let mut mlp = MlpParams::zeros(input_dim, width)?;
    mlp.w1 = r.f64s(mlp.w1.len())?;
    mlp.b1 = r.f64s(mlp.b1.len())?;
    mlp.w2 = r.f64s(mlp.w2.len())?;
    mlp.b2 = [r.f64()?, r.f64()?];
    let lambda = r.f64()?;
    let epoch = r.u64()? as usize;
    let n = r.count()?;
    let stages = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let motion = read_motion_block(&mut r, stages)?;
    r.end()?;
    Ok(Checkpoint { grid, mlp, lambda, epoch, motion })
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(c)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Splits a CSV with a `#schema=` line into its header fields and rows,
/// checking the schema name. Returns the extra `key=value` pairs of the
/// schema line too.
/// Schema attributes, header fields and rows of a parsed CSV.
type CsvParts<'a> = (Vec<(&'a str, &'a str)>, Vec<&'a str>, Vec<Vec<&'a str>>);

fn parse_csv<'a>(text: &'a str, schema: &str) -> Result<CsvParts<'a>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))?;
    let mut words = first.split_whitespace();
    match words.next().and_then(|w| w.strip_prefix("#schema=")) {
        Some(name) if name == schema => {}
        _ => return Err(Error::Format(format!("expected schema {schema}"))),
    }
    let extras = words
        .map(|w| w.split_once('=').ok_or_else(|| Error::Format(format!("bad schema attribute {w}"))))
        .collect::<Result<Vec<_>>>()?;
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format("missing CSV header".into()))?
        .split(',')
        .collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    for row in &rows {
        check_len(header.len(), row.len())?;
    }
    Ok((extras, header, rows))
}

fn expect_header(got: &[&str], want: &[&str]) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Format(format!("expected columns {}", want.join(","))))
    }
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Format(format!("bad number {s:?}")))
}

fn extra<'a>(extras: &[(&'a str, &'a str)], key: &str) -> Result<&'a str> {
    extras
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Format(format!("schema line lacks {key}")))
}

const MOTION_COLUMNS: [&str; 5] = ["view", "stage", "rotation_deg", "shift_x_mm", "shift_y_mm"];

/// Motion CSV in degrees and millimetres. The schema line records the FOV
/// used for the millimetre conversion.
pub fn motion_csv(motion: &MotionTimeline, fov_mm: f64) -> String {
    let mm = fov_mm / 2.0;
    let mut s = format!("#schema={MOTION_SCHEMA} fov_mm={fov_mm}\n{}\n", MOTION_COLUMNS.join(","));
    for (i, (t, stage)) in motion.triplets().iter().zip(motion.stages()).enumerate() {
        let _ = writeln!(s, "{i},{stage},{},{},{}", t.rotation.to_degrees(), t.shift_x * mm, t.shift_y * mm);
    }
    s
}

pub fn parse_motion_csv(text: &str) -> Result<MotionTimeline> {
    let (extras, header, rows) = parse_csv(text, MOTION_SCHEMA)?;
    expect_header(&header, &MOTION_COLUMNS)?;
    let fov: f64 = num(extra(&extras, "fov_mm")?)?;
    if !(fov.is_finite() && fov > 0.0) {
        return Err(Error::Format("field of view must be positive".into()));
    }
    let mut triplets = Vec::with_capacity(rows.len());
    let mut stages = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if num::<usize>(row[0])? != i {
            return Err(Error::Format("motion rows must be in view order".into()));
        }
        stages.push(num(row[1])?);
        let rot: f64 = num(row[2])?;
        let (x, y): (f64, f64) = (num(row[3])?, num(row[4])?);
        triplets.push(MotionTriplet::new(rot.to_radians(), x * 2.0 / fov, y * 2.0 / fov)?);
    }
    MotionTimeline::new(triplets, stages)
}

pub fn write_motion_csv(path: &Path, motion: &MotionTimeline, fov_mm: f64) -> Result<()> {
    write_atomic(path, motion_csv(motion, fov_mm).as_bytes())
}

pub fn read_motion_csv(path: &Path) -> Result<MotionTimeline> {
    parse_motion_csv(&fs::read_to_string(path)?)
}

const LOG_COLUMNS: [&str; 4] = ["epoch", "loss", "lr", "lambda"];

pub fn log_csv(log: &[LogRecord]) -> String {
    let mut s = format!("#schema={LOG_SCHEMA}\n{}\n", LOG_COLUMNS.join(","));
    for r in log {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.loss, r.lr, r.lambda);
    }
    s
}

pub fn parse_log_csv(text: &str) -> Result<Vec<LogRecord>> {
    let (_, header, rows) = parse_csv(text, LOG_SCHEMA)?;
    expect_header(&header, &LOG_COLUMNS)?;
    rows.iter()
        .map(|r| {
            Ok(LogRecord {
                epoch: num(r[0])?,
                loss: num(r[1])?,
                lr: num(r[2])?,
                lambda: num(r[3])?,
            })
        })
        .collect()
}

pub const METRICS_COLUMNS: [&str; 8] = [
    "psnr_db",
    "psnr_capped",
    "ssim",
    "psnr_unaligned_db",
    "sigma_rot_deg",
    "sigma_shift_px",
    "l1_rot_deg",
    "l1_shift_px",
];

/// One-row metrics table. Shift errors are per-view Euclidean norms.
pub fn metrics_csv(r: &EvalReport) -> String {
    format!(
        "#schema={METRICS_SCHEMA} shift_error=euclidean\n{}\n{},{},{},{},{},{},{},{}\n",
        METRICS_COLUMNS.join(","),
        r.psnr,
        r.psnr_capped as u8,
        r.ssim,
        r.psnr_unaligned,
        r.sigma_rot,
        r.sigma_shift,
        r.l1_rot,
        r.l1_shift
    )
}

pub fn parse_metrics_csv(text: &str) -> Result<EvalReport> {
    let (_, header, rows) = parse_csv(text, METRICS_SCHEMA)?;
    expect_header(&header, &METRICS_COLUMNS)?;
    let [row] = rows.as_slice() else {
        return Err(Error::Format("metrics table must have one row".into()));
    };
    Ok(EvalReport {
        psnr: num(row[0])?,
        psnr_capped: num::<u8>(row[1])? != 0,
        ssim: num(row[2])?,
        psnr_unaligned: num(row[3])?,
        sigma_rot: num(row[4])?,
        sigma_shift: num(row[5])?,
        l1_rot: num(row[6])?,
        l1_shift: num(row[7])?,
    })
}

/// 8-bit binary PGM of `image`, min-max normalized.
pub fn pgm(image: &RealImage) -> Vec<u8> {
    let grid = image.grid();
    let (lo, hi) = (image.min(), image.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(image.data().iter().map(|v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn write_pgm(path: &Path, image: &RealImage) -> Result<()> {
    write_atomic(path, &pgm(image))
}
