use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use radmoco::config::{arm_name, encoding_name, parse_arm, parse_encoding, RunConfig};
use radmoco::diagnostics::{fsc_check, gradcheck, Fault, GRADCHECK_INSTANCES};
use radmoco::io::{self, Checkpoint, DataFile};
use radmoco::metrics::evaluate;
use radmoco::simulator::simulate;
use radmoco::trainer::{ForwardArm, Trainer};

const DATASET_FILE: &str = "dataset.monr";
const GT_IMAGE_FILE: &str = "gt_image.monr";
const GT_MOTION_FILE: &str = "gt_motion.csv";
const GT_PREVIEW_FILE: &str = "gt_image.pgm";
const RECON_FILE: &str = "recon.monr";
const EST_MOTION_FILE: &str = "est_motion.csv";
const LOG_FILE: &str = "train_log.csv";
const PREVIEW_FILE: &str = "recon.pgm";
const CHECKPOINT_FILE: &str = "checkpoint.monk";
const METRICS_FILE: &str = "metrics.csv";

#[derive(Parser)]
#[command(name = "radmoco", about = "Motion-corrected radial MRI reconstruction with a hash-encoded neural field")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a motion-corrupted radial acquisition of the phantom.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Jointly reconstruct the image and estimate motion.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Disable motion estimation.
        #[arg(long)]
        no_moco: bool,
        /// projection or kspace.
        #[arg(long)]
        arm: Option<String>,
        /// coarse2fine, fine or coarse.
        #[arg(long)]
        encoding: Option<String>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print progress every this many steps; zero is silent.
        #[arg(long, default_value_t = 500)]
        progress: usize,
    },
    /// Compare a reconstruction and motion estimate with ground truth.
    Evaluate {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        gt_image: PathBuf,
        #[arg(long)]
        est_motion: PathBuf,
        #[arg(long)]
        gt_motion: PathBuf,
        /// Metrics CSV; defaults to metrics.csv beside the reconstruction.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one gradient on purpose; the check must then fail.
        #[arg(long, value_enum, default_value_t = FaultArg::None)]
        fault: FaultArg,
    },
    /// Check that spoke inverse transforms match direct line integrals.
    FscCheck,
    Version,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    None,
    RotationScale,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { config, out } => {
            let mut config = load_config(&config)?;
            if let Some(out) = out {
                config.output_dir = out;
            }
            cmd_simulate(&config)?;
        }
        Command::Reconstruct { config, data, no_moco, arm, encoding, out, progress } => {
            let mut config = load_config(&config)?;
            if let Some(out) = out {
                config.output_dir = out;
            }
            if no_moco {
                config.train.motion_enabled = false;
            }
            if let Some(arm) = arm {
                config.train.forward_arm = parse_arm(&arm)?;
            }
            if let Some(encoding) = encoding {
                config.train.encoding = parse_encoding(&encoding)?;
            }
            config.validate()?;
            cmd_reconstruct(&config, &data, progress)?;
        }
        Command::Evaluate { recon, gt_image, est_motion, gt_motion, out } => {
            let out = out.unwrap_or_else(|| recon.with_file_name(METRICS_FILE));
            cmd_evaluate(&recon, &gt_image, &est_motion, &gt_motion, &out)?;
        }
        Command::Gradcheck { seed, fault } => {
            let fault = match fault {
                FaultArg::None => Fault::None,
                FaultArg::RotationScale => Fault::RotationScale,
            };
            return cmd_gradcheck(seed, fault);
        }
        Command::FscCheck => return cmd_fsc_check(),
        Command::Version => println!("radmoco {}", env!("CARGO_PKG_VERSION")),
    }
    Ok(true)
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_simulate(config: &RunConfig) -> Result<()> {
    let dir = &config.output_dir;
    create_dir(dir)?;
    let sim = simulate(&config.acquisition)?;
    let fov = sim.kspace.fov_mm;
    let gt = sim.kspace.ground_truth.clone().context("simulation lacks ground truth")?;
    io::write_data(&dir.join(DATASET_FILE), &DataFile::KSpace(sim.kspace.clone()))?;
    io::write_image(&dir.join(GT_IMAGE_FILE), &sim.image, fov)?;
    io::write_motion_csv(&dir.join(GT_MOTION_FILE), &gt, fov)?;
    io::write_pgm(&dir.join(GT_PREVIEW_FILE), &sim.image.magnitude())?;
    println!(
        "simulated {} views of {} samples into {}",
        sim.kspace.n_views(),
        sim.kspace.spoke_length(),
        dir.display()
    );
    Ok(())
}

fn cmd_reconstruct(config: &RunConfig, data: &Path, progress: usize) -> Result<()> {
    let dir = &config.output_dir;
    create_dir(dir)?;
    let file = io::read_data(data).with_context(|| format!("reading dataset {}", data.display()))?;
    let train = &config.train;
    let (mut trainer, grid, fov) = match file {
        DataFile::KSpace(k) => (Trainer::new(&k, train)?, k.grid, k.fov_mm),
        DataFile::Projection(p) => {
            if train.forward_arm == ForwardArm::KSpace {
                bail!("the kspace arm needs a k-space dataset");
            }
            (Trainer::from_projections(&p, train)?, p.grid, p.fov_mm)
        }
        DataFile::Image { .. } => bail!("{} holds an image, not a dataset", data.display()),
    };
    eprintln!(
        "reconstructing: arm {}, encoding {}, motion {}, {} steps",
        arm_name(train.forward_arm),
        encoding_name(train.encoding),
        if train.motion_enabled { "on" } else { "off" },
        train.epochs
    );
    while !trainer.is_finished() {
        let r = trainer.step()?;
        if progress > 0 && (r.epoch + 1) % progress == 0 {
            eprintln!("step {:>6}  loss {:.6}  lambda {:.3}", r.epoch + 1, r.loss, r.lambda);
        }
    }
    let out = trainer.finish()?;
    let image = out.model.render(&grid)?;
    io::write_image(&dir.join(RECON_FILE), &image, fov)?;
    io::write_motion_csv(&dir.join(EST_MOTION_FILE), &out.motion, fov)?;
    io::write_atomic(&dir.join(LOG_FILE), io::log_csv(&out.log).as_bytes())?;
    io::write_pgm(&dir.join(PREVIEW_FILE), &image.magnitude())?;
    let checkpoint = Checkpoint {
        grid: out.model.grid,
        mlp: out.model.mlp,
        lambda: out.model.lambda,
        epoch: out.model.epoch,
        motion: out.motion,
    };
    io::write_checkpoint(&dir.join(CHECKPOINT_FILE), &checkpoint)?;
    let last = out.log.last().map_or(f64::NAN, |r| r.loss);
    println!("reconstructed into {}; final loss {last:.6}", dir.display());
    Ok(())
}

fn cmd_evaluate(recon: &Path, gt_image: &Path, est_motion: &Path, gt_motion: &Path, out: &Path) -> Result<()> {
    let (recon, _) = io::read_image(recon).with_context(|| format!("reading {}", recon.display()))?;
    let (gt, _) = io::read_image(gt_image).with_context(|| format!("reading {}", gt_image.display()))?;
    let est = io::read_motion_csv(est_motion).with_context(|| format!("reading {}", est_motion.display()))?;
    let gt_m = io::read_motion_csv(gt_motion).with_context(|| format!("reading {}", gt_motion.display()))?;
    let report = evaluate(&recon, &gt, &est, &gt_m)?;
    let text = io::metrics_csv(&report);
    io::write_atomic(out, text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn cmd_gradcheck(seed: u64, fault: Fault) -> Result<bool> {
    let report = gradcheck(seed, fault)?;
    println!("gradcheck seed {seed}: {} instances", report.instances);
    for b in &report.blocks {
        println!("  {:<12} max relative error {:.3e}", b.name, b.max_rel_error);
    }
    println!("  masked level sensitivity {:.3e}", report.masked_sensitivity);
    let ok = report.passed() && report.instances == GRADCHECK_INSTANCES;
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn cmd_fsc_check() -> Result<bool> {
    let report = fsc_check()?;
    for c in &report.cases {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!("  {:<28} relative L2 {:.3e} (limit {:.0e}) {verdict}", c.name, c.rel_l2_error, c.tolerance);
    }
    let ok = report.passed();
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}
