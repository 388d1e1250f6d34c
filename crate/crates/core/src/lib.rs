//! Joint rigid-motion correction and reconstruction for undersampled radial
//! MRI.
//!
//! The image is represented by a hash-encoded neural field and fitted,
//! together with one rigid-motion triplet per acquired view, to projection
//! profiles obtained from the radial k-space spokes through the
//! Fourier-slice relation.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod hash_encoding;
pub mod image;
pub mod io;
pub mod metrics;
pub mod network;
pub mod simulator;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
