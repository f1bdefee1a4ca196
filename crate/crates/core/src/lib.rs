//! Latent manifold compaction for H&E histopathology patches.
//!
//! The crate is organised bottom-up:
//!
//! * [`stain_math`] converts patches to optical density, estimates a
//!   two-stain basis, and rescales hematoxylin/eosin concentrations.
//! * [`manifold`] turns patches into pairs of independently stain-augmented
//!   views and loads or synthesises patch datasets.
//! * [`encoder`] is a small vision transformer with hand-written reverse mode.
//! * [`loss`] holds the cross-correlation compaction objective and its
//!   analytic gradients.
//! * [`trainer`] runs AdamW over view pairs with a warmup/stable/anneal
//!   schedule and persists checkpoints.
//! * [`metrics`] measures batch separation (Gaussian W2), view alignment and
//!   linear-probe transfer.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod io;
pub mod loss;
pub mod manifold;
pub mod metrics;
pub mod stain_math;
pub mod trainer;
mod util;

pub use error::{Error, ErrorKind, Result};
