//! Gradient-inversion attacks against a small vision transformer.
//!
//! The crate holds a reverse-mode tensor engine, the victim ViT and the
//! batch-norm prior CNN, the attack loop with its priors and schedules,
//! reconstruction metrics, leakage-tracing ablations, and the file formats
//! and dataset synthesis the command-line tool builds on.

pub mod ablation;
pub mod attack;
pub mod error;
pub mod io;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
