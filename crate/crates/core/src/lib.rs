//! Conditional normalizing flows for stochastic image super-resolution.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conditioning;
pub mod error;
pub mod io;
pub mod latent;
pub mod layers;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use conditioning::{DownscaleKernel, EncoderConfig, KernelKind, LrEncoder};
pub use error::{Error, Result};
pub use io::{Checkpoint, RunConfig};
pub use model::{ArchConfig, FlowModel, LatentStack};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::{Gradients, Tape, Tensor, Var};
