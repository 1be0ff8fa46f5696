//! Multi-scale 3D normalizing flow trained by exact maximum likelihood, and a
//! latent-space solver that recovers volumes consistent with one or two
//! averaged 2D projections at a chosen likelihood.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors and a reverse-mode autodiff graph.
//! * [`flow`]: invertible layers (actnorm, 1x1x1 convolution, affine coupling,
//!   squeeze, split with a learned prior).
//! * [`glow`]: the multi-scale model, checkpoints, likelihoods and sampling.
//! * [`train`]: maximum-likelihood training.
//! * [`projection`]: depthwise / widthwise averaging projections.
//! * [`solver`]: projection-consistent reconstruction by latent descent.
//! * [`data`]: CT windowing, synthetic phantoms, DRRs and file formats.
//! * [`metrics`]: SSIM and PSNR.

pub mod data;
pub mod error;
pub mod flow;
pub mod glow;
pub mod metrics;
pub mod projection;
pub mod solver;
pub mod tensor;
pub mod train;

pub use data::{Plane, Projection, Volume};
pub use error::{Error, Result};
pub use glow::{FlowModel, LatentStack, ModelConfig};
pub use solver::{ReconConfig, ReconResult};
pub use tensor::{Graph, NodeId, Tensor};
pub use train::{TrainConfig, TrainReport};
