//! Gaussian-process regression with pooled priors.
//!
//! Several GP priors are combined as a weighted mixture (a mixture of Gaussian
//! processes). Two inference routes are provided:
//!
//! * [`exact_mgp`]: closed-form mixture posterior with marginal-likelihood
//!   training of the kernel hyperparameters under fixed mixture weights;
//! * [`svmgp`]: a sparse variational variant with per-component inducing
//!   points and a Dirichlet distribution over the mixture weights.
//!
//! [`kernels`] and [`gaussmix`] hold the building blocks, [`harness`] the data
//! simulation, experiment presets and command-line front end.

pub mod error;
pub mod exact_mgp;
pub mod gaussmix;
pub mod harness;
pub mod kernels;
pub mod linalg;
pub mod optim;
pub mod rng;
pub mod special;
pub mod svmgp;

pub use error::{MgpError, Result};
pub use gaussmix::{GaussianDist, GaussianMixtureDist};
pub use kernels::{GramOptions, KernelKind, KernelSpec, MeanSpec};
pub use exact_mgp::{ExactMgpPosterior, MgpComponent, MgpPrior, TrainConfig};
pub use svmgp::{ComponentSpec, SvmgpModel, SvmgpTrainConfig};
