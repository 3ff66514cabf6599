//! Small variational auto-encoders trained from scratch, with post-hoc PCA
//! whitening of the latent space and the majority-vote disentanglement score.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense f64 arrays and a tape-based reverse-mode graph.
//! * [`nn`]: dense layers, the two ELBO terms, the reparameterisation trick
//!   and RMSprop.
//! * [`objectives`]: VAE, β-VAE and Factor-VAE losses, the total-correlation
//!   discriminator and the training loop.
//! * [`whitening`]: Jacobi eigensolver and the whitening transform.
//! * [`metric`]: the majority-vote disentanglement score.
//! * [`shapes`]: the procedural 2D-shapes corpus and the IDX reader/writer.
//! * [`persist`] and [`render`]: binary checkpoints, transform files, PGM
//!   figures and CSV series.

pub mod error;
pub mod latent;
pub mod metric;
pub mod nn;
pub mod objectives;
pub mod persist;
pub mod render;
pub mod shapes;
pub mod tensor;
pub mod whitening;

pub use error::{Error, Result};
pub use latent::LatentBatch;
pub use metric::{LatentEncoder, MetricConfig, MetricReport, Vote};
pub use nn::{Activation, Rmsprop, RmspropConfig};
pub use objectives::{Discriminator, LossCurves, LossPoint, Objective, TrainConfig, Vae};
pub use shapes::{FactorSpace, FactorTuple, ImageBatch};
pub use tensor::{Graph, ParamId, ParamStore, Tensor, Var};
pub use whitening::WhiteningTransform;
