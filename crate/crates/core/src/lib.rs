//! Depth-guided domain adaptation for single image dehazing.
//!
//! Two translators move hazy images between a synthetic and a real haze
//! domain (the synthetic-to-real direction conditioned on depth through a
//! spatial feature transform), and two dehazing networks, one per domain,
//! are trained on original and translated images with supervised,
//! dark-channel, total-variation and cross-domain consistency objectives.
//!
//! All numeric code is generic over [`Scalar`]; the aliases at the crate
//! root fix the element type for the common cases.

pub mod autodiff;
pub mod container;
pub mod datasets;
pub mod dehazing;
pub mod evaluation;
pub mod gradcheck;
mod error;
pub mod kernels;
mod layers;
pub mod losses;
pub mod optim;
pub mod params;
pub mod physics;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod translation;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::ParamSet;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamSet32 = ParamSet<f32>;
pub type ParamSet64 = ParamSet<f64>;
