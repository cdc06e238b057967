//! Single-image style extraction and injection for frozen latent-diffusion
//! generators.
//!
//! The pipeline has three training stages. A per-image style vector is first
//! recovered by textual inversion against the frozen generator. A vision
//! encoder and a linear projection are then pre-trained to predict those
//! vectors, and finally fine-tuned jointly through the generator's
//! reconstruction loss. At inference the predicted vector is concatenated
//! with a new prompt's text embeddings and sampled with classifier-free
//! guidance.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the common instantiations.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod inversion;
pub mod params;
pub mod prep;
pub mod sampler;
pub mod scalar;
pub mod style_module;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
