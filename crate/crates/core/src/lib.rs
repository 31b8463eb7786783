//! Joint-diffusion panorama generation: a latent canvas is tiled into
//! overlapping views that are denoised together, with selected attention
//! layers attending over the merged canvas ("merge, attend, diffuse").
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod backbone;
pub mod codec;
pub mod conditioning;
pub mod mad;
pub mod metrics;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod tiling;

pub use scalar::Scalar;

pub use backbone::{AttnBlockDescriptor, AttnKind, BackboneError, NoisePredictor, Stage};
pub use mad::{MadOptions, MergeSchedule, StagePreset};
pub use sampler::{generate_panorama, GenerationMode, PanoramaRequest, SamplerConfig, SamplerError, SamplerMode};
pub use tiling::{plan_views, Orientation, PanoramaSpec, ViewLayout};

pub type Tensor = tensor::Tensor3<f32>;
pub type Tensor64 = tensor::Tensor3<f64>;
pub type ToyDenoiser = backbone::ToyDenoiser<f32>;
pub type ToyDenoiser64 = backbone::ToyDenoiser<f64>;
pub type ToyEmbedder = conditioning::ToyEmbedder<f32>;
pub type ToyEmbedder64 = conditioning::ToyEmbedder<f64>;
pub type PromptEmbedding = conditioning::PromptEmbedding<f32>;
pub type ViewStack = tiling::ViewStack<f32>;
pub type Generation = sampler::Generation<f32>;
