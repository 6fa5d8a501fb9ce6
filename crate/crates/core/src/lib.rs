pub mod audio;
pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod denoiser;
pub mod diffusion;
pub mod dsp;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Mat;

pub type Mat32 = tensor::Mat<f32>;
pub type Mat64 = tensor::Mat<f64>;
pub type Codec32 = codec::Codec<f32>;
pub type Codec64 = codec::Codec<f64>;
pub type Denoiser32 = denoiser::Denoiser<f32>;
pub type Denoiser64 = denoiser::Denoiser<f64>;
pub type Generator32 = pipeline::Generator<f32>;
pub type Generator64 = pipeline::Generator<f64>;
pub type TrainState32 = training::TrainState<f32>;
pub type TrainState64 = training::TrainState<f64>;
