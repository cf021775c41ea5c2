pub mod autodiff;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod params;
pub mod regularizer;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use tensor::Tensor;
