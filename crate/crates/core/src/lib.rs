pub mod config;
pub mod data;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imageio;
pub mod inference;
pub mod kernels;
pub mod layers;
pub mod lcm;
pub mod real;
pub mod sampler;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod warping_net;
pub mod weights_io;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
