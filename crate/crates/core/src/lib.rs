pub mod attribution;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod font;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod params;
pub mod registry;
pub mod robustness;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod wib;

pub use autograd::{Activation, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tensor::Tensor;
