pub mod algorithms;
pub mod autodiff;
pub mod coresets;
pub mod data;
pub mod error;
pub mod experiment;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod par;
pub mod predict;
pub mod rng;
pub mod tensor;
pub mod variational;

pub use error::{Error, Result};
pub use tensor::Tensor;
