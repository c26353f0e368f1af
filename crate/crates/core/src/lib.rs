pub mod autodiff;
pub mod cgm;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cpb;
pub mod dataset;
pub mod degrade;
pub mod enhancer;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod nn;
pub mod ops;
pub mod params;
pub mod suite;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Gradients, Var};
pub use error::{Error, Result};
pub use ops::{Activation, Conv2dSpec, PoolKind};
pub use params::ParamStore;
pub use tensor::{Shape, Tensor};
