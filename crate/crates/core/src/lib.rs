//! Joint static pruning and dynamic block skipping for small Vision
//! Transformers, on a self-contained reverse-mode autodiff core.

pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod compress;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod flops;
pub mod gating;
pub mod gradcheck;
pub mod gumbel;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vit;

pub use autograd::{Activation, Tape, Var};
pub use error::{Error, Result};
pub use model::{Compression, Network, Stage};
pub use rng::RngState;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
pub use vit::VitConfig;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
