pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evalviz;
pub mod expert_block;
pub mod freq_ops;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod moe;
pub mod network;
pub mod params;
pub mod router;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
