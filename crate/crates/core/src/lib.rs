//! Deep metric learning with parameter-efficient ViT fine-tuning and
//! prompt-generated semantic proxies.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod image;
pub mod loss;
pub mod optim;
pub mod paging;
pub mod params;
pub mod peft;
pub mod proxy;
pub mod tensor;
pub mod train;
pub mod vit;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
