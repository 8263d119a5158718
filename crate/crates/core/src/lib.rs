pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eradio;
pub mod error;
pub mod eval;
pub mod loss;
pub mod nn;
pub mod numerics;
pub mod optim;
pub mod partition;
pub mod rng;
pub mod student;
pub mod teachers;
pub mod trainer;
pub mod vit;

pub use config::RunConfig;
pub use error::{CheckpointError, Error, Result};
pub use numerics::{Element, Graph, ParamStore, Tensor, Var};
