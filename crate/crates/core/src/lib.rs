pub mod enhancement;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod keyframes;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
pub mod recipe;
pub mod stan;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use numerics::Matrix;
