pub mod blocks;
pub mod check;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod layout;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod render;
pub mod workflow;

pub use error::{Error, Result};
