pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod constraints;
pub mod data;
pub mod dsattn;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod semkb;
pub mod training;

pub use error::{Error, Result};
