//! Locality-sensitive transformer captioning over grid features.

pub mod ablation;
pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod layers;
pub mod lsa;
pub mod lsf;
pub mod metrics;
pub mod model;
pub mod params;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use real::{Precision, Real};
pub use tensor::{Tape, Var};
