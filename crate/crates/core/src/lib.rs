#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod crf;
pub mod data;
pub mod embedding;
pub mod encoders;
pub mod error;
pub mod heads;
pub mod layer;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
