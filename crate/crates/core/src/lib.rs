pub mod encoders;
pub mod evaluation;
pub mod error;
pub mod feature_field;
pub mod image;
pub mod math;
pub mod nn;
pub mod pipeline;
pub mod scene_io;
pub mod selection;
pub mod style_core;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
