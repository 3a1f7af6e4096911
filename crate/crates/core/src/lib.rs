//! Reverse-design lab: infer the global color edits that turn a source image
//! into an edited one, with a small two-image vision-language model.

pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod imgedit;
pub mod model;
pub mod prompting;
pub mod training;

pub use error::{Error, Result};
