//! Lip-synchronized speech synthesis from text, lip video and speaker identity.

pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor_file;
pub mod text;
pub mod toy;
pub mod training;
pub mod tva;
pub mod vocoder;

pub use error::{Error, Result};
