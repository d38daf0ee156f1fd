//! Self-distillation of crop encoders with bag-of-instances pooling.
//!
//! A student and an EMA teacher encode several crops of each image. Every
//! crop is treated as a bag of patch instances: bag logits are the mean of
//! instance logits. The student learns from the teacher at the image level,
//! at the patch level through nearest-patch matching, and from agreement
//! among its own crops.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod mil;
pub mod objective;
pub mod trainer;

pub use error::{Error, Result};
