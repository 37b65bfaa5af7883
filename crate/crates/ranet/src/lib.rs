//! Resolution-adaptive multi-scale network: a multi-classifier convolutional
//! network that extracts low-resolution features first and lets confident
//! samples exit early, with exact multiply-accumulate cost accounting and
//! confidence-threshold calibration against compute budgets.

pub mod builder;
pub mod calib;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod scheduler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
