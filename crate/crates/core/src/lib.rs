//! Vision-integrated neural speech codec.

pub mod codec;
pub mod config;
pub mod dsp;
pub mod error;
pub mod fusion;
mod layers;
pub mod model;
pub mod rvq;
pub mod training;
pub mod vision;

pub use config::{ModelConfig, Scenario};
pub use error::{Result, VnscError};
pub use model::Model;
