//! Desk-scale image manipulation localization with image-text ambiguity
//! gating, cross-modal fusion and an invertible-coupling edge decoder.

pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod imageio;
pub mod itcam;
pub mod itim;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod red;
pub mod oracle;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{CmbError, Result};
pub use tensor::{Parameter, Tensor};
