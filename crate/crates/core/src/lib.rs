//! Low-light image enhancement driven by bit-plane self-information.
//!
//! An 8-bit RGB image is split into 24 binary bit-plane maps, smoothed,
//! re-weighted by channel and spatial attention and fed to a stack of
//! curve estimators that brighten the image through a recursive update.
//! Training is unsupervised and needs only low-light images.

pub mod ablation;
pub mod attention;
pub mod decompose;
pub mod enhancer;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod trainer;

pub use error::{Result, SimiError};
