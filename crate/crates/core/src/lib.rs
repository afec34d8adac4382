//! Color quantization for machine recognition.
//!
//! Learned quantizers (ColorCNN and ColorCNN+) next to the classical
//! MedianCut, octree and dithering baselines, the training loop that fits
//! the learned ones against a frozen classifier, and the accuracy and
//! bitrate evaluation used to compare them.

pub mod batch;
pub mod classic;
pub mod codec;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod losses;
pub mod nn;
pub mod quantnet;
pub mod training;
pub mod eval;

pub use error::{Error, Result};
pub use imaging::{IndexedImage, Rgb, RgbImage};
