//! Joint demosaicking and denoising for pixel-bin image sensors.
//!
//! This crate simulates Quad Bayer / Bayer color-filter-array capture with
//! additive Gaussian read noise, reconstructs full RGB images with an
//! attention-based encoder/decoder network, and scores results with PSNR,
//! SSIM and CIEDE2000. Training optimizes a four-term objective
//! (L1 reconstruction, feature loss gated by an output-smoothness weight,
//! perceptual color error, adversarial term) with Adam.
//!
//! Everything numeric is `f64` and single-threaded with fixed reduction
//! order, so runs, checkpoints and resumed runs are bit-for-bit
//! reproducible from (inputs, seed, config).

pub mod baseline;
pub mod cfa;
pub mod checkpoint;
pub mod color;
pub mod data;
pub mod dual;
pub mod error;
pub mod extractor;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod objectives;
pub mod raster;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use raster::RgbImage;
