//! Color-filter-array capture simulation: Bayer and Quad Bayer mosaicking,
//! additive Gaussian read noise, and the sparse packed encoding the network
//! consumes.
//!
//! Channel indices are 0 = R, 1 = G, 2 = B throughout. The Quad Bayer tile
//! is the Bayer tile with every site duplicated into a 2x2 block (the layout
//! used by pixel-bin sensors).

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::raster::{PlaneImage, RgbImage};
use crate::util::rng_from_seed;

/// Bayer tile (RGGB phase): row 0 is R G, row 1 is G B.
const BAYER_TILE: [[usize; 2]; 2] = [[0, 1], [1, 2]];

/// Quad Bayer tile: each Bayer site expanded into a 2x2 same-color block.
const QUAD_TILE: [[usize; 4]; 4] = [[0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 2, 2], [1, 1, 2, 2]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfaPattern {
    Bayer,
    Quad,
}

impl CfaPattern {
    pub fn tile_size(self) -> usize {
        match self {
            CfaPattern::Bayer => 2,
            CfaPattern::Quad => 4,
        }
    }

    /// Which channel the sensor samples at pixel (y, x).
    #[inline]
    pub fn channel_at(self, y: usize, x: usize) -> usize {
        match self {
            CfaPattern::Bayer => BAYER_TILE[y % 2][x % 2],
            CfaPattern::Quad => QUAD_TILE[y % 4][x % 4],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CfaPattern::Bayer => "bayer",
            CfaPattern::Quad => "quad",
        }
    }

    fn check_aligned(self, width: usize, height: usize) -> Result<()> {
        let tile = self.tile_size();
        if width == 0 || height == 0 || width % tile != 0 || height % tile != 0 {
            return Err(Error::Misaligned {
                width,
                height,
                pattern: self.name(),
                tile,
            });
        }
        Ok(())
    }
}

impl FromStr for CfaPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bayer" => Ok(CfaPattern::Bayer),
            "quad" => Ok(CfaPattern::Quad),
            other => Err(Error::InvalidArgument(format!(
                "unknown CFA pattern {other:?} (expected \"bayer\" or \"quad\")"
            ))),
        }
    }
}

/// Additive Gaussian read noise. `sigma` is quoted on the conventional 8-bit
/// scale (a value of 25 means a standard deviation of 25/255 in [0, 1]).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

/// A single-plane CFA capture plus the pattern that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct MosaicImage {
    pub plane: PlaneImage,
    pub pattern: CfaPattern,
}

/// Sample each pixel's CFA channel out of a full RGB image.
pub fn mosaic(img: &RgbImage, pattern: CfaPattern) -> Result<MosaicImage> {
    pattern.check_aligned(img.width(), img.height())?;
    let mut plane = PlaneImage::zeros(img.width(), img.height());
    for y in 0..img.height() {
        for x in 0..img.width() {
            plane.set(y, x, img.get(pattern.channel_at(y, x), y, x));
        }
    }
    Ok(MosaicImage { plane, pattern })
}

/// Add clipped Gaussian noise to the mosaic plane (in place).
pub fn add_noise(mosaic: &mut MosaicImage, noise: &NoiseSpec) -> Result<()> {
    if noise.sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be non-negative, got {}",
            noise.sigma
        )));
    }
    if noise.sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, noise.sigma / 255.0)
        .map_err(|e| Error::InvalidArgument(format!("bad noise sigma: {e}")))?;
    let mut rng = rng_from_seed(noise.seed);
    for v in mosaic.plane.as_mut_slice() {
        *v += normal.sample(&mut rng);
    }
    mosaic.plane.clamp01();
    Ok(())
}

/// Mosaic then optionally add noise: the full sensor degradation.
pub fn degrade(img: &RgbImage, pattern: CfaPattern, noise: &NoiseSpec) -> Result<MosaicImage> {
    let mut m = mosaic(img, pattern)?;
    add_noise(&mut m, noise)?;
    Ok(m)
}

impl MosaicImage {
    pub fn width(&self) -> usize {
        self.plane.width()
    }

    pub fn height(&self) -> usize {
        self.plane.height()
    }

    /// Scatter the plane into a sparse `[3, H, W]` tensor: each sample lands
    /// in its own channel, all other positions are zero.
    pub fn pack_input(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let mut out = Tensor::zeros(vec![3, h, w]);
        let data = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                let c = self.pattern.channel_at(y, x);
                data[(c * h + y) * w + x] = self.plane.get(y, x);
            }
        }
        out
    }

    /// Write the plane as a 16-bit grayscale PNG plus a `.pattern.txt`
    /// sidecar recording the CFA layout.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.plane.save_png16(path)?;
        let sidecar = pattern_sidecar_path(path);
        std::fs::write(&sidecar, format!("{}\n", self.pattern.name()))
            .map_err(|e| Error::io(&sidecar, e))
    }

    /// Load a mosaic written by [`MosaicImage::save`]; the sidecar must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let plane = PlaneImage::load_png(path)?;
        let sidecar = pattern_sidecar_path(path);
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let pattern = CfaPattern::from_str(text.trim())?;
        pattern.check_aligned(plane.width(), plane.height())?;
        Ok(MosaicImage { plane, pattern })
    }
}

/// `out.png` -> `out.pattern.txt`.
pub fn pattern_sidecar_path(png_path: &Path) -> PathBuf {
    png_path.with_extension("pattern.txt")
}

/// Binary `[3, H, W]` mask: 1 where the CFA samples that channel.
pub fn cfa_mask(pattern: CfaPattern, height: usize, width: usize) -> Tensor {
    let mut out = Tensor::zeros(vec![3, height, width]);
    let data = out.data_mut();
    for y in 0..height {
        for x in 0..width {
            let c = pattern.channel_at(y, x);
            data[(c * height + y) * width + x] = 1.0;
        }
    }
    out
}
