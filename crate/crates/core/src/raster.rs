//! Planar floating-point RGB images and PNG round-tripping.
//!
//! All pipeline math happens on `f64` values in [0, 1], channel-planar
//! (R plane, then G, then B) so a whole image maps directly onto a
//! `[3, H, W]` tensor. Files are written as 16-bit PNG so that quantization
//! error (~8e-6) is far below every tolerance used in training or metrics.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    /// Channel-planar samples, `data[c * h * w + y * w + x]`, length `3*h*w`.
    data: Vec<f64>,
}

impl RgbImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Self {
        let mut img = RgbImage::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                for c in 0..3 {
                    img.set(c, y, x, px[c]);
                }
            }
        }
        img
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::ShapeMismatch(format!(
                "planar RGB buffer has {} samples, expected 3*{width}*{height}",
                data.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Clamp every sample into [0, 1] in place.
    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {height}x{width}+{top}+{left} exceeds image {}x{}",
                self.height, self.width
            )));
        }
        let mut out = RgbImage::zeros(width, height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    out.set(c, y, x, self.get(c, top + y, left + x));
                }
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = RgbImage::zeros(self.width, self.height);
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// View as a `[3, H, W]` tensor (copies).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![3, self.height, self.width], self.data.clone())
    }

    /// Build from a `[3, H, W]` tensor, clamping into [0, 1].
    pub fn from_tensor_clamped(t: &Tensor) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected a [3, H, W] tensor, got {shape:?}"
            )));
        }
        let mut img = RgbImage::from_planar(shape[2], shape[1], t.data().to_vec())?;
        img.clamp01();
        Ok(img)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let dynamic = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::bad_file(path, format!("not a decodable image: {e}")))?;
        let buf = dynamic.to_rgb16();
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        let mut img = RgbImage::zeros(w, h);
        for (x, y, px) in buf.enumerate_pixels() {
            for c in 0..3 {
                img.set(c, y as usize, x as usize, px.0[c] as f64 / 65535.0);
            }
        }
        Ok(img)
    }

    /// Write as 16-bit RGB PNG; samples are clamped and rounded.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let mut raw = Vec::with_capacity(3 * self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    raw.push(quantize_u16(self.get(c, y, x)));
                }
            }
        }
        let buf: image::ImageBuffer<image::Rgb<u16>, Vec<u16>> =
            image::ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
                .expect("raw buffer sized to image");
        buf.save(path)
            .map_err(|e| Error::bad_file(path, format!("PNG encode failed: {e}")))
    }

    /// Write as 8-bit RGB PNG (for quick previews).
    pub fn save_png8(&self, path: &Path) -> Result<()> {
        let mut raw = Vec::with_capacity(3 * self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    raw.push(quantize_u8(self.get(c, y, x)));
                }
            }
        }
        let buf: image::ImageBuffer<image::Rgb<u8>, Vec<u8>> =
            image::ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
                .expect("raw buffer sized to image");
        buf.save(path)
            .map_err(|e| Error::bad_file(path, format!("PNG encode failed: {e}")))
    }

    /// Round every sample to the 8-bit grid (simulates 8-bit output files
    /// without an actual file round trip).
    pub fn quantized_8bit(&self) -> Self {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v = quantize_u8(*v) as f64 / 255.0;
        }
        out
    }
}

pub fn quantize_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Single-plane image (the raw CFA mosaic), same conventions as [`RgbImage`].
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl PlaneImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        PlaneImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "plane buffer has {} samples, expected {width}*{height}",
                data.len()
            )));
        }
        Ok(PlaneImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let dynamic = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::bad_file(path, format!("not a decodable image: {e}")))?;
        let buf = dynamic.to_luma16();
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        let mut img = PlaneImage::zeros(w, h);
        for (x, y, px) in buf.enumerate_pixels() {
            img.set(y as usize, x as usize, px.0[0] as f64 / 65535.0);
        }
        Ok(img)
    }

    /// Write as 16-bit grayscale PNG.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let raw: Vec<u16> = self.data.iter().map(|&v| quantize_u16(v)).collect();
        let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
            image::ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
                .expect("raw buffer sized to image");
        buf.save(path)
            .map_err(|e| Error::bad_file(path, format!("PNG encode failed: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png16_round_trip_is_exact_on_grid_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        // Values already on the 16-bit grid survive a save/load unchanged.
        let img = RgbImage::from_fn(5, 4, |x, y| {
            let v = ((y * 5 + x) * 997 % 65536) as f64 / 65535.0;
            [v, 1.0 - v, v * 0.5]
        });
        let img = {
            let mut q = img.clone();
            for v in q.as_mut_slice() {
                *v = quantize_u16(*v) as f64 / 65535.0;
            }
            q
        };
        img.save_png16(&path).unwrap();
        let back = RgbImage::load_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn quantization_error_is_bounded() {
        for i in 0..1000 {
            let v = i as f64 / 999.0;
            let q = quantize_u16(v) as f64 / 65535.0;
            assert!((v - q).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn crop_and_flip() {
        let img = RgbImage::from_fn(4, 2, |x, y| [x as f64, y as f64, 0.0]);
        let c = img.crop(0, 1, 2, 2).unwrap();
        assert_eq!(c.get(0, 0, 0), 1.0);
        assert_eq!(c.get(0, 1, 1), 2.0);
        let f = img.flip_horizontal();
        assert_eq!(f.get(0, 0, 0), 3.0);
        assert_eq!(f.get(0, 0, 3), 0.0);
        assert!(img.crop(0, 3, 2, 2).is_err());
    }

    #[test]
    fn tensor_bridge_round_trips() {
        let img = RgbImage::from_fn(3, 2, |x, y| [0.1 * x as f64, 0.2 * y as f64, 0.3]);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 2, 3]);
        let back = RgbImage::from_tensor_clamped(&t).unwrap();
        assert_eq!(img, back);
    }
}
