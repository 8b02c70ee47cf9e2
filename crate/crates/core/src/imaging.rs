//! Pixel buffers, bilinear resampling and PNG/PPM I/O.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::{Error, Result};

/// Bilinear resampling of an `h×w×c` interleaved buffer to `oh×ow×c`.
///
/// Pixel centers are aligned (no corner alignment): destination pixel `j`
/// samples source coordinate `(j + 0.5)·w/ow − 0.5`, clamped to the image.
/// Every output is a convex combination of inputs, so values stay within
/// the source range.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w * c, "buffer does not match {h}x{w}x{c}");
    let axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|j| {
                let pos = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let rows = axis(oh, h);
    let cols = axis(ow, w);
    let mut out = vec![0.0; oh * ow * c];
    for (i, &(r0, r1, fy)) in rows.iter().enumerate() {
        for (j, &(c0, c1, fx)) in cols.iter().enumerate() {
            for ch in 0..c {
                let p = |r: usize, q: usize| src[(r * w + q) * c + ch];
                let top = p(r0, c0) + (p(r0, c1) - p(r0, c0)) * fx;
                let bottom = p(r1, c0) + (p(r1, c1) - p(r1, c0)) * fx;
                out[(i * ow + j) * c + ch] = top + (bottom - top) * fy;
            }
        }
    }
    out
}

/// An `height×width` RGB image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// Row-major, channel-interleaved.
    pub pixels: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Bilinear resize to `size×size`, channel-interleaved `f64`.
    pub fn resized(&self, oh: usize, ow: usize) -> Vec<f64> {
        let src: Vec<f64> = self.pixels.iter().map(|&v| v as f64).collect();
        resize_bilinear(&src, self.height, self.width, 3, oh, ow)
    }
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads an 8-bit PNG or binary PPM (P6) and scales values by 1/255.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage {
        height: h as usize,
        width: w as usize,
        pixels: img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
    })
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit RGB image; the format follows the extension (`.png`, `.ppm`).
pub fn save_rgb(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = img.pixels.iter().map(|&v| to_u8(v)).collect();
    let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(img.width as u32, img.height as u32, raw)
        .ok_or_else(|| image_err(path, "pixel buffer size mismatch"))?;
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Writes a boolean mask as 8-bit grayscale (255 = set).
pub fn save_mask(path: impl AsRef<Path>, height: usize, width: usize, mask: &[bool]) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| image_err(path, "mask size mismatch"))?;
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw().into_iter().map(|v| v >= 128).collect()))
}

/// Writes values in `[0, 1]` as 16-bit grayscale, `round(65535·v)`.
pub fn save_gray16(path: impl AsRef<Path>, height: usize, width: usize, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u16> = values
        .iter()
        .map(|&v| (65535.0 * v.clamp(0.0, 1.0)).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| image_err(path, "map size mismatch"))?;
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn load_gray16(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_luma16();
    let (w, h) = img.dimensions();
    Ok((
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant() {
        let src = vec![0.3; 40 * 40 * 3];
        let out = resize_bilinear(&src, 40, 40, 3, 17, 23);
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn same_size_is_identity() {
        let src: Vec<f64> = (0..400 * 3 * 3).map(|i| (i as f64 * 0.013).sin()).collect();
        let out = resize_bilinear(&src, 3, 400, 3, 3, 400);
        assert_eq!(out, src);
    }

    #[test]
    fn ramp_is_reproduced_at_pixel_centers() {
        // value at source column i is the normalized center (i + 0.5) / 400
        let (h, w) = (4, 400);
        let src: Vec<f64> = (0..h * w).map(|i| ((i % w) as f64 + 0.5) / w as f64).collect();
        let out = resize_bilinear(&src, h, w, 1, 4, 224);
        for (j, v) in out[..224].iter().enumerate() {
            let expect = (j as f64 + 0.5) / 224.0;
            assert!((v - expect).abs() < 1e-9, "col {j}: {v} vs {expect}");
        }
    }

    #[test]
    fn stays_within_source_range() {
        let src: Vec<f64> = (0..31 * 29).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect();
        let (lo, hi) = src.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        for (oh, ow) in [(7, 9), (64, 50), (31, 29)] {
            let out = resize_bilinear(&src, 31, 29, 1, oh, ow);
            assert!(out.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }

    #[test]
    fn png_ppm_and_gray16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(3, 5);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = ((i * 17) % 256) as f32 / 255.0;
        }
        for name in ["a.png", "a.ppm"] {
            let path = dir.path().join(name);
            save_rgb(&path, &img).unwrap();
            let back = load_rgb(&path).unwrap();
            assert_eq!(back.height, 3);
            for (a, b) in back.pixels.iter().zip(&img.pixels) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let vals = [0.0, 0.25, 1.0, 0.5, 0.75, 0.1];
        let path = dir.path().join("s.png");
        save_gray16(&path, 2, 3, &vals).unwrap();
        let (h, w, back) = load_gray16(&path).unwrap();
        assert_eq!((h, w), (2, 3));
        for (a, b) in back.iter().zip(vals) {
            assert!((a - b).abs() <= 0.5 / 65535.0);
        }
    }
}
