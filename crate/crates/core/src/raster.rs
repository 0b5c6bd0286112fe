//! Planar multi-channel rasters and the geometric operations shared by the
//! cube, map and dataset code: crops, flips, resizes and PNG export.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Channel-planar `f32` raster: `data[c * width * height + y * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Planes {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Axis-aligned window inside a raster.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flip {
    Identity,
    Horizontal,
    Vertical,
}

impl Flip {
    pub const ALL: [Flip; 3] = [Flip::Identity, Flip::Horizontal, Flip::Vertical];
}

impl Planes {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize) -> usize {
        c * self.plane_len() + y * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[self.index(c, x, y)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        let i = self.index(c, x, y);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Spectrum (one value per channel) at a pixel.
    pub fn pixel(&self, x: usize, y: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, x, y)).collect()
    }

    pub fn same_shape(&self, other: &Planes) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn crop(&self, win: Window) -> Result<Planes> {
        if win.x + win.width > self.width || win.y + win.height > self.height {
            return Err(Error::dims(
                format!("window inside {}x{}", self.width, self.height),
                format!("{}x{} at ({}, {})", win.width, win.height, win.x, win.y),
            ));
        }
        let mut out = Planes::zeros(win.width, win.height, self.channels);
        for c in 0..self.channels {
            for y in 0..win.height {
                let src = self.index(c, win.x, win.y + y);
                let dst = out.index(c, 0, y);
                out.data[dst..dst + win.width].copy_from_slice(&self.data[src..src + win.width]);
            }
        }
        Ok(out)
    }

    pub fn flipped(&self, flip: Flip) -> Planes {
        let mut out = self.clone();
        match flip {
            Flip::Identity => {}
            Flip::Horizontal => {
                for c in 0..self.channels {
                    for y in 0..self.height {
                        let row = out.index(c, 0, y);
                        out.data[row..row + self.width].reverse();
                    }
                }
            }
            Flip::Vertical => {
                for c in 0..self.channels {
                    for y in 0..self.height {
                        let src = self.index(c, 0, self.height - 1 - y);
                        let dst = out.index(c, 0, y);
                        out.data[dst..dst + self.width]
                            .copy_from_slice(&self.data[src..src + self.width]);
                    }
                }
            }
        }
        out
    }

    /// Bilinear resize with half-pixel centres. Each output is a convex
    /// combination of its four neighbours, clamped to their hull.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Planes {
        let mut out = Planes::zeros(width, height, self.channels);
        if self.width == 0 || self.height == 0 {
            return out;
        }
        let xs = sample_coords(self.width, width);
        let ys = sample_coords(self.height, height);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                    let a = src[y0 * self.width + x0];
                    let b = src[y0 * self.width + x1];
                    let cc = src[y1 * self.width + x0];
                    let d = src[y1 * self.width + x1];
                    let top = lerp(a, b, tx);
                    let bottom = lerp(cc, d, tx);
                    dst[oy * width + ox] = lerp(top, bottom, ty);
                }
            }
        }
        out
    }

    /// Nearest-neighbour resize; never invents values absent from the input.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Planes {
        let mut out = Planes::zeros(width, height, self.channels);
        if self.width == 0 || self.height == 0 {
            return out;
        }
        let xs: Vec<usize> = (0..width)
            .map(|o| nearest_coord(self.width, width, o))
            .collect();
        let ys: Vec<usize> = (0..height)
            .map(|o| nearest_coord(self.height, height, o))
            .collect();
        for c in 0..self.channels {
            for (oy, &sy) in ys.iter().enumerate() {
                for (ox, &sx) in xs.iter().enumerate() {
                    let v = self.get(c, sx, sy);
                    out.set(c, ox, oy, v);
                }
            }
        }
        out
    }

    /// Replace NaN with `value` in place.
    pub fn fill_nan(&mut self, value: f32) {
        for v in &mut self.data {
            if v.is_nan() {
                *v = value;
            }
        }
    }
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    let v = a + t * (b - a);
    if a <= b {
        v.clamp(a, b)
    } else if a > b {
        v.clamp(b, a)
    } else {
        // NaN operand
        v
    }
}

fn sample_coords(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

fn nearest_coord(src: usize, dst: usize, o: usize) -> usize {
    let s = ((o as f64 + 0.5) * src as f64 / dst as f64).floor() as usize;
    s.min(src - 1)
}

/// Write an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    write_png(path, width, height, png::ColorType::Grayscale, pixels)
}

/// Write an 8-bit RGB PNG from interleaved bytes.
pub fn write_rgb_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    write_png(path, width, height, png::ColorType::Rgb, pixels)
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    pixels: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer
        .write_image_data(pixels)
        .map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))
}

/// Quantize a [0,1] value to a byte; NaN maps to 0.
#[inline]
pub fn to_byte(v: f32) -> u8 {
    if v.is_nan() {
        0
    } else {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Planes {
        let data = (0..w * h).map(|i| i as f32).collect();
        Planes::from_vec(w, h, 1, data).unwrap()
    }

    #[test]
    fn crop_out_of_bounds_is_rejected() {
        let p = ramp(4, 4);
        let win = Window {
            x: 2,
            y: 0,
            width: 3,
            height: 1,
        };
        assert!(p.crop(win).is_err());
    }

    #[test]
    fn flips_are_involutions() {
        let p = ramp(5, 3);
        for f in Flip::ALL {
            assert_eq!(p.flipped(f).flipped(f), p);
        }
        assert_eq!(p.flipped(Flip::Horizontal).get(0, 0, 0), 4.0);
        assert_eq!(p.flipped(Flip::Vertical).get(0, 0, 0), 10.0);
    }

    #[test]
    fn identity_resize_is_exact() {
        let p = ramp(7, 5);
        assert_eq!(p.resize_bilinear(7, 5), p);
        assert_eq!(p.resize_nearest(7, 5), p);
    }

    #[test]
    fn bilinear_upscale_of_two_pixels() {
        let p = Planes::from_vec(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let r = p.resize_bilinear(4, 1);
        assert_eq!(r.data, vec![0.0, 0.25, 0.75, 1.0]);
    }
}
