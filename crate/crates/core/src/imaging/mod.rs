//! RGB images in `[0, 1]`, single-channel planes, file I/O, bicubic
//! resampling and color conversions.

mod color;
mod io;
mod resize;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub use color::{rgb_to_lab, rgb_to_y, srgb_to_linear, Lab};
pub use io::{load, save, write_gray_png};
pub use resize::{bicubic_resize, cubic, resize_plane, resize_to, ResampleWeights};

/// Single-channel real-valued map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} plane",
                data.len()
            )));
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Plane {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Plane {
            height,
            width,
            data,
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Plane> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Plane::from_fn(height, width, |y, x| self.at(top + y, left + x)))
    }

    pub fn clamped(mut self) -> Plane {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }
}

/// RGB picture with channel values in `[0, 1]`, interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    /// Values are clamped into `[0, 1]`; non-finite values become 0.
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image dimensions must be >= 1, got {height}x{width}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} RGB image",
                pixels.len()
            )));
        }
        let pixels = pixels
            .into_iter()
            .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels.push(f(y, x, c));
                }
            }
        }
        Image::new(height, width, pixels)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Image::from_fn(height, width, |_, _, c| rgb[c])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn channel(&self, c: usize) -> Plane {
        Plane::from_fn(self.height, self.width, |y, x| self.at(y, x, c))
    }

    pub fn from_planes(planes: &[Plane; 3]) -> Result<Self> {
        let (h, w) = (planes[0].height, planes[0].width);
        if planes.iter().any(|p| p.height != h || p.width != w) {
            return Err(Error::Shape("channel planes differ in size".into()));
        }
        Image::from_fn(h, w, |y, x, c| planes[c].at(y, x))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Image::from_fn(height, width, |y, x, c| self.at(top + y, left + x, c))
    }

    /// Remove `n` pixels from every border.
    pub fn shave(&self, n: usize) -> Result<Image> {
        if 2 * n >= self.height || 2 * n >= self.width {
            return Err(Error::Shape(format!(
                "cannot shave {n} pixels from a {}x{} image",
                self.height, self.width
            )));
        }
        self.crop(n, n, self.height - 2 * n, self.width - 2 * n)
    }

    /// Centered crop to the largest size divisible by `s`.
    pub fn crop_to_multiple(&self, s: usize) -> Result<Image> {
        let h = self.height - self.height % s;
        let w = self.width - self.width % s;
        self.crop((self.height - h) / 2, (self.width - w) / 2, h, w)
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(Shape::new(1, 3, self.height, self.width), |_, c, y, x| {
            self.at(y, x, c)
        })
    }

    /// Batch item `b` of a 3-channel tensor, clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor, b: usize) -> Result<Image> {
        let s = t.shape();
        if s.channels != 3 || b >= s.batch {
            return Err(Error::Shape(format!("expected a 3-channel tensor, got {s}")));
        }
        Image::from_fn(s.height, s.width, |y, x, c| t.at(b, c, y, x))
    }

    /// Quantize to 8 bits per channel.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Image> {
        Image::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
