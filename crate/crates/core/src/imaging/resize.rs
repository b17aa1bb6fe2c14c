//! Separable bicubic resampling following the antialiased `imresize`
//! convention: cubic kernel with a = -0.5, half-pixel centers, kernel
//! support stretched by `1/scale` when shrinking, edge-clamped indices.

use crate::error::{Error, Result};

use super::{Image, Plane};

const A: f64 = -0.5;

pub fn cubic(x: f64) -> f64 {
    let t = x.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-sample taps along one axis.
#[derive(Clone, Debug)]
pub struct ResampleWeights {
    pub in_len: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl ResampleWeights {
    pub fn new(in_len: usize, out_len: usize, scale: f64, antialias: bool) -> Self {
        let shrink = antialias && scale < 1.0;
        let (width, stretch) = if shrink { (4.0 / scale, scale) } else { (4.0, 1.0) };
        let count = width.ceil() as usize + 2;
        let taps = (0..out_len)
            .map(|i| {
                let u = (i as f64 + 0.5) / scale - 0.5;
                let left = (u - width / 2.0).floor() as isize;
                let mut raw: Vec<(usize, f64)> = (0..count as isize)
                    .map(|j| {
                        let pos = left + j;
                        let w = stretch * cubic(stretch * (u - pos as f64));
                        (pos.clamp(0, in_len as isize - 1) as usize, w)
                    })
                    .filter(|&(_, w)| w != 0.0)
                    .collect();
                let total: f64 = raw.iter().map(|t| t.1).sum();
                raw.iter_mut().for_each(|t| t.1 /= total);
                debug_assert!((raw.iter().map(|t| t.1).sum::<f64>() - 1.0).abs() < 1e-12);
                raw
            })
            .collect();
        ResampleWeights { in_len, taps }
    }

    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    /// Resample every row (horizontal pass).
    pub fn apply_rows(&self, p: &Plane) -> Plane {
        Plane::from_fn(p.height, self.out_len(), |y, x| {
            let row = &p.data[y * p.width..(y + 1) * p.width];
            self.taps[x].iter().map(|&(i, w)| w * row[i]).sum()
        })
    }

    /// Resample every column (vertical pass).
    pub fn apply_cols(&self, p: &Plane) -> Plane {
        Plane::from_fn(self.out_len(), p.width, |y, x| {
            self.taps[y].iter().map(|&(i, w)| w * p.at(i, x)).sum()
        })
    }
}

fn check_target(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target {out_h}x{out_w} is empty"
        )));
    }
    Ok(())
}

fn resize_plane_scaled(p: &Plane, out_h: usize, out_w: usize, sy: f64, sx: f64, antialias: bool) -> Plane {
    let rows = ResampleWeights::new(p.width, out_w, sx, antialias);
    let cols = ResampleWeights::new(p.height, out_h, sy, antialias);
    cols.apply_cols(&rows.apply_rows(p)).clamped()
}

/// Resize a plane to exactly `out_h x out_w`, output clamped to `[0, 1]`.
pub fn resize_plane(p: &Plane, out_h: usize, out_w: usize, antialias: bool) -> Result<Plane> {
    check_target(out_h, out_w)?;
    let sy = out_h as f64 / p.height as f64;
    let sx = out_w as f64 / p.width as f64;
    Ok(resize_plane_scaled(p, out_h, out_w, sy, sx, antialias))
}

pub fn resize_to(img: &Image, out_h: usize, out_w: usize, antialias: bool) -> Result<Image> {
    check_target(out_h, out_w)?;
    let planes = [0, 1, 2].map(|c| {
        let sy = out_h as f64 / img.height() as f64;
        let sx = out_w as f64 / img.width() as f64;
        resize_plane_scaled(&img.channel(c), out_h, out_w, sy, sx, antialias)
    });
    Image::from_planes(&planes)
}

/// Resize by the rational factor `num/den`; output size is `ceil(dim * num / den)`.
pub fn bicubic_resize(img: &Image, num: usize, den: usize, antialias: bool) -> Result<Image> {
    if num == 0 || den == 0 {
        return Err(Error::InvalidArgument(format!("scale {num}/{den} is not positive")));
    }
    let out_h = (img.height() * num).div_ceil(den);
    let out_w = (img.width() * num).div_ceil(den);
    check_target(out_h, out_w)?;
    let scale = num as f64 / den as f64;
    let planes = [0, 1, 2].map(|c| resize_plane_scaled(&img.channel(c), out_h, out_w, scale, scale, antialias));
    Image::from_planes(&planes)
}
