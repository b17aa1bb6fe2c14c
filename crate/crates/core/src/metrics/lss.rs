use crate::error::{Error, Result};
use crate::imaging::{rgb_to_lab, Image, Plane};

/// Geometry of the local self-similarity descriptor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LssParams {
    /// Side of the central patch and of every comparison tile.
    pub patch: usize,
    /// Side of the surrounding region, tiled without overlap.
    pub region: usize,
    /// Divisor bringing L into `[0, 1]` before the squared differences.
    pub l_scale: f64,
}

impl Default for LssParams {
    fn default() -> Self {
        LssParams {
            patch: 5,
            region: 40,
            l_scale: 100.0,
        }
    }
}

impl LssParams {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.patch % 2 == 0 {
            return Err(Error::InvalidArgument(format!("patch size must be odd, got {}", self.patch)));
        }
        if self.region % self.patch != 0 || self.region / self.patch < 2 {
            return Err(Error::InvalidArgument(format!(
                "region {} must be a multiple (>= 2) of the patch size {}",
                self.region, self.patch
            )));
        }
        if !(self.l_scale > 0.0) {
            return Err(Error::InvalidArgument("l_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn tiles_per_side(&self) -> usize {
        self.region / self.patch
    }

    /// Offset from the region origin to the centre pixel: the central patch
    /// coincides with tile `(t, t)`, `t = (tiles - 1) / 2`.
    pub fn centre_offset(&self) -> usize {
        (self.tiles_per_side() - 1) / 2 * self.patch + self.patch / 2
    }
}

fn overlaps(a0: usize, b0: usize, len: usize) -> bool {
    a0 < b0 + len && b0 < a0 + len
}

/// LSS at pixel `(y, x)` of an L map (`[0, 100]`): the maximum of
/// `exp(-SSD)` between the centred patch and every region tile that does
/// not overlap it, SSD being the mean squared difference of `L / l_scale`.
pub fn lss_at(l: &Plane, y: usize, x: usize, params: &LssParams) -> Result<f64> {
    params.validate()?;
    let off = params.centre_offset();
    let (p, r) = (params.patch, params.region);
    if y < off || x < off || y - off + r > l.height || x - off + r > l.width {
        return Err(Error::InvalidArgument(format!(
            "{r}x{r} region around ({y}, {x}) leaves the {}x{} image",
            l.height, l.width
        )));
    }
    let (ry, rx) = (y - off, x - off);
    let (py, px) = (y - p / 2, x - p / 2);
    let count = (p * p) as f64;
    let mut best = f64::INFINITY;
    for ty in 0..params.tiles_per_side() {
        for tx in 0..params.tiles_per_side() {
            let (oy, ox) = (ry + ty * p, rx + tx * p);
            if overlaps(oy, py, p) && overlaps(ox, px, p) {
                continue;
            }
            let mut ssd = 0.0;
            for dy in 0..p {
                for dx in 0..p {
                    let d = (l.at(py + dy, px + dx) - l.at(oy + dy, ox + dx)) / params.l_scale;
                    ssd += d * d;
                }
            }
            best = best.min(ssd / count);
        }
    }
    assert!(best.is_finite(), "exclusion left no tiles");
    Ok((-best).exp())
}

/// Mean LSS over the non-overlapping `region`-sized blocks of an L map
/// (the remainder is dropped), each evaluated at its centre pixel.
pub fn lss_plane(l: &Plane, params: &LssParams) -> Result<f64> {
    params.validate()?;
    let r = params.region;
    if l.height < r || l.width < r {
        return Err(Error::InvalidArgument(format!(
            "LSS needs at least {r}x{r} pixels, got {}x{}",
            l.height, l.width
        )));
    }
    let off = params.centre_offset();
    let (by, bx) = (l.height / r, l.width / r);
    let mut total = 0.0;
    for i in 0..by {
        for j in 0..bx {
            total += lss_at(l, i * r + off, j * r + off, params)?;
        }
    }
    Ok(total / (by * bx) as f64)
}

/// Image-level LSS on the CIELAB lightness channel.
pub fn lss_image(img: &Image, params: &LssParams) -> Result<f64> {
    lss_plane(&rgb_to_lab(img).l, params)
}
