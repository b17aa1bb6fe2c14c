//! Fidelity metrics (PSNR, SSIM), the local self-similarity descriptor, and
//! correlation statistics.

mod corr;
mod lss;

use std::fmt;

use crate::error::{Error, Result};
use crate::imaging::{rgb_to_y, Image, Plane};

pub use corr::{plcc, srcc};
pub use lss::{lss_at, lss_image, lss_plane, LssParams};

/// PSNR in dB, or a marker for a zero-error comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Db(f64),
    Identical,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Identical => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.4}"),
            Psnr::Identical => f.write_str("identical"),
        }
    }
}

fn check_same_size(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Planes compared by the metrics: luma alone, or the three RGB channels.
fn planes(img: &Image, y_only: bool) -> Vec<Plane> {
    if y_only {
        vec![rgb_to_y(img)]
    } else {
        (0..3).map(|c| img.channel(c)).collect()
    }
}

/// `10 log10(1 / MSE)` after removing `crop` pixels from every border.
pub fn psnr(a: &Image, b: &Image, crop: usize, y_only: bool) -> Result<Psnr> {
    check_same_size(a, b)?;
    let (a, b) = if crop > 0 { (a.shave(crop)?, b.shave(crop)?) } else { (a.clone(), b.clone()) };
    let (pa, pb) = (planes(&a, y_only), planes(&b, y_only));
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, q) in pa.iter().zip(&pb) {
        sum += p.data.iter().zip(&q.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        n += p.data.len();
    }
    let mse = sum / n as f64;
    Ok(if mse == 0.0 {
        Psnr::Identical
    } else {
        Psnr::Db(10.0 * (1.0 / mse).log10())
    })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Normalized 1-D Gaussian of length 11, sigma 1.5.
pub fn ssim_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-mode separable filtering with the SSIM window.
fn filter_valid(p: &Plane, w: &[f64; SSIM_WINDOW]) -> Plane {
    let n = SSIM_WINDOW;
    let rows = Plane::from_fn(p.height, p.width + 1 - n, |y, x| {
        (0..n).map(|k| w[k] * p.at(y, x + k)).sum()
    });
    Plane::from_fn(p.height + 1 - n, rows.width, |y, x| {
        (0..n).map(|k| w[k] * rows.at(y + k, x)).sum()
    })
}

fn map2(a: &Plane, b: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
    Plane {
        height: a.height,
        width: a.width,
        data: a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
    }
}

/// Mean SSIM between two single-channel maps with dynamic range 1.
pub fn ssim_plane(a: &Plane, b: &Plane) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape("SSIM inputs differ in size".into()));
    }
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.height, a.width
        )));
    }
    let w = ssim_window();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mu_a = filter_valid(a, &w);
    let mu_b = filter_valid(b, &w);
    let aa = filter_valid(&map2(a, a, |x, y| x * y), &w);
    let bb = filter_valid(&map2(b, b, |x, y| x * y), &w);
    let ab = filter_valid(&map2(a, b, |x, y| x * y), &w);
    let n = mu_a.data.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = aa.data[i] - ma * ma;
        let vb = bb.data[i] - mb * mb;
        let cov = ab.data[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

/// SSIM on luma, or the mean over RGB channels.
pub fn ssim(a: &Image, b: &Image, y_only: bool) -> Result<f64> {
    check_same_size(a, b)?;
    let (pa, pb) = (planes(a, y_only), planes(b, y_only));
    let mut total = 0.0;
    for (p, q) in pa.iter().zip(&pb) {
        total += ssim_plane(p, q)?;
    }
    Ok(total / pa.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: Psnr,
    pub ssim: f64,
    pub lss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn push(&mut self, row: EvalRow) {
        self.rows.push(row);
    }

    /// Mean PSNR over non-identical rows; `Identical` when every row is.
    pub fn mean_psnr(&self) -> Option<Psnr> {
        if self.rows.is_empty() {
            return None;
        }
        let finite: Vec<f64> = self.rows.iter().filter_map(|r| r.psnr.db()).collect();
        if finite.is_empty() {
            return Some(Psnr::Identical);
        }
        Some(Psnr::Db(finite.iter().sum::<f64>() / finite.len() as f64))
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        if self.rows.is_empty() {
            return None;
        }
        Some(self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len() as f64)
    }

    pub fn mean_lss(&self) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter_map(|r| r.lss).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// PLCC and SRCC between PSNR and LSS over rows that have both.
    pub fn psnr_lss_correlation(&self) -> Result<(f64, f64)> {
        let (p, l): (Vec<f64>, Vec<f64>) = self
            .rows
            .iter()
            .filter_map(|r| Some((r.psnr.db()?, r.lss?)))
            .unzip();
        Ok((plcc(&p, &l)?, srcc(&p, &l)?))
    }

    /// `name,psnr,ssim,lss`; missing LSS is left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,psnr,ssim,lss\n");
        for r in &self.rows {
            let lss = r.lss.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!("{},{},{:.6},{}\n", r.name, r.psnr, r.ssim, lss));
        }
        out
    }
}
