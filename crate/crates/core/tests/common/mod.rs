#![allow(dead_code)]

use hsr_core::arch::HsrConfig;
use hsr_core::imaging::{bicubic_resize, Image, Plane};
use hsr_core::metrics::{SSIM_SIGMA, SSIM_WINDOW};
use hsr_core::metrics::psnr;
use hsr_core::trainer::{Dataset, TrainConfig, Trainer};
use nalgebra::DMatrix;
use rand::Rng;

/// 64x64 RGB fixture with hard edges: a checkerboard, a disc and stripes.
pub fn toy_image() -> Image {
    Image::from_fn(64, 64, |y, x, c| {
        let (fy, fx) = (y as f64, x as f64);
        let disc = (fy - 40.0).powi(2) + (fx - 22.0).powi(2) < 144.0;
        let checker = (y / 8 + x / 8) % 2 == 0;
        let stripe = (x + y) / 6 % 2 == 0;
        let v = match c {
            0 => if disc { 0.9 } else if checker { 0.7 } else { 0.2 },
            1 => if stripe { 0.8 } else { 0.3 },
            _ => if disc { 0.1 } else if checker { 0.25 } else { 0.75 },
        };
        (v * 255.0_f64).round() / 255.0
    })
    .unwrap()
}

/// Smooth fixture (low-frequency sinusoids).
pub fn smooth_image(h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |y, x, c| {
        let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
        0.5 + 0.3 * (std::f64::consts::PI * (fy + 0.7 * fx + 0.3 * c as f64)).sin()
    })
    .unwrap()
}

pub fn toy_config(steps: u64) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        steps: Some(steps),
        batch_size: 1,
        patch_size: 32,
        seed: 11,
        model: HsrConfig::tiny(2),
        ..TrainConfig::default()
    }
}

pub struct OverfitResult {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub sr_psnr: f64,
    pub bicubic_psnr: f64,
}

/// Overfit the tiny network on `toy_image` at x2 for `steps` steps.
pub fn overfit(steps: u64) -> OverfitResult {
    let hr = toy_image();
    let data = Dataset::from_images(vec![("toy".into(), hr.clone())], 2).unwrap();
    let lr = data.pairs[0].lr.clone();
    let mut t = Trainer::new(toy_config(steps), data).unwrap();
    let mut losses = Vec::new();
    for _ in 0..steps {
        losses.push(t.step().unwrap());
    }
    let sr = t.net().super_resolve(&lr).unwrap();
    let bic = bicubic_resize(&lr, 2, 1, true).unwrap();
    let final_loss = hsr_core::tensor::kernels::l1_loss(&sr.to_tensor(), &hr.to_tensor()).unwrap();
    OverfitResult {
        initial_loss: losses[0],
        final_loss,
        sr_psnr: psnr(&sr, &hr, 0, false).unwrap().db().unwrap(),
        bicubic_psnr: psnr(&bic, &hr, 0, false).unwrap().db().unwrap(),
    }
}

pub fn rand_plane(h: usize, w: usize, rng: &mut impl Rng) -> Plane {
    Plane::from_fn(h, w, |_, _| rng.gen_range(-1.0..1.0))
}

/// Dense matrix of a linear map on `n`-vectors, column by column.
pub fn dense(n_in: usize, n_out: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n_out, n_in);
    for j in 0..n_in {
        let mut e = vec![0.0; n_in];
        e[j] = 1.0;
        let col = f(&e);
        for i in 0..n_out {
            m[(i, j)] = col[i];
        }
    }
    m
}

pub fn as_plane(h: usize, w: usize, v: &[f64]) -> Plane {
    Plane::new(h, w, v.to_vec()).unwrap()
}

pub fn hqs_fixture() -> Plane {
    // Smooth shading plus a few sharp edges.
    Plane::from_fn(32, 32, |y, x| {
        let (fy, fx) = (y as f64 / 31.0, x as f64 / 31.0);
        let mut v = 0.3 + 0.3 * (fx * 3.0).sin() * (fy * 2.0).cos();
        if (8..20).contains(&y) && (10..24).contains(&x) {
            v += 0.35;
        }
        if x + y > 40 {
            v -= 0.2;
        }
        v.clamp(0.0, 1.0)
    })
}

pub fn plane_psnr(a: &Plane, b: &Plane) -> f64 {
    let mse = a.data.iter().zip(&b.data).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.data.len() as f64;
    10.0 * (1.0 / mse).log10()
}

/// Per-window computation with an explicit 2-D Gaussian.
pub fn ssim_naive(a: &Plane, b: &Plane) -> f64 {
    let n = SSIM_WINDOW;
    let c = (n / 2) as f64;
    let mut w = vec![vec![0.0; n]; n];
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            w[i][j] = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            s += w[i][j];
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=a.height - n {
        for x in 0..=a.width - n {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    ma += w[i][j] / s * a.at(y + i, x + j);
                    mb += w[i][j] / s * b.at(y + i, x + j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let (p, q) = (a.at(y + i, x + j) - ma, b.at(y + i, x + j) - mb);
                    va += w[i][j] / s * p * p;
                    vb += w[i][j] / s * q * q;
                    cov += w[i][j] / s * p * q;
                }
            }
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Independent SSD oracle: the 5x5 patch is tile (3, 3) of the region.
pub fn lss_naive(l: &Plane, y: usize, x: usize) -> f64 {
    let (ry, rx) = (y - 17, x - 17);
    let mut best = 0.0f64;
    for ty in 0..8 {
        for tx in 0..8 {
            if (ty, tx) == (3, 3) {
                continue;
            }
            let mut ssd = 0.0;
            for dy in 0..5 {
                for dx in 0..5 {
                    let d = (l.at(y - 2 + dy, x - 2 + dx) - l.at(ry + 5 * ty + dy, rx + 5 * tx + dx)) / 100.0;
                    ssd += d * d;
                }
            }
            best = best.max((-(ssd / 25.0)).exp());
        }
    }
    best
}
