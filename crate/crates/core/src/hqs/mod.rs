//! Classical half-quadratic splitting for `min_x 1/2 ||y - H x||^2 + phi(x)`
//! with a quadratic smoothness prior `phi(x) = lambda/2 ||grad x||^2`.
//!
//! Both subproblems are linear and solved with conjugate gradient, so every
//! step is exact up to the CG tolerance.

mod operator;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::imaging::{resize_plane, Image, Plane};

pub use operator::DegradationOperator;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgSettings {
    /// Relative residual `||A x - b|| / ||b||` to reach.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for CgSettings {
    fn default() -> Self {
        CgSettings {
            tolerance: 1e-8,
            max_iterations: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HqsConfig {
    pub beta0: f64,
    pub beta_growth: f64,
    pub iterations: usize,
    pub lambda: f64,
    pub cg: CgSettings,
}

impl Default for HqsConfig {
    fn default() -> Self {
        HqsConfig {
            beta0: 0.01,
            beta_growth: 4.0,
            iterations: 8,
            lambda: 1e-4,
            cg: CgSettings::default(),
        }
    }
}

impl HqsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta0 > 0.0 && self.beta0.is_finite()) {
            return Err(Error::Config(format!("beta0 must be positive, got {}", self.beta0)));
        }
        if !(self.beta_growth > 1.0 && self.beta_growth.is_finite()) {
            return Err(Error::Config(format!("beta_growth must exceed 1, got {}", self.beta_growth)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.cg.tolerance > 0.0) || self.cg.max_iterations == 0 {
            return Err(Error::Config("CG tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }

    /// `beta_k = beta0 * growth^k` for `k = 0..iterations`.
    pub fn betas(&self) -> Vec<f64> {
        (0..self.iterations)
            .map(|k| self.beta0 * self.beta_growth.powi(k as i32))
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradient for a symmetric positive definite operator.
/// Returns the solution and the number of iterations used.
pub fn conjugate_gradient(
    op: impl Fn(&[f64]) -> Vec<f64>,
    rhs: &[f64],
    x0: &[f64],
    cg: &CgSettings,
) -> Result<(Vec<f64>, usize)> {
    let b_norm = dot(rhs, rhs).sqrt();
    if b_norm == 0.0 {
        return Ok((vec![0.0; rhs.len()], 0));
    }
    let mut x = x0.to_vec();
    let ax = op(&x);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for it in 0..=cg.max_iterations {
        if rr.sqrt() <= cg.tolerance * b_norm {
            return Ok((x, it));
        }
        if it == cg.max_iterations {
            break;
        }
        let ap = op(&p);
        let alpha = rr / dot(&p, &ap);
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Err(Error::NotConverged {
        iterations: cg.max_iterations,
        residual: rr.sqrt() / b_norm,
    })
}

/// Circular forward differences `(d/dx, d/dy)`.
pub fn gradient(x: &Plane) -> (Plane, Plane) {
    let (h, w) = (x.height, x.width);
    let gx = Plane::from_fn(h, w, |i, j| x.at(i, (j + 1) % w) - x.at(i, j));
    let gy = Plane::from_fn(h, w, |i, j| x.at((i + 1) % h, j) - x.at(i, j));
    (gx, gy)
}

/// Adjoint of [`gradient`].
pub fn gradient_adjoint(gx: &Plane, gy: &Plane) -> Plane {
    let (h, w) = (gx.height, gx.width);
    Plane::from_fn(h, w, |i, j| {
        gx.at(i, (j + w - 1) % w) - gx.at(i, j) + gy.at((i + h - 1) % h, j) - gy.at(i, j)
    })
}

fn laplacian(x: &Plane) -> Plane {
    let (gx, gy) = gradient(x);
    gradient_adjoint(&gx, &gy)
}

fn sq_norm(p: &Plane) -> f64 {
    dot(&p.data, &p.data)
}

/// `1/2 ||y - H x||^2 + lambda/2 ||grad x||^2`.
pub fn objective(x: &Plane, i_lr: &Plane, op: &DegradationOperator, lambda: f64) -> Result<f64> {
    let hx = op.apply(x)?;
    if (hx.height, hx.width) != (i_lr.height, i_lr.width) {
        return Err(Error::Shape(format!(
            "estimate degrades to {}x{}, observation is {}x{}",
            hx.height, hx.width, i_lr.height, i_lr.width
        )));
    }
    let data: f64 = hx.data.iter().zip(&i_lr.data).map(|(a, b)| (b - a) * (b - a)).sum();
    let (gx, gy) = gradient(x);
    Ok(0.5 * data + 0.5 * lambda * (sq_norm(&gx) + sq_norm(&gy)))
}

fn check_positive(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

/// Minimizer of `1/2 ||y - H x||^2 + beta/2 ||x - u||^2`, i.e. the solution
/// of `(H^T H + beta I) x = H^T y + beta u`, started from `u`.
pub fn ls_solve(i_lr: &Plane, u: &Plane, beta: f64, op: &DegradationOperator, cg: &CgSettings) -> Result<Plane> {
    check_positive(beta)?;
    let s = op.scale();
    if (u.height, u.width) != (i_lr.height * s, i_lr.width * s) {
        return Err(Error::Shape(format!(
            "estimate is {}x{}, expected {}x{}",
            u.height,
            u.width,
            i_lr.height * s,
            i_lr.width * s
        )));
    }
    let hty = op.adjoint(i_lr)?;
    let rhs: Vec<f64> = hty.data.iter().zip(&u.data).map(|(a, b)| a + beta * b).collect();
    let (h, w) = (u.height, u.width);
    let normal = |v: &[f64]| {
        let p = Plane { height: h, width: w, data: v.to_vec() };
        let hthv = op.adjoint(&op.apply(&p).expect("shape checked")).expect("shape checked");
        hthv.data.iter().zip(v).map(|(a, b)| a + beta * b).collect()
    };
    let (x, _) = conjugate_gradient(normal, &rhs, &u.data, cg)?;
    Plane::new(h, w, x)
}

/// Minimizer of `beta/2 ||x - u||^2 + lambda/2 ||grad u||^2`, i.e. the
/// solution of `(beta I + lambda grad^T grad) u = beta x`.
pub fn denoise_prox(x: &Plane, beta: f64, lambda: f64, cg: &CgSettings) -> Result<Plane> {
    check_positive(beta)?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(x.clone());
    }
    let (h, w) = (x.height, x.width);
    let rhs: Vec<f64> = x.data.iter().map(|v| beta * v).collect();
    let system = |v: &[f64]| {
        let p = Plane { height: h, width: w, data: v.to_vec() };
        let l = laplacian(&p);
        l.data.iter().zip(v).map(|(a, b)| lambda * a + beta * b).collect()
    };
    let (u, _) = conjugate_gradient(system, &rhs, &x.data, cg)?;
    Plane::new(h, w, u)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HalfStep {
    Init,
    LeastSquares,
    Prior,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEntry {
    pub step: usize,
    pub kind: HalfStep,
    pub beta: f64,
    /// Objective of the estimate produced by this half-step.
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HqsResult {
    pub estimate: Plane,
    pub history: Vec<HistoryEntry>,
}

/// Run HQS from the bicubic upscale of `i_lr` with the configured schedule.
pub fn hqs_run(i_lr: &Plane, op: &DegradationOperator, cfg: &HqsConfig) -> Result<HqsResult> {
    cfg.validate()?;
    hqs_run_with_betas(i_lr, op, &cfg.betas(), cfg.lambda, &cfg.cg)
}

/// HQS with an explicit penalty sequence (one round per entry).
pub fn hqs_run_with_betas(
    i_lr: &Plane,
    op: &DegradationOperator,
    betas: &[f64],
    lambda: f64,
    cg: &CgSettings,
) -> Result<HqsResult> {
    let s = op.scale();
    let x0 = resize_plane(i_lr, i_lr.height * s, i_lr.width * s, true)?;
    let mut history = vec![HistoryEntry {
        step: 0,
        kind: HalfStep::Init,
        beta: 0.0,
        objective: objective(&x0, i_lr, op, lambda)?,
    }];
    let mut u = x0.clone();
    let mut x = x0;
    for &beta in betas {
        x = ls_solve(i_lr, &u, beta, op, cg)?;
        history.push(HistoryEntry {
            step: history.len(),
            kind: HalfStep::LeastSquares,
            beta,
            objective: objective(&x, i_lr, op, lambda)?,
        });
        u = denoise_prox(&x, beta, lambda, cg)?;
        history.push(HistoryEntry {
            step: history.len(),
            kind: HalfStep::Prior,
            beta,
            objective: objective(&u, i_lr, op, lambda)?,
        });
    }
    Ok(HqsResult { estimate: x, history })
}

/// Per-channel HQS on an RGB image; histories are summed over channels.
pub fn hqs_run_image(i_lr: &Image, op: &DegradationOperator, cfg: &HqsConfig) -> Result<(Image, Vec<HistoryEntry>)> {
    let mut planes = Vec::with_capacity(3);
    let mut history: Vec<HistoryEntry> = Vec::new();
    for c in 0..3 {
        let r = hqs_run(&i_lr.channel(c), op, cfg)?;
        if history.is_empty() {
            history = r.history;
        } else {
            for (h, e) in history.iter_mut().zip(&r.history) {
                h.objective += e.objective;
            }
        }
        planes.push(r.estimate);
    }
    let planes: [Plane; 3] = planes.try_into().expect("three channels");
    Ok((Image::from_planes(&planes)?, history))
}

/// CSV with header `step,beta,objective`.
pub fn history_csv(history: &[HistoryEntry]) -> String {
    let mut out = String::from("step,beta,objective\n");
    for e in history {
        let _ = writeln!(out, "{},{},{}", e.step, e.beta, e.objective);
    }
    out
}

pub fn write_history(history: &[HistoryEntry], path: &Path) -> Result<()> {
    atomic_write(path, history_csv(history).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cg_solves_diagonal_system() {
        let d = [1.0, 2.0, 4.0];
        let (x, _) = conjugate_gradient(
            |v| v.iter().zip(&d).map(|(a, b)| a * b).collect(),
            &[1.0, 1.0, 1.0],
            &[0.0; 3],
            &CgSettings::default(),
        )
        .unwrap();
        for (xi, di) in x.iter().zip(d) {
            assert!((xi - 1.0 / di).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_reports_non_convergence() {
        let cg = CgSettings { tolerance: 1e-14, max_iterations: 1 };
        let err = conjugate_gradient(
            |v| vec![v[0] + v[1], v[0] + 3.0 * v[1]],
            &[1.0, 0.0],
            &[0.0, 0.0],
            &cg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotConverged { iterations: 1, .. }));
        assert!(err.is_numeric());
    }

    #[test]
    fn beta_schedule_increases() {
        let b = HqsConfig::default().betas();
        assert_eq!(b.len(), 8);
        assert!(b.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(b[0], 0.01);
    }

    #[test]
    fn config_validation() {
        assert!(HqsConfig { beta_growth: 1.0, ..HqsConfig::default() }.validate().is_err());
        assert!(HqsConfig { beta0: 0.0, ..HqsConfig::default() }.validate().is_err());
        assert!(HqsConfig { lambda: -1.0, ..HqsConfig::default() }.validate().is_err());
    }

    #[test]
    fn history_csv_format() {
        let h = [HistoryEntry { step: 0, kind: HalfStep::Init, beta: 0.0, objective: 1.5 }];
        assert_eq!(history_csv(&h), "step,beta,objective\n0,0,1.5\n");
    }
}
