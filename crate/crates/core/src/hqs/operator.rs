use crate::error::{Error, Result};
use crate::imaging::{cubic, Plane};

/// Blur followed by decimation, with circular boundary handling.
///
/// `apply` computes `y[i, j] = sum_{a, b} k[a, b] x[s i + a - o, s j + b - o]`
/// (indices modulo the HR size), where `o` is the kernel origin. `adjoint`
/// is its exact transpose.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationOperator {
    kernel: Plane,
    origin: usize,
    scale: usize,
}

impl DegradationOperator {
    /// `kernel` must be square and is normalized to sum to one.
    pub fn new(kernel: Plane, origin: usize, scale: usize) -> Result<Self> {
        if scale == 0 {
            return Err(Error::InvalidArgument("decimation factor must be >= 1".into()));
        }
        if kernel.height != kernel.width || kernel.height == 0 || origin >= kernel.height {
            return Err(Error::InvalidArgument(format!(
                "kernel must be square and non-empty with origin inside it ({}x{}, origin {origin})",
                kernel.height, kernel.width
            )));
        }
        let sum: f64 = kernel.data.iter().sum();
        if !sum.is_finite() || sum.abs() < 1e-12 {
            return Err(Error::InvalidArgument("kernel sum must be nonzero".into()));
        }
        let kernel = Plane {
            data: kernel.data.iter().map(|v| v / sum).collect(),
            ..kernel
        };
        Ok(DegradationOperator { kernel, origin, scale })
    }

    /// No blur; pure decimation.
    pub fn delta(scale: usize) -> Result<Self> {
        Self::new(Plane::filled(1, 1, 1.0), 0, scale)
    }

    /// Isotropic Gaussian blur truncated at `3 sigma`.
    pub fn gaussian(sigma: f64, scale: usize) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        let r = (3.0 * sigma).ceil() as usize;
        let taps: Vec<f64> = (0..=2 * r)
            .map(|i| {
                let d = i as f64 - r as f64;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        Self::separable(&taps, r, scale)
    }

    /// The antialiased bicubic downscaling kernel for factor `s`: the same
    /// weights the bicubic resizer uses away from the image border.
    pub fn bicubic(scale: usize) -> Result<Self> {
        if scale == 0 {
            return Err(Error::InvalidArgument("decimation factor must be >= 1".into()));
        }
        let s = scale as f64;
        let centre = (s - 1.0) / 2.0;
        let lo = (centre - 2.0 * s).floor() as i64;
        let hi = (centre + 2.0 * s).ceil() as i64;
        let taps: Vec<f64> = (lo..=hi).map(|t| cubic((t as f64 - centre) / s)).collect();
        // Trim zero taps at the ends so the kernel stays compact.
        let first = taps.iter().position(|w| *w != 0.0).unwrap_or(0);
        let last = taps.iter().rposition(|w| *w != 0.0).unwrap_or(0);
        let origin = (-lo) as usize - first;
        Self::separable(&taps[first..=last], origin, scale)
    }

    fn separable(taps: &[f64], origin: usize, scale: usize) -> Result<Self> {
        let n = taps.len();
        let k = Plane::from_fn(n, n, |a, b| taps[a] * taps[b]);
        Self::new(k, origin, scale)
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn kernel(&self) -> &Plane {
        &self.kernel
    }

    fn check_hr(&self, x: &Plane) -> Result<()> {
        if x.height % self.scale != 0 || x.width % self.scale != 0 || x.data.is_empty() {
            return Err(Error::Shape(format!(
                "{}x{} is not divisible by the decimation factor {}",
                x.height, x.width, self.scale
            )));
        }
        Ok(())
    }

    /// HR index touched by kernel tap `a` at LR index `i`, wrapped.
    fn wrap(&self, i: usize, a: usize, n: usize) -> usize {
        let pos = (self.scale * i + a) as isize - self.origin as isize;
        pos.rem_euclid(n as isize) as usize
    }

    /// `H x`.
    pub fn apply(&self, x: &Plane) -> Result<Plane> {
        self.check_hr(x)?;
        let (h, w) = (x.height / self.scale, x.width / self.scale);
        let n = self.kernel.height;
        Ok(Plane::from_fn(h, w, |i, j| {
            let mut acc = 0.0;
            for a in 0..n {
                let row = self.wrap(i, a, x.height) * x.width;
                for b in 0..n {
                    acc += self.kernel.data[a * n + b] * x.data[row + self.wrap(j, b, x.width)];
                }
            }
            acc
        }))
    }

    /// `H^T y` onto an HR grid of `scale` times the LR size.
    pub fn adjoint(&self, y: &Plane) -> Result<Plane> {
        if y.data.is_empty() {
            return Err(Error::Shape("empty LR plane".into()));
        }
        let (hh, hw) = (y.height * self.scale, y.width * self.scale);
        let n = self.kernel.height;
        let mut out = Plane::filled(hh, hw, 0.0);
        for i in 0..y.height {
            for j in 0..y.width {
                let v = y.at(i, j);
                for a in 0..n {
                    let row = self.wrap(i, a, hh) * hw;
                    for b in 0..n {
                        out.data[row + self.wrap(j, b, hw)] += self.kernel.data[a * n + b] * v;
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_are_normalized() {
        for op in [
            DegradationOperator::bicubic(2).unwrap(),
            DegradationOperator::bicubic(3).unwrap(),
            DegradationOperator::bicubic(4).unwrap(),
            DegradationOperator::gaussian(1.2, 2).unwrap(),
        ] {
            let s: f64 = op.kernel().data.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bicubic_kernel_is_centred() {
        // Factor 2: taps at offsets -3..=4 around the sample, centre 0.5.
        let op = DegradationOperator::bicubic(2).unwrap();
        assert_eq!(op.kernel().height, 8);
        assert_eq!(op.origin, 3);
        // Factor 1 degenerates to a delta.
        assert_eq!(DegradationOperator::bicubic(1).unwrap().kernel().data, [1.0]);
    }

    #[test]
    fn indivisible_shape_rejected() {
        let op = DegradationOperator::delta(2).unwrap();
        assert!(op.apply(&Plane::filled(5, 4, 0.0)).is_err());
    }
}
