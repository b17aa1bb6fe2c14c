//! Central finite-difference checks for every differentiable tape operation.
//!
//! The numerical side only ever evaluates forward passes, so it is
//! independent of the backward code it checks. Each case reduces the
//! operation output to a scalar through a fixed random projection
//! `sum(out * R)`; a plain sum would hide permutation errors.
//!
//! Error measure per input tensor: `max|analytic - numeric| / max(max|analytic|, max|numeric|)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Shape, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.tolerance
    }
}

fn projected_loss(tape: &mut Tape, out: Var, projection: &Tensor) -> Result<Var> {
    let r = tape.constant(projection.clone());
    let weighted = tape.mul(out, r)?;
    Ok(tape.sum(weighted))
}

fn forward_loss<F>(build: &F, inputs: &[Tensor], projection: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = projected_loss(&mut tape, out, projection)?;
    Ok(tape.value(loss).item())
}

/// Maximum relative error between the tape gradient and central differences,
/// over all inputs of `build`.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], step: f64, rng: &mut impl Rng) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let projection = Tensor::uniform(tape.shape(out), -1.0, 1.0, rng);
    let loss = projected_loss(&mut tape, out, &projection)?;
    tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        let mut perturbed = inputs.to_vec();
        for (j, n) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = orig + step;
            let plus = forward_loss(&build, &perturbed, &projection)?;
            perturbed[i].data_mut()[j] = orig - step;
            let minus = forward_loss(&build, &perturbed, &projection)?;
            perturbed[i].data_mut()[j] = orig;
            *n = (plus - minus) / (2.0 * step);
        }
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = analytic
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(1e-12, f64::max);
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}

/// Values with every pair at least `gap` apart, in random order; keeps max
/// pooling away from ties.
fn distinct_values(shape: Shape, gap: f64, rng: &mut impl Rng) -> Tensor {
    let mut vals: Vec<f64> = (0..shape.numel())
        .map(|i| i as f64 * gap + rng.gen_range(0.0..gap * 0.25))
        .collect();
    vals.shuffle(rng);
    let n = vals.len() as f64 * gap;
    Tensor::new(shape, vals.into_iter().map(|v| v - n / 2.0).collect()).expect("sized")
}

/// Uniform values in `[-1, 1]` with `|x| >= margin`, avoiding the activation kink.
fn away_from_zero(shape: Shape, margin: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..shape.numel())
        .map(|_| {
            let mag = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("sized")
}

fn rand_t(rng: &mut impl Rng, b: usize, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::uniform(Shape::new(b, c, h, w), -1.0, 1.0, rng)
}

type Case = (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn suite_cases(op: &str, rng: &mut ChaCha8Rng) -> Case {
    match op {
        "conv2d" => {
            let cin = rng.gen_range(1..=3);
            let cout = rng.gen_range(1..=3);
            let k = [1, 3][rng.gen_range(0..2)];
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=k / 2 + 1);
            let h = rng.gen_range(4..=6);
            let w = rng.gen_range(4..=6);
            let batch = rng.gen_range(1..=2);
            let inputs = vec![
                rand_t(rng, batch, cin, h, w),
                rand_t(rng, cout, cin, k, k),
                rand_t(rng, 1, cout, 1, 1),
            ];
            (
                inputs,
                Box::new(move |t, v| t.conv2d(v[0], v[1], v[2], stride, pad)),
            )
        }
        "leaky_relu" => {
            let slope = rng.gen_range(0.01..0.5);
            (
                vec![away_from_zero(Shape::new(1, 2, 4, 5), 1e-3, rng)],
                Box::new(move |t, v| t.leaky_relu(v[0], slope)),
            )
        }
        "sigmoid" => (
            vec![Tensor::uniform(Shape::new(1, 2, 3, 4), -4.0, 4.0, rng)],
            Box::new(|t, v| Ok(t.sigmoid(v[0]))),
        ),
        "max_pool2d" => {
            let k = [2, 4][rng.gen_range(0..2)];
            (
                vec![distinct_values(Shape::new(1, 2, 2 * k, 2 * k), 0.01, rng)],
                Box::new(move |t, v| t.max_pool2d(v[0], k)),
            )
        }
        "bilinear_upsample" => {
            let f = [2, 4][rng.gen_range(0..2)];
            let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            (
                vec![rand_t(rng, 1, 2, h, w)],
                Box::new(move |t, v| t.bilinear_upsample(v[0], f)),
            )
        }
        "pixel_shuffle" => {
            let r = rng.gen_range(1..=3);
            (
                vec![rand_t(rng, 1, 2 * r * r, 2, 3)],
                Box::new(move |t, v| t.pixel_shuffle(v[0], r)),
            )
        }
        "concat_channels" => (
            vec![rand_t(rng, 2, 1, 3, 3), rand_t(rng, 2, 3, 3, 3), rand_t(rng, 2, 2, 3, 3)],
            Box::new(|t, v| t.concat_channels(v)),
        ),
        "split_channels" => {
            let parts = [1, 2, 4][rng.gen_range(0..3)];
            (
                vec![rand_t(rng, 1, 4, 3, 3)],
                Box::new(move |t, v| {
                    // Recombine in reverse order so each slice's gradient is distinct.
                    let mut pieces = t.split_channels(v[0], parts)?;
                    pieces.reverse();
                    t.concat_channels(&pieces)
                }),
            )
        }
        "narrow_channels" => {
            let start = rng.gen_range(0..4);
            let len = rng.gen_range(1..=5 - start);
            (
                vec![rand_t(rng, 2, 5, 3, 2)],
                Box::new(move |t, v| t.narrow_channels(v[0], start, len)),
            )
        }
        "scale" => {
            let factor = rng.gen_range(-2.0..2.0);
            (
                vec![rand_t(rng, 1, 2, 3, 3)],
                Box::new(move |t, v| Ok(t.scale(v[0], factor))),
            )
        }
        "sum" => (vec![rand_t(rng, 2, 2, 3, 3)], Box::new(|t, v| Ok(t.sum(v[0])))),
        "add" => (
            vec![rand_t(rng, 1, 2, 3, 3), rand_t(rng, 1, 2, 3, 3)],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        "mul" => (
            vec![rand_t(rng, 1, 2, 3, 3), rand_t(rng, 1, 2, 3, 3)],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        "l1_loss" => {
            let target = rand_t(rng, 1, 2, 3, 3);
            let offset = away_from_zero(target.shape(), 1e-3, rng);
            let pred: Vec<f64> = target.data().iter().zip(offset.data()).map(|(a, b)| a + b).collect();
            (
                vec![Tensor::new(target.shape(), pred).expect("sized"), target],
                Box::new(|t, v| t.l1_loss(v[0], v[1])),
            )
        }
        "conv_lrelu_chain" => {
            let inputs = vec![
                rand_t(rng, 1, 2, 5, 5),
                rand_t(rng, 3, 2, 3, 3),
                rand_t(rng, 1, 3, 1, 1),
            ];
            (
                inputs,
                Box::new(|t, v| {
                    let c = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                    let a = t.leaky_relu(c, 0.1)?;
                    let s = t.sigmoid(a);
                    t.mul(s, c)
                }),
            )
        }
        other => unreachable!("no gradient case for {other}"),
    }
}

pub const SUITE_OPS: &[&str] = &[
    "conv2d",
    "leaky_relu",
    "sigmoid",
    "max_pool2d",
    "bilinear_upsample",
    "pixel_shuffle",
    "concat_channels",
    "narrow_channels",
    "split_channels",
    "scale",
    "sum",
    "add",
    "mul",
    "l1_loss",
    "conv_lrelu_chain",
];

/// Runs `cases` random checks per operation, seeded.
pub fn run_suite(seed: u64, cases: usize) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SUITE_OPS
        .iter()
        .map(|&op| {
            let mut worst: f64 = 0.0;
            for _ in 0..cases {
                let (inputs, build) = suite_cases(op, &mut rng);
                let err = check_gradients(build, &inputs, DEFAULT_STEP, &mut rng)?;
                worst = worst.max(err);
            }
            Ok(GradCheckReport {
                op,
                cases,
                max_rel_error: worst,
                tolerance: DEFAULT_TOLERANCE,
            })
        })
        .collect()
}
