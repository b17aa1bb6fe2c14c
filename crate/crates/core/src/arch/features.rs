//! Intermediate feature capture for visualization.

use crate::error::{Error, Result};
use crate::imaging::Plane;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Output of the entry convolution.
    LrFeature,
    /// Output of the learned transposition.
    Transposed,
    SolverInput,
    DenoiserInput,
    DenoiserOutput,
    /// Per-branch output inside an exploration block.
    HebBranch,
    /// Per-level output inside an attention block.
    MsaLevel,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::LrFeature,
        Stage::Transposed,
        Stage::SolverInput,
        Stage::DenoiserInput,
        Stage::DenoiserOutput,
        Stage::HebBranch,
        Stage::MsaLevel,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Stage::LrFeature => "lr_feature",
            Stage::Transposed => "transposed",
            Stage::SolverInput => "solver_input",
            Stage::DenoiserInput => "denoiser_input",
            Stage::DenoiserOutput => "denoiser_output",
            Stage::HebBranch => "heb_branch",
            Stage::MsaLevel => "msa_level",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|s| s.tag() == tag)
            .ok_or_else(|| Error::UnknownStage {
                tag: tag.to_string(),
                valid: Stage::ALL.iter().map(|s| s.tag().to_string()).collect(),
            })
    }
}

#[derive(Clone, Debug)]
struct Entry {
    stage: Stage,
    iter: usize,
    index: usize,
    value: Tensor,
}

/// Tensors captured during one forward pass (first batch item only).
#[derive(Clone, Debug, Default)]
pub struct FeatureTrace {
    entries: Vec<Entry>,
}

impl FeatureTrace {
    pub(crate) fn push(&mut self, stage: Stage, iter: usize, index: usize, value: Tensor) {
        self.entries.push(Entry { stage, iter, index, value });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(iter, index, tensor)` for every capture of `stage`, in capture order.
    pub fn get(&self, stage: Stage) -> impl Iterator<Item = (usize, usize, &Tensor)> {
        self.entries
            .iter()
            .filter(move |e| e.stage == stage)
            .map(|e| (e.iter, e.index, &e.value))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `<stage>_<iter>_<index>`
    pub name: String,
    pub plane: Plane,
}

/// Collapse a `(1, C, H, W)` tensor over channels with `reduce`, then
/// min-max normalize to [0, 1]. A constant map becomes all zeros.
fn collapse(t: &Tensor, mean: bool) -> Plane {
    let s = t.shape();
    let mut plane = Plane::from_fn(s.height, s.width, |y, x| {
        let vals = (0..s.channels).map(|c| t.at(0, c, y, x));
        if mean {
            vals.sum::<f64>() / s.channels as f64
        } else {
            vals.fold(f64::NEG_INFINITY, f64::max)
        }
    });
    let (lo, hi) = plane
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    for v in plane.data.iter_mut() {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
    plane
}

/// Grayscale maps for one stage: channel maximum, except the LR feature
/// stage, which shows the channel mean.
pub fn dump_features(trace: &FeatureTrace, tag: &str) -> Result<Vec<FeatureMap>> {
    let stage = Stage::from_tag(tag)?;
    Ok(trace
        .get(stage)
        .map(|(iter, index, t)| FeatureMap {
            name: format!("{}_{iter}_{index}", stage.tag()),
            plane: collapse(t, stage == Stage::LrFeature),
        })
        .collect())
}
