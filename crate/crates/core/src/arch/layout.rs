//! Parameter registry: every convolution of the network, named and sized as a
//! pure function of the configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamStore, Shape, Tensor};

use super::{HsrConfig, HEB_BRANCHES, MSA_LEVELS};

/// Spatial convolutions (entry, transposition, solver, exploration, tail,
/// upscale, and the exploration-block output fusion).
pub(crate) const KERNEL: usize = 3;
/// Channel-mixing convolutions: branch combination inside the exploration
/// block and the attention entry/fusion.
pub(crate) const MIX_KERNEL: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvSpec {
    fn new(name: String, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            name,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel, self.kernel)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

pub(crate) fn solver_prefix(cfg: &HsrConfig, iter: usize) -> String {
    if cfg.share_iter_weights {
        "solver".to_string()
    } else {
        format!("solver.iter{iter}")
    }
}

pub(crate) fn denoiser_prefix(cfg: &HsrConfig, iter: usize) -> String {
    if cfg.share_iter_weights {
        "denoiser".to_string()
    } else {
        format!("denoiser.iter{iter}")
    }
}

fn msa_specs(prefix: &str, c: usize, q: usize, out: &mut Vec<ConvSpec>) {
    out.push(ConvSpec::new(format!("{prefix}.msa.entry"), c, MSA_LEVELS * q, MIX_KERNEL));
    for level in 1..=MSA_LEVELS {
        out.push(ConvSpec::new(format!("{prefix}.msa.level{level}"), q, q, KERNEL));
    }
    out.push(ConvSpec::new(format!("{prefix}.msa.fuse"), MSA_LEVELS * q, c, MIX_KERNEL));
}

fn heb_specs(prefix: &str, c: usize, q: usize, out: &mut Vec<ConvSpec>) {
    out.push(ConvSpec::new(format!("{prefix}.heb.explore"), c, c, KERNEL));
    for branch in 2..=HEB_BRANCHES {
        for stage in 1..branch {
            out.push(ConvSpec::new(
                format!("{prefix}.heb.branch{branch}.stage{stage}"),
                q,
                q,
                KERNEL,
            ));
        }
        out.push(ConvSpec::new(format!("{prefix}.heb.combine{branch}"), 2 * q, q, MIX_KERNEL));
    }
    out.push(ConvSpec::new(format!("{prefix}.heb.fuse"), c, c, KERNEL));
}

/// Every convolution in registration order.
pub fn layout(cfg: &HsrConfig) -> Vec<ConvSpec> {
    let c = cfg.channels;
    let q = cfg.branch_channels();
    let copies = if cfg.share_iter_weights { 1 } else { cfg.iterations };
    let mut out = vec![
        ConvSpec::new("entry".into(), 3, c, KERNEL),
        ConvSpec::new("transposition.conv1".into(), c, c, KERNEL),
        ConvSpec::new("transposition.conv2".into(), c, c, KERNEL),
    ];
    for k in 0..copies {
        let p = solver_prefix(cfg, k);
        out.push(ConvSpec::new(format!("{p}.conv1"), 2 * c, c, KERNEL));
        out.push(ConvSpec::new(format!("{p}.conv2"), c, c, KERNEL));
        out.push(ConvSpec::new(format!("{p}.conv3"), c, c, KERNEL));
    }
    for k in 0..copies {
        let p = denoiser_prefix(cfg, k);
        for b in 0..cfg.n_blocks {
            let block = format!("{p}.block{b}");
            if cfg.msa_enabled {
                msa_specs(&block, c, q, &mut out);
            }
            heb_specs(&block, c, q, &mut out);
        }
        out.push(ConvSpec::new(format!("{p}.tail"), c, c, KERNEL));
    }
    out.push(ConvSpec::new("upscale.conv".into(), c, 3 * cfg.scale * cfg.scale, KERNEL));
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// `(module, count)` in network order.
    pub by_module: Vec<(String, usize)>,
}

fn module_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts[0] {
        "denoiser" => {
            if parts.contains(&"msa") {
                "denoiser.msa".into()
            } else if parts.contains(&"heb") {
                "denoiser.heb".into()
            } else {
                "denoiser.tail".into()
            }
        }
        other => other.into(),
    }
}

/// Exact number of scalar parameters, with a per-module breakdown.
pub fn param_count(cfg: &HsrConfig) -> ParamCount {
    let mut by_module: Vec<(String, usize)> = Vec::new();
    for spec in layout(cfg) {
        let m = module_of(&spec.name);
        match by_module.iter_mut().find(|(name, _)| *name == m) {
            Some(entry) => entry.1 += spec.num_params(),
            None => by_module.push((m, spec.num_params())),
        }
    }
    ParamCount {
        total: by_module.iter().map(|(_, n)| n).sum(),
        by_module,
    }
}

/// Seeded initialization: weights uniform in `+-sqrt(6 / ((1 + slope^2) * fan_in))`
/// (He-uniform for leaky ReLU), biases zero.
pub(crate) fn init_params(cfg: &HsrConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let gain = 1.0 + cfg.leaky_slope * cfg.leaky_slope;
    for spec in layout(cfg) {
        let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
        let bound = (6.0 / (gain * fan_in)).sqrt();
        store.insert(spec.weight_name(), Tensor::uniform(spec.weight_shape(), -bound, bound, &mut rng))?;
        store.insert(spec.bias_name(), Tensor::zeros(spec.bias_shape()))?;
    }
    Ok(store)
}
