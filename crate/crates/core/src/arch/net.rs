use crate::error::{CheckpointError, Error, Result};
use crate::imaging::Image;
use crate::tensor::{Bindings, ParamStore, Shape, Tape, Tensor, Var};

use super::features::{FeatureTrace, Stage};
use super::layout::{self, denoiser_prefix, solver_prefix, KERNEL, MIX_KERNEL};
use super::{check_scale, HsrConfig, MsaMode, HEB_BRANCHES, MSA_LEVELS, SPATIAL_MULTIPLE};

/// Network configuration plus its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct HsrNet {
    config: HsrConfig,
    weights: ParamStore,
}

impl HsrNet {
    /// Freshly initialized network.
    pub fn new(config: HsrConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = layout::init_params(&config, seed)?;
        Ok(HsrNet { config, weights })
    }

    /// Wrap existing weights, checking that they cover the layout exactly.
    pub fn from_parts(config: HsrConfig, weights: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = layout::layout(&config);
        if weights.len() != 2 * specs.len() {
            return Err(CheckpointError::ConfigMismatch(format!(
                "configuration needs {} parameter tensors, found {}",
                2 * specs.len(),
                weights.len()
            ))
            .into());
        }
        for spec in &specs {
            for (name, shape) in [
                (spec.weight_name(), spec.weight_shape()),
                (spec.bias_name(), spec.bias_shape()),
            ] {
                let p = weights
                    .get(&name)
                    .map_err(|_| CheckpointError::ConfigMismatch(format!("missing parameter `{name}`")))?;
                if p.value.shape() != shape {
                    return Err(CheckpointError::ShapeMismatch {
                        name,
                        expected: shape.to_string(),
                        found: p.value.shape().to_string(),
                    }
                    .into());
                }
            }
        }
        Ok(HsrNet { config, weights })
    }

    pub fn config(&self) -> &HsrConfig {
        &self.config
    }

    pub fn weights(&self) -> &ParamStore {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ParamStore {
        &mut self.weights
    }

    pub fn into_weights(self) -> ParamStore {
        self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.num_scalars()
    }

    /// Graph builder over weights already bound to `tape`.
    pub fn graph<'a>(&'a self, tape: &'a mut Tape, binds: &'a Bindings) -> Graph<'a> {
        Graph {
            tape,
            net: self,
            binds,
            trace: None,
            inference: false,
        }
    }

    /// Gradient-free forward pass of a `(B, 3, h, w)` batch. `h` and `w`
    /// must already be multiples of 4.
    pub fn forward_tensor(&self, lr: &Tensor, trace: Option<&mut FeatureTrace>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binds = self.weights.bind_constants(&mut tape);
        let input = tape.constant(lr.clone());
        let mut g = Graph {
            tape: &mut tape,
            net: self,
            binds: &binds,
            trace,
            inference: true,
        };
        let out = g.forward(input)?;
        Ok(tape.value(out).clone())
    }

    /// Upscale an image of any size >= 1x1: the input is reflect-padded to a
    /// multiple of 4 (and at least 8) and the result cropped back.
    pub fn super_resolve(&self, img: &Image) -> Result<Image> {
        self.super_resolve_inner(img, None)
    }

    pub fn super_resolve_traced(&self, img: &Image) -> Result<(Image, FeatureTrace)> {
        let mut trace = FeatureTrace::default();
        let out = self.super_resolve_inner(img, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn super_resolve_inner(&self, img: &Image, trace: Option<&mut FeatureTrace>) -> Result<Image> {
        let s = self.config.scale;
        let (h, w) = (img.height(), img.width());
        let padded = reflect_pad(&img.to_tensor(), padded_len(h), padded_len(w));
        let out = self.forward_tensor(&padded, trace)?;
        let sr = Tensor::from_fn(Shape::new(1, 3, s * h, s * w), |_, c, y, x| out.at(0, c, y, x));
        Image::from_tensor(&sr, 0)
    }
}

fn padded_len(n: usize) -> usize {
    n.max(8).div_ceil(SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE
}

/// Mirror index without edge repetition, periodic for any overshoot.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

/// Extend the bottom and right edges by reflection.
pub(crate) fn reflect_pad(t: &Tensor, height: usize, width: usize) -> Tensor {
    let s = t.shape();
    Tensor::from_fn(Shape::new(s.batch, s.channels, height, width), |b, c, y, x| {
        t.at(b, c, reflect_index(y, s.height), reflect_index(x, s.width))
    })
}

/// Builds the network graph on a tape. Each method corresponds to one
/// stage of the architecture and can be driven on its own.
pub struct Graph<'a> {
    tape: &'a mut Tape,
    net: &'a HsrNet,
    binds: &'a Bindings,
    trace: Option<&'a mut FeatureTrace>,
    inference: bool,
}

impl<'a> Graph<'a> {
    pub fn tape(&mut self) -> &mut Tape {
        self.tape
    }

    pub fn config(&self) -> &HsrConfig {
        &self.net.config
    }

    pub fn with_trace(mut self, trace: &'a mut FeatureTrace) -> Self {
        self.trace = Some(trace);
        self
    }

    fn param(&self, name: &str) -> Result<Var> {
        self.binds.var(&self.net.weights, name)
    }

    fn conv(&mut self, name: &str, x: Var, kernel: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        self.tape.conv2d(x, w, b, 1, kernel / 2)
    }

    /// One 3x3 convolution followed by leaky ReLU.
    fn explore(&mut self, name: &str, x: Var) -> Result<Var> {
        let y = self.conv(name, x, KERNEL)?;
        self.tape.leaky_relu(y, self.net.config.leaky_slope)
    }

    fn record(&mut self, stage: Stage, iter: usize, index: usize, v: Var) {
        if let Some(trace) = self.trace.as_deref_mut() {
            trace.push(stage, iter, index, self.tape.value(v).batch_item(0));
        }
    }

    fn release_since(&mut self, mark: usize, keep: Var) {
        if self.inference {
            self.tape.release(mark, keep.index());
        }
    }

    fn expect_channels(&self, what: &str, x: Var, channels: usize) -> Result<()> {
        let s = self.tape.shape(x);
        if s.channels != channels {
            return Err(Error::Shape(format!(
                "{what} expects {channels} channels, got {s}"
            )));
        }
        Ok(())
    }

    /// LR image to the feature space.
    pub fn feature_extract(&mut self, img: Var) -> Result<Var> {
        self.expect_channels("feature_extract", img, 3)?;
        self.conv("entry", img, KERNEL)
    }

    /// Learned `H^T` analogue: conv, leaky ReLU, conv.
    pub fn transposition(&mut self, feat: Var) -> Result<Var> {
        self.expect_channels("transposition", feat, self.net.config.channels)?;
        let h = self.explore("transposition.conv1", feat)?;
        self.conv("transposition.conv2", h, KERNEL)
    }

    /// Learned least-squares step from `(H^T y, u_k)` to the next estimate.
    pub fn solver_ls(&mut self, ht_i: Var, u: Var, iter: usize) -> Result<Var> {
        if self.tape.shape(ht_i) != self.tape.shape(u) {
            return Err(Error::Shape(format!(
                "solver_ls inputs differ: {} vs {}",
                self.tape.shape(ht_i),
                self.tape.shape(u)
            )));
        }
        self.expect_channels("solver_ls", u, self.net.config.channels)?;
        let mark = self.tape.len();
        let p = solver_prefix(&self.net.config, iter);
        let cat = self.tape.concat_channels(&[ht_i, u])?;
        let h = self.explore(&format!("{p}.conv1"), cat)?;
        let h = self.conv(&format!("{p}.conv2"), h, KERNEL)?;
        let out = self.conv(&format!("{p}.conv3"), h, KERNEL)?;
        self.release_since(mark, out);
        Ok(out)
    }

    /// Hierarchical exploration block `{prefix}.heb`. Branch 1 passes through;
    /// branch `i` runs `i - 1` exploration stages and is merged with the
    /// previous branch output; the concatenation is fused back onto the input.
    pub fn heb_forward(&mut self, f_in: Var, prefix: &str, iter: usize, block: usize) -> Result<Var> {
        let c = self.net.config.channels;
        self.expect_channels("heb_forward", f_in, c)?;
        if c % HEB_BRANCHES != 0 {
            return Err(Error::Shape(format!("heb_forward needs channels divisible by {HEB_BRANCHES}")));
        }
        let feat = self.explore(&format!("{prefix}.heb.explore"), f_in)?;
        let parts = self.tape.split_channels(feat, HEB_BRANCHES)?;
        let mut prev = parts[0];
        self.record(Stage::HebBranch, iter, block * HEB_BRANCHES, prev);
        let mut merged = vec![prev];
        for branch in 2..=HEB_BRANCHES {
            let mut g = parts[branch - 1];
            for stage in 1..branch {
                g = self.explore(&format!("{prefix}.heb.branch{branch}.stage{stage}"), g)?;
            }
            let cat = self.tape.concat_channels(&[g, prev])?;
            prev = self.conv(&format!("{prefix}.heb.combine{branch}"), cat, MIX_KERNEL)?;
            self.record(Stage::HebBranch, iter, block * HEB_BRANCHES + branch - 1, prev);
            merged.push(prev);
        }
        let cat = self.tape.concat_channels(&merged)?;
        let fused = self.conv(&format!("{prefix}.heb.fuse"), cat, KERNEL)?;
        self.tape.add(f_in, fused)
    }

    /// Multi-level spatial attention `{prefix}.msa`: three branches explored at
    /// full, half and quarter resolution, fused into a sigmoid map that is
    /// applied to the input according to the configured mode.
    pub fn msa_forward(&mut self, f_in: Var, prefix: &str, iter: usize, block: usize) -> Result<Var> {
        self.expect_channels("msa_forward", f_in, self.net.config.channels)?;
        let s = self.tape.shape(f_in);
        if s.height % SPATIAL_MULTIPLE != 0 || s.width % SPATIAL_MULTIPLE != 0 {
            return Err(Error::Shape(format!(
                "msa_forward needs spatial dims divisible by {SPATIAL_MULTIPLE}, got {s}"
            )));
        }
        let a = self.conv(&format!("{prefix}.msa.entry"), f_in, MIX_KERNEL)?;
        let parts = self.tape.split_channels(a, MSA_LEVELS)?;
        let mut levels = Vec::with_capacity(MSA_LEVELS);
        for (l, &part) in parts.iter().enumerate() {
            let factor = 1 << l;
            let mut h = part;
            if factor > 1 {
                h = self.tape.max_pool2d(h, factor)?;
            }
            h = self.explore(&format!("{prefix}.msa.level{}", l + 1), h)?;
            if factor > 1 {
                h = self.tape.bilinear_upsample(h, factor)?;
            }
            self.record(Stage::MsaLevel, iter, block * MSA_LEVELS + l, h);
            levels.push(h);
        }
        let cat = self.tape.concat_channels(&levels)?;
        let logits = self.conv(&format!("{prefix}.msa.fuse"), cat, MIX_KERNEL)?;
        let attn = self.tape.sigmoid(logits);
        match self.net.config.msa_mode {
            MsaMode::Gate => self.tape.mul(f_in, attn),
            MsaMode::Additive => self.tape.add(f_in, attn),
        }
    }

    /// `n_blocks` x [attention, exploration], then a plain 3x3 convolution.
    pub fn denoiser_forward(&mut self, i_hr: Var, iter: usize) -> Result<Var> {
        let mark = self.tape.len();
        let p = denoiser_prefix(&self.net.config, iter);
        let mut x = i_hr;
        for b in 0..self.net.config.n_blocks {
            let block = format!("{p}.block{b}");
            if self.net.config.msa_enabled {
                x = self.msa_forward(x, &block, iter, b)?;
            }
            x = self.heb_forward(x, &block, iter, b)?;
            self.release_since(mark, x);
        }
        let out = self.conv(&format!("{p}.tail"), x, KERNEL)?;
        self.release_since(mark, out);
        Ok(out)
    }

    /// Conv to `3 s^2` channels, then pixel shuffle by `s`.
    pub fn upscale(&mut self, i_hr: Var) -> Result<Var> {
        let s = self.net.config.scale;
        check_scale(s)?;
        self.expect_channels("upscale", i_hr, self.net.config.channels)?;
        let y = self.conv("upscale.conv", i_hr, KERNEL)?;
        self.tape.pixel_shuffle(y, s)
    }

    /// Full network: LR `(B, 3, h, w)` to SR `(B, 3, s h, s w)`.
    pub fn forward(&mut self, lr: Var) -> Result<Var> {
        let s = self.tape.shape(lr);
        if s.height < 8 || s.width < 8 {
            return Err(Error::Shape(format!("network input must be at least 8x8, got {s}")));
        }
        let lr_feat = self.feature_extract(lr)?;
        self.record(Stage::LrFeature, 0, 0, lr_feat);
        let ht_i = self.transposition(lr_feat)?;
        self.record(Stage::Transposed, 0, 0, ht_i);
        let mut u = ht_i;
        let mut estimate = ht_i;
        let k_total = self.net.config.iterations;
        for k in 0..k_total {
            self.record(Stage::SolverInput, k, 0, u);
            estimate = self.solver_ls(ht_i, u, k)?;
            self.record(Stage::DenoiserInput, k, 0, estimate);
            // The last denoiser output does not reach the upscaler; it is
            // only evaluated when features are being traced.
            if k + 1 < k_total || self.trace.is_some() {
                u = self.denoiser_forward(estimate, k)?;
                self.record(Stage::DenoiserOutput, k, 0, u);
            }
        }
        self.upscale(estimate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_mirrors() {
        let idx: Vec<usize> = (0..9).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, [0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn padded_len_rounds_up() {
        assert_eq!(padded_len(1), 8);
        assert_eq!(padded_len(8), 8);
        assert_eq!(padded_len(9), 12);
        assert_eq!(padded_len(48), 48);
    }

    #[test]
    fn from_parts_detects_mismatch() {
        let net = HsrNet::new(HsrConfig::tiny(2), 0).unwrap();
        let other = HsrConfig { scale: 3, ..HsrConfig::tiny(2) };
        let err = HsrNet::from_parts(other, net.weights().clone()).unwrap_err();
        assert!(err.to_string().contains("upscale.conv.weight"), "{err}");
    }
}
