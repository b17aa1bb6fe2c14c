//! Patch sampling, the L1/Adam training loop, and checkpoints.

mod checkpoint;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{HsrConfig, HsrNet, SPATIAL_MULTIPLE};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::imaging::{self, bicubic_resize, Image};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, TrainState, MAGIC, VERSION,
};

/// Mixed into the seed so patch sampling and weight init draw from unrelated streams.
const SAMPLER_SALT: u64 = 0x005E_ED0F_5A4D_9135;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: u64,
    /// Overrides `epochs` when set.
    pub steps: Option<u64>,
    pub batch_size: usize,
    /// LR patch side; the HR patch is `scale` times larger.
    pub patch_size: usize,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// Save every this many steps as well as at the end; 0 disables.
    pub checkpoint_every: u64,
    pub loss_csv: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Reserved for flips/rotations; only `false` is implemented.
    pub augment: bool,
    pub model: HsrConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 1000,
            steps: None,
            batch_size: 4,
            patch_size: 48,
            seed: 0,
            data_dir: PathBuf::from("data/train"),
            checkpoint: PathBuf::from("hsrnet.ckpt"),
            checkpoint_every: 0,
            loss_csv: None,
            resume: None,
            augment: false,
            model: HsrConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be a finite non-negative number, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.patch_size < 8 || self.patch_size % SPATIAL_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "patch_size must be a multiple of {SPATIAL_MULTIPLE} and at least 8, got {}",
                self.patch_size
            )));
        }
        if self.augment {
            return Err(Error::Config("augmentation is not implemented".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn total_steps(&self, dataset_len: usize) -> u64 {
        self.steps
            .unwrap_or_else(|| self.epochs * dataset_len.div_ceil(self.batch_size) as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub name: String,
    pub hr: Image,
    pub lr: Image,
}

/// HR images with their bicubic-degraded LR counterparts, sorted by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scale: usize,
    pub pairs: Vec<Pair>,
}

impl Dataset {
    /// Center-crops each HR image to a multiple of `scale` and degrades it.
    pub fn from_images(mut images: Vec<(String, Image)>, scale: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("no training images".into()));
        }
        if scale < 2 {
            return Err(Error::InvalidArgument(format!("scale must be at least 2, got {scale}")));
        }
        images.sort_by(|a, b| a.0.cmp(&b.0));
        let pairs = images
            .into_iter()
            .map(|(name, img)| {
                let hr = img.crop_to_multiple(scale)?;
                let lr = bicubic_resize(&hr, 1, scale, true)?;
                Ok(Pair { name, hr, lr })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { scale, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Smallest LR height or width.
    pub fn min_lr_side(&self) -> usize {
        self.pairs
            .iter()
            .map(|p| p.lr.height().min(p.lr.width()))
            .min()
            .unwrap_or(0)
    }
}

pub fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

/// Sorted image files (`.png`, `.ppm`) directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_file(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn build_pairs(hr_dir: &Path, scale: usize) -> Result<Dataset> {
    let files = list_images(hr_dir)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no PNG/PPM images in {}", hr_dir.display())));
    }
    let images = files
        .iter()
        .map(|p| {
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            Ok((name, imaging::load(p)?))
        })
        .collect::<Result<_>>()?;
    Dataset::from_images(images, scale)
}

/// `batch` aligned patch pairs: LR `p x p` at `(x, y)` of a random image,
/// HR `sp x sp` at `(sx, sy)`. Returns `(B, 3, p, p)` and `(B, 3, sp, sp)`.
pub fn sample_batch(data: &Dataset, patch: usize, batch: usize, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    if patch == 0 || batch == 0 {
        return Err(Error::InvalidArgument("patch and batch sizes must be positive".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if patch > data.min_lr_side() {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} exceeds the smallest LR side {}",
            data.min_lr_side()
        )));
    }
    let s = data.scale;
    let mut lrs = Vec::with_capacity(batch);
    let mut hrs = Vec::with_capacity(batch);
    for _ in 0..batch {
        let pair = &data.pairs[rng.gen_range(0..data.len())];
        let y = rng.gen_range(0..=pair.lr.height() - patch);
        let x = rng.gen_range(0..=pair.lr.width() - patch);
        lrs.push(pair.lr.crop(y, x, patch, patch)?.to_tensor());
        hrs.push(pair.hr.crop(s * y, s * x, s * patch, s * patch)?.to_tensor());
    }
    Ok((Tensor::stack(&lrs)?, Tensor::stack(&hrs)?))
}

/// Sampler for step `step`: independent of how many steps ran before, which
/// is what lets a resumed run replay the same batches.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SAMPLER_SALT);
    rng.set_stream(step);
    rng
}

pub fn loss_csv(history: &[(u64, f64)]) -> String {
    let mut out = String::from("step,loss\n");
    for (step, loss) in history {
        out.push_str(&format!("{step},{loss}\n"));
    }
    out
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<(u64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some("step,loss") {
        return Err(Error::InvalidArgument("loss log must start with `step,loss`".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (s, v) = l
                .split_once(',')
                .ok_or_else(|| Error::InvalidArgument(format!("bad loss row `{l}`")))?;
            let step = s.parse().map_err(|_| Error::InvalidArgument(format!("bad step `{s}`")))?;
            let loss = v.parse().map_err(|_| Error::InvalidArgument(format!("bad loss `{v}`")))?;
            Ok((step, loss))
        })
        .collect()
}

pub struct Trainer {
    cfg: TrainConfig,
    data: Dataset,
    net: HsrNet,
    adam: AdamState,
    step: u64,
    history: Vec<(u64, f64)>,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        Self::check_data(&cfg, &data)?;
        let net = HsrNet::new(cfg.model.clone(), cfg.seed)?;
        let adam = AdamState::new(cfg.adam(), net.weights());
        Ok(Trainer {
            cfg,
            data,
            net,
            adam,
            step: 0,
            history: Vec::new(),
            last_checkpoint: None,
        })
    }

    /// Continue from a checkpoint holding training state. The configured
    /// learning rate replaces the stored one; the model must match.
    pub fn resume(cfg: TrainConfig, data: Dataset, ck: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        Self::check_data(&cfg, &data)?;
        if ck.config != cfg.model {
            return Err(crate::error::CheckpointError::ConfigMismatch(
                "checkpoint model differs from the configured model".into(),
            )
            .into());
        }
        let state = ck
            .train_state
            .ok_or_else(|| Error::InvalidArgument("checkpoint has no training state to resume from".into()))?;
        let net = HsrNet::from_parts(ck.config, state.weights)?;
        let mut adam = state.adam;
        adam.config.lr = cfg.lr;
        Ok(Trainer {
            cfg,
            data,
            net,
            adam,
            step: state.step,
            history: Vec::new(),
            last_checkpoint: None,
        })
    }

    fn check_data(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
        if data.scale != cfg.model.scale {
            return Err(Error::Config(format!(
                "dataset scale {} differs from model scale {}",
                data.scale, cfg.model.scale
            )));
        }
        if cfg.patch_size > data.min_lr_side() {
            return Err(Error::Config(format!(
                "patch_size {} exceeds the smallest LR side {}",
                cfg.patch_size,
                data.min_lr_side()
            )));
        }
        Ok(())
    }

    pub fn net(&self) -> &HsrNet {
        &self.net
    }

    pub fn into_net(self) -> HsrNet {
        self.net
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Completed steps, including those before a resume.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// `(step, loss)` for the steps run by this trainer; `step` is 1-based.
    pub fn history(&self) -> &[(u64, f64)] {
        &self.history
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let mut rng = step_rng(self.cfg.seed, self.step);
        let (lr, hr) = sample_batch(&self.data, self.cfg.patch_size, self.cfg.batch_size, &mut rng)?;
        let mut tape = Tape::new();
        let binds = self.net.weights().bind(&mut tape);
        let x = tape.constant(lr);
        let target = tape.constant(hr);
        let out = self.net.graph(&mut tape, &binds).forward(x)?;
        let loss = tape.l1_loss(out, target)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                last_checkpoint: self.last_checkpoint.clone(),
            });
        }
        tape.backward(loss)?;
        let weights = self.net.weights_mut();
        weights.zero_grad();
        weights.collect_grads(&tape, &binds);
        adam_step(weights, &mut self.adam)?;
        self.step += 1;
        self.history.push((self.step, value));
        Ok(value)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        encode_checkpoint(&self.net, Some((self.step, &self.adam)))
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.net, Some((self.step, &self.adam)))?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    /// Step until `total` steps are complete, saving periodically and at the end.
    pub fn run(&mut self, total: u64) -> Result<()> {
        let every = self.cfg.checkpoint_every;
        let path = self.cfg.checkpoint.clone();
        while self.step < total {
            self.step()?;
            if every > 0 && self.step % every == 0 && self.step < total {
                self.save(&path)?;
            }
        }
        self.save(&path)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub net: HsrNet,
    /// Loss per step over the whole run, including steps logged before a resume.
    pub history: Vec<(u64, f64)>,
    pub steps: u64,
}

/// Train from `cfg`: load data, optionally resume, run, write the
/// checkpoint and the loss log.
pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let data = build_pairs(&cfg.data_dir, cfg.model.scale)?;
    let total = cfg.total_steps(data.len());
    let mut prior = Vec::new();
    let mut trainer = match &cfg.resume {
        Some(path) => {
            let t = Trainer::resume(cfg.clone(), data, load_checkpoint(path)?)?;
            if let Some(csv) = cfg.loss_csv.as_deref().filter(|p| p.exists()) {
                let text = fs::read_to_string(csv).map_err(|e| Error::io(csv, e))?;
                prior = parse_loss_csv(&text)?;
                prior.retain(|&(s, _)| s <= t.step_count());
            }
            t
        }
        None => Trainer::new(cfg.clone(), data)?,
    };
    let result = trainer.run(total);
    prior.extend_from_slice(trainer.history());
    if let Some(csv) = &cfg.loss_csv {
        atomic_write(csv, loss_csv(&prior).as_bytes())?;
    }
    result?;
    Ok(TrainReport {
        steps: trainer.step_count(),
        net: trainer.into_net(),
        history: prior,
    })
}
