//! Binary checkpoint format.
//!
//! ```text
//! "HSRW"  u32 version
//! u32 len, config JSON
//! u32 count, then per parameter: u32 name len, name, 4 x u32 shape, f32 data
//! sections until EOF: [u8; 4] tag, u64 len, payload
//! ```
//!
//! All integers and floats are little-endian. The only section written is
//! `TRST`: the exact (f64) training state needed to resume bit-for-bit.
//! Unknown sections are skipped.

use std::fs;
use std::path::Path;

use crate::arch::{HsrConfig, HsrNet};
use crate::error::{CheckpointError, Error, Result};
use crate::fsutil::atomic_write;
use crate::tensor::{AdamConfig, AdamState, ParamStore, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"HSRW";
pub const VERSION: u32 = 1;
const TRAIN_STATE: &[u8; 4] = b"TRST";

/// Optimizer state plus full-precision weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed optimizer steps.
    pub step: u64,
    pub weights: ParamStore,
    pub adam: AdamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: HsrConfig,
    /// Weights as stored (f32 precision).
    pub weights: ParamStore,
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    pub fn into_net(self) -> Result<HsrNet> {
        HsrNet::from_parts(self.config, self.weights)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} too large for the checkpoint format")))
}

pub fn encode_checkpoint(net: &HsrNet, state: Option<(u64, &AdamState)>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let json = serde_json::to_vec(net.config()).map_err(|e| Error::Config(e.to_string()))?;
    put_u32(&mut out, len_u32(json.len(), "config")?);
    out.extend_from_slice(&json);

    let weights = net.weights();
    put_u32(&mut out, len_u32(weights.len(), "parameter count")?);
    for p in weights.iter() {
        put_u32(&mut out, len_u32(p.name.len(), "parameter name")?);
        out.extend_from_slice(p.name.as_bytes());
        for d in p.value.shape().dims() {
            put_u32(&mut out, len_u32(d, "dimension")?);
        }
        for v in p.value.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }

    if let Some((step, adam)) = state {
        if adam.m.len() != weights.len() {
            return Err(Error::InvalidArgument("optimizer state does not match the weights".into()));
        }
        let mut body = Vec::new();
        put_u64(&mut body, step);
        put_u64(&mut body, adam.step);
        let c = adam.config;
        put_f64s(&mut body, &[c.lr, c.beta1, c.beta2, c.eps]);
        for (i, p) in weights.iter().enumerate() {
            put_f64s(&mut body, p.value.data());
            put_f64s(&mut body, &adam.m[i]);
            put_f64s(&mut body, &adam.v[i]);
        }
        out.extend_from_slice(TRAIN_STATE);
        put_u64(&mut out, body.len() as u64);
        out.extend_from_slice(&body);
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, net: &HsrNet, state: Option<(u64, &AdamState)>) -> Result<()> {
    atomic_write(path, &encode_checkpoint(net, state)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated.into());
    }
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let json_len = r.u32()? as usize;
    let config: HsrConfig = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
    config
        .validate()
        .map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;

    let count = r.u32()? as usize;
    let mut weights = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?
            .to_string();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let shape = Shape::from_dims(dims);
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(CheckpointError::Truncated)?;
        let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        weights
            .insert(name.clone(), Tensor::new(shape, data)?)
            .map_err(|_| CheckpointError::Malformed(format!("duplicate parameter `{name}`")))?;
    }
    // Checks completeness and shapes against the configuration.
    HsrNet::from_parts(config.clone(), weights.clone())?;

    let mut train_state = None;
    while !r.done() {
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let len = usize::try_from(r.u64()?).map_err(|_| CheckpointError::Truncated)?;
        let body = r.take(len)?;
        if &tag == TRAIN_STATE {
            train_state = Some(decode_train_state(body, &weights)?);
        }
    }
    Ok(Checkpoint {
        config,
        weights,
        train_state,
    })
}

fn decode_train_state(body: &[u8], weights: &ParamStore) -> Result<TrainState> {
    let mut r = Reader { buf: body, pos: 0 };
    let step = r.u64()?;
    let adam_step = r.u64()?;
    let h = r.f64s(4)?;
    let config = AdamConfig {
        lr: h[0],
        beta1: h[1],
        beta2: h[2],
        eps: h[3],
    };
    let mut exact = ParamStore::new();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for p in weights.iter() {
        let n = p.value.len();
        exact.insert(p.name.clone(), Tensor::new(p.value.shape(), r.f64s(n)?)?)?;
        m.push(r.f64s(n)?);
        v.push(r.f64s(n)?);
    }
    if !r.done() {
        return Err(CheckpointError::Malformed("training state has trailing bytes".into()).into());
    }
    Ok(TrainState {
        step,
        weights: exact,
        adam: AdamState {
            config,
            step: adam_step,
            m,
            v,
        },
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
