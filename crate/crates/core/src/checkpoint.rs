//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "PDIF"
//! version      u32      currently 1
//! config_len   u32      byte length of the embedded config text
//! config       UTF-8    canonical run-config text
//! tensors      repeated, sorted by name:
//!     name_len u32
//!     name     UTF-8
//!     rank     u32
//!     dims     u32 x rank
//!     data     f32 x product(dims), row-major
//! checksum     u64      FNV-1a over every preceding byte
//! ```
//!
//! Values are stored as f32; in-memory parameters only ever hold
//! f32-representable values (enforced by init and the optimizer), so a
//! save/load round trip is bit-exact. Training checkpoints add the
//! optimizer moments under `opt.m.*` / `opt.v.*` and the step counter
//! under `trainer.step`.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{Denoiser, ParamStore};
use crate::training::TrainState;

pub const MAGIC: [u8; 4] = *b"PDIF";
pub const VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a of a byte stream.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

const STEP_TENSOR: &str = "trainer.step";
const MOMENT1_PREFIX: &str = "opt.m.";
const MOMENT2_PREFIX: &str = "opt.v.";

/// Raw checkpoint payload: the embedded config text and the named tensors.
#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub config_text: String,
    pub tensors: ParamStore,
}

pub fn write_checkpoint_bytes(config_text: &str, tensors: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config_bytes = config_text.as_bytes();
    let config_len = u32::try_from(config_bytes.len())
        .map_err(|_| Error::Checkpoint("config text exceeds u32 length".into()))?;
    out.extend_from_slice(&config_len.to_le_bytes());
    out.extend_from_slice(config_bytes);

    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        let name_len = u32::try_from(name_bytes.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name `{name}` too long")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name_bytes);
        let rank = u32::try_from(tensor.ndim())
            .map_err(|_| Error::Checkpoint(format!("tensor `{name}` rank too large")))?;
        out.extend_from_slice(&rank.to_le_bytes());
        for &dim in tensor.shape() {
            let dim = u32::try_from(dim).map_err(|_| {
                Error::Checkpoint(format!("tensor `{name}` dimension {dim} exceeds u32"))
            })?;
            out.extend_from_slice(&dim.to_le_bytes());
        }
        for &v in tensor.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<CheckpointData> {
    // magic + version + config_len + checksum is the bare minimum.
    if bytes.len() < 4 + 4 + 4 + 8 {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
        )));
    }

    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (this build reads {VERSION})"
        )));
    }
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?
        .to_string();

    let mut tensors = ParamStore::new();
    while r.remaining() > 0 {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has implausible rank {rank}"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            len = len
                .checked_mul(d)
                .filter(|&l| l <= (1 << 30))
                .ok_or_else(|| {
                    Error::Checkpoint(format!("tensor `{name}` dimensions overflow"))
                })?;
            dims.push(d);
        }
        let raw = r.take(len * 4)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        if tensors.insert(name.clone(), arr).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(CheckpointData {
        config_text,
        tensors,
    })
}

pub fn save_checkpoint(path: &Path, tensors: &ParamStore, config_text: &str) -> Result<()> {
    let bytes = write_checkpoint_bytes(config_text, tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint_bytes(&bytes)
}

/// Write an inference checkpoint: parameters plus the run config.
pub fn save_model(path: &Path, net: &Denoiser, config: &RunConfig) -> Result<()> {
    save_checkpoint(path, net.params(), &config.canonical_text())
}

/// Write a resumable training checkpoint: parameters, optimizer moments,
/// and the step counter.
pub fn save_training(path: &Path, state: &TrainState, config: &RunConfig) -> Result<()> {
    let mut tensors = state.net.params().clone();
    for (name, m) in &state.moment1 {
        tensors.insert(format!("{MOMENT1_PREFIX}{name}"), m.clone());
    }
    for (name, v) in &state.moment2 {
        tensors.insert(format!("{MOMENT2_PREFIX}{name}"), v.clone());
    }
    tensors.insert(
        STEP_TENSOR.into(),
        ArrayD::from_shape_vec(IxDyn(&[1]), vec![state.step as f64]).unwrap(),
    );
    save_checkpoint(path, &tensors, &config.canonical_text())
}

fn split_tensors(data: CheckpointData) -> (ParamStore, ParamStore, ParamStore, Option<u64>) {
    let mut params = ParamStore::new();
    let mut m1 = ParamStore::new();
    let mut m2 = ParamStore::new();
    let mut step = None;
    for (name, tensor) in data.tensors {
        if let Some(rest) = name.strip_prefix(MOMENT1_PREFIX) {
            m1.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix(MOMENT2_PREFIX) {
            m2.insert(rest.to_string(), tensor);
        } else if name == STEP_TENSOR {
            step = tensor.first().map(|&v| v as u64);
        } else {
            params.insert(name, tensor);
        }
    }
    (params, m1, m2, step)
}

/// Load a network for inference from either checkpoint flavor, validating
/// every tensor against the architecture the embedded config describes.
pub fn load_model(path: &Path) -> Result<(Denoiser, RunConfig)> {
    let data = load_checkpoint(path)?;
    let config = RunConfig::parse(&data.config_text)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let (params, _, _, _) = split_tensors(data);
    let net = Denoiser::new(config.denoiser_config(), params)?;
    Ok((net, config))
}

/// Load a full training state; fails on inference-only checkpoints.
pub fn load_training(path: &Path) -> Result<(TrainState, RunConfig)> {
    let data = load_checkpoint(path)?;
    let config = RunConfig::parse(&data.config_text)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let (params, m1, m2, step) = split_tensors(data);
    let step = step.ok_or_else(|| {
        Error::Checkpoint("no step counter; not a training checkpoint".into())
    })?;
    let state = TrainState::from_parts(config.denoiser_config(), params, m1, m2, step)?;
    Ok((state, config))
}
