//! ADTRCK01 parameter checkpoints.
//!
//! Layout, all integers u32 little-endian:
//!
//! ```text
//! magic      "ADTRCK01"
//! config     in_channels token_dim n_encoder_layers n_decoder_layers
//!            n_heads ffn_hidden height width, then variant tag (u8)
//! count      number of tensors
//! tensor*    name_len, name (UTF-8), rank, extents[rank], f32 LE data
//! ```
//!
//! Tensors appear in the canonical parameter order of
//! [`param_layout`](crate::model::param_layout).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{param_layout, zero_params, ModelConfig, ModelError, ModelParams, Variant};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADTRCK01";

const MAX_NAME_LEN: usize = 256;
const MAX_RANK: usize = 4;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not an ADTRCK01 checkpoint")]
    BadMagic,
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("unknown variant tag {0}")]
    BadVariant(u8),
    #[error("invalid stored config: {0}")]
    Config(#[from] ModelError),
    #[error("tensor {index}: {detail}")]
    Tensor { index: usize, detail: String },
    #[error("checkpoint holds {found} tensors, config requires {expected}")]
    Count { expected: usize, found: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CheckpointError {
    pub fn kind(&self) -> &'static str {
        match self {
            CheckpointError::BadMagic => "bad_magic",
            CheckpointError::Truncated(_) => "truncated",
            CheckpointError::TrailingBytes(_) => "trailing_bytes",
            CheckpointError::BadVariant(_) => "bad_variant",
            CheckpointError::Config(_) => "bad_config",
            CheckpointError::Tensor { .. } => "bad_tensor",
            CheckpointError::Count { .. } => "bad_count",
            CheckpointError::Io { .. } => "io",
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(config: &ModelConfig, params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.count() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        config.in_channels,
        config.token_dim,
        config.n_encoder_layers,
        config.n_decoder_layers,
        config.n_heads,
        config.ffn_hidden,
        config.height,
        config.width,
    ] {
        put_u32(&mut out, v);
    }
    out.push(config.variant.tag());
    put_u32(&mut out, params.len());
    for (name, p) in params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, p.tensor.rank());
        for &d in p.tensor.shape() {
            put_u32(&mut out, d);
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a checkpoint and checks every tensor name and shape against the
/// parameter layout implied by the stored config.
pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, ModelParams<f32>), CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = cur.u32()?;
    }
    let tag = cur.take(1)?[0];
    let variant = Variant::from_tag(tag).ok_or(CheckpointError::BadVariant(tag))?;
    let config = ModelConfig {
        in_channels: dims[0],
        token_dim: dims[1],
        n_encoder_layers: dims[2],
        n_decoder_layers: dims[3],
        n_heads: dims[4],
        ffn_hidden: dims[5],
        height: dims[6],
        width: dims[7],
        variant,
    };
    config.validate()?;
    let expected_count = param_layout(&config)?.len();
    let count = cur.u32()?;
    if count != expected_count {
        return Err(CheckpointError::Count {
            expected: expected_count,
            found: count,
        });
    }
    let mut params = template(&config, bytes.len())?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for (index, expected_name) in names.iter().enumerate() {
        let bad = |detail: String| CheckpointError::Tensor { index, detail };
        let name_len = cur.u32()?;
        if name_len > MAX_NAME_LEN {
            return Err(bad(format!("name length {name_len} exceeds {MAX_NAME_LEN}")));
        }
        let name = std::str::from_utf8(cur.take(name_len)?).map_err(|_| bad("name is not UTF-8".into()))?;
        if name != expected_name {
            return Err(bad(format!("found {name:?}, expected {expected_name:?}")));
        }
        let rank = cur.u32()?;
        if rank == 0 || rank > MAX_RANK {
            return Err(bad(format!("rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()?);
        }
        let slot = params.get_mut(name).expect("name taken from the template");
        if shape != slot.shape() {
            return Err(bad(format!("{name}: shape {shape:?}, expected {:?}", slot.shape())));
        }
        let raw = cur.take(slot.numel() * 4)?;
        for (dst, b) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        if !slot.is_finite() {
            return Err(bad(format!("{name}: non-finite value")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok((config, params))
}

/// Zero tensors shaped like the parameters of `config`; rejects layouts whose
/// payload cannot fit in `available` bytes before allocating anything.
fn template(config: &ModelConfig, available: usize) -> Result<ModelParams<f32>, CheckpointError> {
    let mut total: usize = 0;
    for spec in param_layout(config)? {
        let n = spec.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        total = n
            .and_then(|n| n.checked_mul(4))
            .and_then(|b| total.checked_add(b))
            .ok_or(CheckpointError::Truncated(available))?;
    }
    if total > available {
        return Err(CheckpointError::Truncated(available));
    }
    Ok(zero_params(config)?)
}

pub fn save(path: &Path, config: &ModelConfig, params: &ModelParams<f32>) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(&encode(config, params)).map_err(io)
}

pub fn load(path: &Path) -> Result<(ModelConfig, ModelParams<f32>), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
