use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFVL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model snapshot. Parameters are stored as 32-bit floats, so a reload is
/// exact only up to `f32` rounding.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub metadata: serde_json::Value,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    metadata: serde_json::Value,
    param_count: usize,
}

/// Layout: magic, `u32` version, `u64` header length, JSON header, then
/// `param_count` little-endian `f32` values in canonical order.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let header = serde_json::to_vec(&Header {
        config: ckpt.config.clone(),
        vocab_hash: ckpt.vocab_hash.clone(),
        metadata: ckpt.metadata.clone(),
        param_count: ckpt.params.num_params(),
    })?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::with_capacity(16 + header.len() + 4 * ckpt.params.num_params());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in ckpt.params.flat() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    // Write to a sibling file first so a crash never leaves a torn checkpoint.
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint, checking magic, version, parameter count and (when
/// given) the vocabulary hash.
pub fn load_checkpoint(path: &Path, expected_vocab_hash: Option<&str>) -> Result<Checkpoint, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| ModelError::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing RFVL magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if let Some(expected) = expected_vocab_hash {
        if header.vocab_hash != expected {
            return Err(bad("vocabulary hash does not match"));
        }
    }
    let raw = &bytes[16 + hlen..];
    let expected = ParamStore::init(&header.config, 0)?.num_params();
    if header.param_count != expected || raw.len() != 4 * expected {
        return Err(bad(&format!(
            "expected {expected} parameters, header says {} and file holds {}",
            header.param_count,
            raw.len() / 4
        )));
    }
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let params = ParamStore::from_flat(&header.config, &values)?;
    Ok(Checkpoint {
        config: header.config,
        vocab_hash: header.vocab_hash,
        metadata: header.metadata,
        params,
    })
}
