//! Checkpoint file:
//!
//! ```text
//! "HVQC" | u32 format version | u32 header length | JSON header
//!        | u32 tensor count | per tensor: u32 name length | name | HVQF v2 block
//! ```
//! The header carries every configuration; tensors carry network parameters,
//! AdamW moments and codebooks (prototypes, EMA masses and running sums) at
//! full 64-bit precision.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::hvqf::{read_tensor_block, write_tensor_block, FEATURE_VERSION_F64};
use super::write_atomic;
use crate::error::{HvqError, Result};
use crate::hvq::Codebook;
use crate::numerics::ParamStore;
use crate::tcn::TcnModel;
use crate::training::{HvqModel, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HVQC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or run inference for one activity.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub activity: String,
    pub config: TrainConfig,
    pub state: HvqModel,
    pub epochs_completed: usize,
    /// Free-form settings stored alongside (decoder options, run metadata).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    activity: String,
    epochs_completed: usize,
    encoder_steps: u64,
    decoder_steps: u64,
    levels: usize,
    codebook_versions: Vec<u64>,
    config: TrainConfig,
    extra: serde_json::Value,
}

fn as_matrix(values: &[f64], shape: &[usize]) -> Array2<f64> {
    let cols = *shape.last().unwrap_or(&1);
    let rows = values.len() / cols.max(1);
    Array2::from_shape_vec((rows, cols), values.to_vec()).expect("parameter shape")
}

fn push_tensor(out: &mut Vec<u8>, name: &str, data: &Array2<f64>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    write_tensor_block(out, data, FEATURE_VERSION_F64);
}

fn push_store(out: &mut Vec<u8>, store: &ParamStore, count: &mut u32) {
    for p in &store.params {
        push_tensor(out, &p.name, &as_matrix(&p.value, &p.shape));
        push_tensor(out, &format!("{}#m", p.name), &as_matrix(&p.first_moment, &p.shape));
        push_tensor(out, &format!("{}#v", p.name), &as_matrix(&p.second_moment, &p.shape));
        *count += 3;
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        activity: ckpt.activity.clone(),
        epochs_completed: ckpt.epochs_completed,
        encoder_steps: ckpt.state.model.encoder.params.step,
        decoder_steps: ckpt.state.model.decoder.params.step,
        levels: ckpt.state.books.len(),
        codebook_versions: ckpt.state.books.iter().map(|b| b.version).collect(),
        config: ckpt.config.clone(),
        extra: ckpt.extra.clone(),
    };
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");
    let mut tensors = Vec::new();
    let mut count = 0u32;
    push_store(&mut tensors, &ckpt.state.model.encoder.params, &mut count);
    push_store(&mut tensors, &ckpt.state.model.decoder.params, &mut count);
    for (l, b) in ckpt.state.books.iter().enumerate() {
        push_tensor(&mut tensors, &format!("codebook{l}.prototypes"), &b.prototypes);
        push_tensor(&mut tensors, &format!("codebook{l}.ema_sum"), &b.ema_sum);
        let mass = Array2::from_shape_vec((b.mass.len(), 1), b.mass.clone()).expect("mass column");
        push_tensor(&mut tensors, &format!("codebook{l}.mass"), &mass);
        count += 3;
    }
    let mut out = Vec::with_capacity(16 + json.len() + tensors.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&tensors);
    out
}

/// Writes the checkpoint atomically.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt))
}

fn fmt_err(path: &str, offset: usize, reason: impl Into<String>) -> HvqError {
    HvqError::Format {
        path: path.to_string(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn take_u32(bytes: &[u8], at: &mut usize, path: &str) -> Result<u32> {
    let v = bytes
        .get(*at..*at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| fmt_err(path, bytes.len(), "truncated checkpoint"))?;
    *at += 4;
    Ok(v)
}

/// Parses checkpoint bytes; `path` is only used in diagnostics.
pub fn decode_checkpoint(bytes: &[u8], path: &str) -> Result<Checkpoint> {
    if bytes.get(..4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(fmt_err(path, 0, "bad magic, expected HVQC"));
    }
    let mut at = 4;
    let version = take_u32(bytes, &mut at, path)?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(
            path,
            4,
            format!("checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"),
        ));
    }
    let json_len = take_u32(bytes, &mut at, path)? as usize;
    let json = bytes
        .get(at..at + json_len)
        .ok_or_else(|| fmt_err(path, bytes.len(), "truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| fmt_err(path, at, format!("header: {e}")))?;
    at += json_len;
    let count = take_u32(bytes, &mut at, path)?;
    let mut tensors: HashMap<String, Array2<f64>> = HashMap::new();
    for _ in 0..count {
        let name_len = take_u32(bytes, &mut at, path)? as usize;
        let name = bytes
            .get(at..at + name_len)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| fmt_err(path, at, "bad tensor name"))?
            .to_string();
        at += name_len;
        let (data, end) = read_tensor_block(bytes, at, path)?;
        at = end;
        tensors.insert(name, data);
    }
    if at != bytes.len() {
        return Err(fmt_err(path, at, "trailing bytes"));
    }

    let mut take = |name: &str, len: usize| -> Result<Vec<f64>> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| fmt_err(path, 0, format!("missing tensor {name}")))?;
        if t.len() != len {
            return Err(fmt_err(path, 0, format!("tensor {name} has {} values, expected {len}", t.len())));
        }
        Ok(t.into_iter().collect())
    };

    let mut model = TcnModel::build(&header.config.tcn, 0)?;
    for store in [&mut model.encoder.params, &mut model.decoder.params] {
        for p in &mut store.params {
            let n = p.len();
            p.value = take(&p.name, n)?;
            p.first_moment = take(&format!("{}#m", p.name), n)?;
            p.second_moment = take(&format!("{}#v", p.name), n)?;
        }
    }
    model.encoder.params.step = header.encoder_steps;
    model.decoder.params.step = header.decoder_steps;

    let sizes = header.config.hvq.level_sizes();
    if sizes.len() != header.levels || header.codebook_versions.len() != header.levels {
        return Err(fmt_err(path, 0, "codebook levels disagree with the configuration"));
    }
    let dim = header.config.tcn.latent_dim;
    let mut books = Vec::with_capacity(sizes.len());
    for (l, &p) in sizes.iter().enumerate() {
        let protos = Array2::from_shape_vec((p, dim), take(&format!("codebook{l}.prototypes"), p * dim)?)
            .expect("checked length");
        let ema_sum = Array2::from_shape_vec((p, dim), take(&format!("codebook{l}.ema_sum"), p * dim)?)
            .expect("checked length");
        let mass = take(&format!("codebook{l}.mass"), p)?;
        let mut book = Codebook::new(Array2::zeros((p, dim)), l + 1)?;
        book.prototypes = protos;
        book.ema_sum = ema_sum;
        book.mass = mass;
        book.version = header.codebook_versions[l];
        books.push(book);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(fmt_err(path, 0, format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        activity: header.activity,
        config: header.config,
        state: HvqModel { model, books },
        epochs_completed: header.epochs_completed,
        extra: header.extra,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| HvqError::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
