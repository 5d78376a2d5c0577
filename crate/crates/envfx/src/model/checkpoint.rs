//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      8 bytes  "EFXCKPT1"
//! version    u32      1
//! cfg_len    u32      followed by the JSON config blob
//! cfg_hash   u64      FNV-1a of the config blob, validated on load
//! step       u64
//! rng_seed   32 bytes ChaCha20 seed of the batch sampler
//! rng_pos    u128     ChaCha20 word position
//! params     u32 count, then per param: name, shape, f64 data
//! adam       u32 count, then per slot: name, t, m data, v data
//! bn         u32 count, then per layer: name, running mean, running var
//! ```
//!
//! Parameter values round-trip bit-exactly (`f64` <-> little-endian bytes).

use std::fs;
use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};

use super::layers::ParamRegistry;
use super::Model;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamSlot};

const MAGIC: &[u8; 8] = b"EFXCKPT1";
const VERSION: u32 = 1;

/// Everything a checkpoint stores, in plain data form.
#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub config_json: String,
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub params: Vec<(String, ArrayD<f64>)>,
    pub adam: Vec<(String, AdamSlot)>,
    pub bn: Vec<(String, Array1<f64>, Array1<f64>)>,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn save_checkpoint(path: &Path, data: &CheckpointData) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let cfg = data.config_json.as_bytes();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg);
    buf.extend_from_slice(&fnv1a(cfg).to_le_bytes());

    buf.extend_from_slice(&data.step.to_le_bytes());
    buf.extend_from_slice(&data.rng_seed);
    buf.extend_from_slice(&data.rng_word_pos.to_le_bytes());

    let write_name = |buf: &mut Vec<u8>, name: &str| {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
    };
    let write_array = |buf: &mut Vec<u8>, a: &ArrayD<f64>| {
        buf.push(a.ndim() as u8);
        for &d in a.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in a.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };

    buf.extend_from_slice(&(data.params.len() as u32).to_le_bytes());
    for (name, value) in &data.params {
        write_name(&mut buf, name);
        write_array(&mut buf, value);
    }

    buf.extend_from_slice(&(data.adam.len() as u32).to_le_bytes());
    for (name, slot) in &data.adam {
        write_name(&mut buf, name);
        buf.extend_from_slice(&slot.t.to_le_bytes());
        write_array(&mut buf, &slot.m);
        write_array(&mut buf, &slot.v);
    }

    buf.extend_from_slice(&(data.bn.len() as u32).to_le_bytes());
    for (name, mean, var) in &data.bn {
        write_name(&mut buf, name);
        buf.extend_from_slice(&(mean.len() as u32).to_le_bytes());
        for &v in mean.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in var.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut pos = 0usize;

    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(bad("truncated checkpoint"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    macro_rules! u32_at {
        ($pos:expr) => {
            u32::from_le_bytes(take($pos, 4)?.try_into().unwrap()) as usize
        };
    }

    if take(&mut pos, 8)? != MAGIC {
        return Err(bad("bad magic; not a checkpoint"));
    }
    let version = u32_at!(&mut pos);
    if version != VERSION as usize {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }

    let cfg_len = u32_at!(&mut pos);
    let config_json = String::from_utf8(take(&mut pos, cfg_len)?.to_vec())
        .map_err(|_| bad("config blob is not UTF-8"))?;
    let stored_hash = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    if fnv1a(config_json.as_bytes()) != stored_hash {
        return Err(bad("config hash mismatch; checkpoint is corrupt"));
    }

    let step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let rng_seed: [u8; 32] = take(&mut pos, 32)?.try_into().unwrap();
    let rng_word_pos = u128::from_le_bytes(take(&mut pos, 16)?.try_into().unwrap());

    let read_name = |pos: &mut usize| -> Result<String> {
        let n = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
        String::from_utf8(take(pos, n)?.to_vec()).map_err(|_| bad("name is not UTF-8"))
    };
    let read_array = |pos: &mut usize| -> Result<ArrayD<f64>> {
        let ndim = take(pos, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize);
        }
        let len: usize = dims.iter().product();
        let raw = take(pos, len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| bad(&format!("bad shape: {e}")))
    };

    let n_params = u32_at!(&mut pos);
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = read_name(&mut pos)?;
        let value = read_array(&mut pos)?;
        params.push((name, value));
    }

    let n_adam = u32_at!(&mut pos);
    let mut adam = Vec::with_capacity(n_adam);
    for _ in 0..n_adam {
        let name = read_name(&mut pos)?;
        let t = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let m = read_array(&mut pos)?;
        let v = read_array(&mut pos)?;
        adam.push((name, AdamSlot { m, v, t }));
    }

    let n_bn = u32_at!(&mut pos);
    let mut bn = Vec::with_capacity(n_bn);
    for _ in 0..n_bn {
        let name = read_name(&mut pos)?;
        let len = u32_at!(&mut pos);
        let read_vec = |pos: &mut usize| -> Result<Array1<f64>> {
            let raw = take(pos, len * 8)?;
            Ok(Array1::from_vec(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ))
        };
        let mean = read_vec(&mut pos)?;
        let var = read_vec(&mut pos)?;
        bn.push((name, mean, var));
    }

    Ok(CheckpointData {
        config_json,
        step,
        rng_seed,
        rng_word_pos,
        params,
        adam,
        bn,
    })
}

/// Snapshot a model (plus optional optimizer) into checkpoint data.
pub fn snapshot(
    model: &Model,
    registry: &ParamRegistry,
    adam: Option<&Adam>,
    config_json: String,
    step: u64,
    rng_seed: [u8; 32],
    rng_word_pos: u128,
) -> CheckpointData {
    let params = registry
        .entries
        .iter()
        .map(|(name, _, t)| (name.clone(), t.to_array()))
        .collect();
    let adam = match adam {
        Some(opt) => registry
            .entries
            .iter()
            .zip(opt.slots())
            .map(|((name, _, _), slot)| (name.clone(), slot.clone()))
            .collect(),
        None => Vec::new(),
    };
    let bn = model
        .bn_layers()
        .into_iter()
        .map(|(name, layer)| {
            (
                name,
                layer.running_mean.borrow().clone(),
                layer.running_var.borrow().clone(),
            )
        })
        .collect();
    CheckpointData {
        config_json,
        step,
        rng_seed,
        rng_word_pos,
        params,
        adam,
        bn,
    }
}

/// Restore parameters and batch-norm buffers into a freshly built model.
pub fn restore_model(model: &Model, registry: &ParamRegistry, data: &CheckpointData) -> Result<()> {
    if data.params.len() != registry.entries.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            data.params.len(),
            registry.entries.len()
        )));
    }
    for (name, value) in &data.params {
        let tensor = registry.find(name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint parameter '{name}' not in model"))
        })?;
        if tensor.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}': checkpoint shape {:?} vs model {:?}",
                value.shape(),
                tensor.shape()
            )));
        }
        tensor.set_value(value.clone());
    }
    let layers = model.bn_layers();
    for (name, mean, var) in &data.bn {
        let layer = layers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, l)| *l)
            .ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint buffer '{name}' not in model"))
            })?;
        *layer.running_mean.borrow_mut() = mean.clone();
        *layer.running_var.borrow_mut() = var.clone();
    }
    Ok(())
}

/// Restore optimizer slots by registry order, verifying names.
pub fn restore_adam(adam: &mut Adam, registry: &ParamRegistry, data: &CheckpointData) -> Result<()> {
    if data.adam.is_empty() {
        return Ok(()); // inference-only checkpoint
    }
    if data.adam.len() != registry.entries.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} optimizer slots, model expects {}",
            data.adam.len(),
            registry.entries.len()
        )));
    }
    for (i, ((name, _, _), (ck_name, slot))) in
        registry.entries.iter().zip(&data.adam).enumerate()
    {
        if name != ck_name {
            return Err(Error::Checkpoint(format!(
                "optimizer slot {i}: expected '{name}', found '{ck_name}'"
            )));
        }
        adam.set_slot(i, slot.clone());
    }
    Ok(())
}
