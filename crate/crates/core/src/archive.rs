//! TARC1 tensor archive.
//!
//! Layout: magic `TARC1`, `u32` LE manifest length, UTF-8 JSON manifest
//! `[{name, shape, dtype, byte_offset}, ...]`, then the little-endian f32
//! payload. Offsets are relative to the payload start.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Tensor;
use crate::wire;

pub const MAGIC: &[u8; 5] = b"TARC1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in tensors {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: payload.len() as u64,
        });
        wire::put_f32s(&mut payload, t.data());
    }
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// Parses and bounds-checks an archive; tensors come back in manifest order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let corrupt = |m: String| Error::CorruptArchive(m);
    let rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| corrupt("bad magic, expected TARC1".into()))?;
    let mut src = rest;
    let len = wire::take_u32(&mut src).map_err(|_| corrupt("missing manifest length".into()))? as usize;
    if src.len() < len {
        return Err(corrupt(format!("manifest of {len} bytes but only {} remain", src.len())));
    }
    let (json, payload) = src.split_at(len);
    let manifest: Vec<ManifestEntry> =
        serde_json::from_slice(json).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let mut spans = Vec::with_capacity(manifest.len());
    let mut seen = HashMap::new();
    for e in &manifest {
        if e.dtype != "f32" {
            return Err(corrupt(format!("{}: unsupported dtype {:?}", e.name, e.dtype)));
        }
        if seen.insert(e.name.as_str(), ()).is_some() {
            return Err(corrupt(format!("duplicate entry {}", e.name)));
        }
        let bytes_len = e
            .shape
            .iter()
            .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| corrupt(format!("{}: shape overflows", e.name)))?;
        let end = e
            .byte_offset
            .checked_add(bytes_len)
            .filter(|&end| end <= payload.len() as u64)
            .ok_or_else(|| {
                corrupt(format!(
                    "{}: bytes {}..+{bytes_len} past payload end {}",
                    e.name,
                    e.byte_offset,
                    payload.len()
                ))
            })?;
        spans.push((e.byte_offset, end, e.name.as_str()));
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(corrupt(format!("{} overlaps {}", pair[1].2, pair[0].2)));
        }
    }
    manifest
        .into_iter()
        .map(|e| {
            let start = e.byte_offset as usize;
            let mut t = Tensor::zeros(&e.shape);
            let mut slice = &payload[start..];
            wire::take_f32s(&mut slice, t.data_mut())?;
            Ok((e.name, t))
        })
        .collect()
}

/// Fills a model for `config` from named tensors, requiring an exact
/// one-to-one match of names and shapes.
pub fn params_from_tensors(config: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(config)?;
    let mut by_name: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let mut missing = Vec::new();
    let mut mismatch = None;
    params.visit_params_mut(&mut |name, slot| match by_name.remove(&name) {
        Some(t) if t.shape() == slot.shape() => *slot = t,
        Some(t) => {
            mismatch.get_or_insert(format!("{name}: shape {:?}, model expects {:?}", t.shape(), slot.shape()));
        }
        None => missing.push(name),
    });
    if !by_name.is_empty() {
        return Err(Error::UnknownTensors(by_name.into_keys().collect()));
    }
    if !missing.is_empty() {
        return Err(Error::MissingTensors(missing));
    }
    if let Some(m) = mismatch {
        return Err(Error::CorruptArchive(m));
    }
    Ok(params)
}

pub fn save_archive(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode(&params.named_tensors()))?;
    Ok(())
}

pub fn load_archive(path: &Path, config: &ModelConfig) -> Result<ModelParams> {
    params_from_tensors(config, decode(&fs::read(path)?)?)
}
