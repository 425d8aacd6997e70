//! Checkpoint persistence: a JSON manifest describing the model plus a raw
//! little-endian `f32` parameter blob at `<path>.blob`.
//!
//! The split keeps the numeric payload diff-able at the byte level while the
//! manifest stays readable. The manifest's parameter index must partition the
//! blob exactly — disjoint, in-bounds, and covering every byte — so that
//! loading and re-saving reproduces both files byte-identically.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::{c, Real};
use crate::model::{ModelConfig, SteerModel};
use crate::ncp::WiringSpec;
use crate::trainer::TrainConfig;
use crate::util::atomic_write;

pub const SCHEMA_VERSION: u32 = 1;

/// One named tensor's slice of the blob. Offsets and lengths are in `f32`
/// elements, not bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub wiring: WiringSpec,
    pub train: TrainConfig,
    /// Seed the model was constructed from (also recorded in `wiring`).
    pub seed: u64,
    pub params: Vec<ParamEntry>,
}

/// The blob lives next to the manifest under the same name plus `.blob`.
pub fn blob_path(path: &Path) -> PathBuf {
    PathBuf::from(format!("{}.blob", path.display()))
}

/// Serializes the model to `path` (manifest) and `path.blob` (parameters).
/// Both writes are atomic. Parameters are downcast to `f32` regardless of the
/// model's scalar type.
pub fn save_checkpoint<F: Real>(
    path: &Path,
    model: &SteerModel<F>,
    train: &TrainConfig,
) -> Result<Manifest> {
    let mut scratch = model.clone();
    let mut params = Vec::new();
    let mut blob = Vec::<u8>::new();
    let mut offset = 0u64;
    scratch.for_each_tensor_mut(&mut |name, data| {
        params.push(ParamEntry {
            name: name.to_string(),
            offset,
            len: data.len() as u64,
        });
        offset += data.len() as u64;
        let mut bytes = vec![0u8; data.len() * 4];
        let floats: Vec<f32> = data.iter().map(|v| Real::to_f64(*v) as f32).collect();
        LittleEndian::write_f32_into(&floats, &mut bytes);
        blob.extend_from_slice(&bytes);
    });
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        model: model.cfg,
        wiring: model.wiring.clone(),
        train: *train,
        seed: model.wiring.seed,
        params,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    atomic_write(path, &json)?;
    atomic_write(&blob_path(path), &blob)?;
    Ok(manifest)
}

/// Loads a checkpoint saved by [`save_checkpoint`]. The manifest's parameter
/// index is validated before any value is copied: every range must be
/// in-bounds, ranges must not overlap, and together they must cover the blob
/// exactly. Violations name the offending parameter.
pub fn load_checkpoint(path: &Path) -> Result<(SteerModel<f32>, Manifest)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(path)?)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::integrity(format!(
            "unsupported checkpoint schema version {} (expected {})",
            manifest.schema_version, SCHEMA_VERSION
        )));
    }
    let blob = fs::read(blob_path(path))?;
    if blob.len() % 4 != 0 {
        return Err(Error::integrity(format!(
            "parameter blob length {} is not a multiple of 4",
            blob.len()
        )));
    }
    let total = (blob.len() / 4) as u64;

    for e in &manifest.params {
        if e.offset.checked_add(e.len).map_or(true, |end| end > total) {
            return Err(Error::integrity(format!(
                "parameter {} extends past the end of the blob ({} elements)",
                e.name, total
            )));
        }
    }
    let mut spans: Vec<&ParamEntry> = manifest.params.iter().collect();
    spans.sort_by_key(|e| e.offset);
    for pair in spans.windows(2) {
        if pair[0].offset + pair[0].len > pair[1].offset {
            return Err(Error::integrity(format!(
                "parameter {} overlaps parameter {} in the blob",
                pair[0].name, pair[1].name
            )));
        }
    }
    let covered: u64 = manifest.params.iter().map(|e| e.len).sum();
    if covered != total {
        return Err(Error::integrity(format!(
            "manifest indexes {covered} elements but the blob holds {total}"
        )));
    }

    let index: HashMap<&str, &ParamEntry> = manifest
        .params
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    if index.len() != manifest.params.len() {
        return Err(Error::integrity("duplicate parameter name in manifest"));
    }

    let mut model = SteerModel::<f32>::from_parts(manifest.model, manifest.wiring.clone())?;
    let mut failure: Option<Error> = None;
    let mut visited = 0usize;
    model.for_each_tensor_mut(&mut |name, data| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = index.get(name) else {
            failure = Some(Error::integrity(format!(
                "checkpoint manifest is missing parameter {name}"
            )));
            return;
        };
        if entry.len as usize != data.len() {
            failure = Some(Error::integrity(format!(
                "parameter {name} has {} elements in the manifest but {} in the model",
                entry.len,
                data.len()
            )));
            return;
        }
        visited += 1;
        let start = entry.offset as usize * 4;
        let end = start + entry.len as usize * 4;
        LittleEndian::read_f32_into(&blob[start..end], data);
    });
    if let Some(err) = failure {
        return Err(err);
    }
    if visited != manifest.params.len() {
        let extra = {
            let mut probe = model.clone();
            let mut seen = Vec::new();
            probe.for_each_tensor_mut(&mut |name, _| seen.push(name.to_string()));
            manifest
                .params
                .iter()
                .find(|e| !seen.iter().any(|s| s == &e.name))
                .map(|e| e.name.clone())
                .unwrap_or_default()
        };
        return Err(Error::integrity(format!(
            "manifest names unknown parameter {extra}"
        )));
    }
    Ok((model, manifest))
}

/// Convenience for audits that need the parameters at `f64`: widens a loaded
/// `f32` model without touching the stored bytes.
pub fn widen_model(model: &SteerModel<f32>) -> Result<SteerModel<f64>> {
    let mut wide = SteerModel::<f64>::from_parts(model.cfg, model.wiring.clone())?;
    let mut values = Vec::<(String, Vec<f32>)>::new();
    let mut narrow = model.clone();
    narrow.for_each_tensor_mut(&mut |name, data| {
        values.push((name.to_string(), data.to_vec()));
    });
    let mut it = values.into_iter();
    wide.for_each_tensor_mut(&mut |_, data| {
        let (_, src) = it.next().expect("same tensor order");
        for (d, s) in data.iter_mut().zip(src) {
            *d = c::<f64>(s as f64);
        }
    });
    Ok(wide)
}
