//! Model persistence: a JSON manifest plus a sidecar blob of little-endian f64
//! values. Every blob entry carries its shape, offset and SHA-256 so a damaged
//! file is reported by entry name.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{QuantError, Result};
use crate::numcore::Tensor;
use crate::quantize::QuantizerSpec;

use super::layers::{FirstLastPolicy, LayerDesc, ModelGraph, PoolStrategy, ResidualStrategy, SiteState};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values (not bytes) from the start of the blob.
    pub offset: usize,
    pub len: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantEntry {
    pub site: String,
    pub spec: QuantizerSpec,
    pub bits: u32,
    pub raw_min: String,
    pub raw_max: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub blob: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub residual_strategy: ResidualStrategy,
    pub quantize_skip: bool,
    pub pool_strategy: PoolStrategy,
    pub first_last_policy: FirstLastPolicy,
    pub baseline_accuracy: Option<f64>,
    pub layers: Vec<LayerDesc>,
    pub entries: Vec<BlobEntry>,
    pub quantizers: Vec<QuantEntry>,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Serializes `model` into a manifest and blob byte buffer.
pub fn encode_model(model: &ModelGraph, blob_name: &str) -> Result<(Manifest, Vec<u8>)> {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut push = |name: String, t: &Tensor| {
        let start = bytes.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(BlobEntry {
            name,
            shape: t.shape().to_vec(),
            offset: start / 8,
            len: t.numel(),
            sha256: digest(&bytes[start..]),
        });
    };
    for (name, t) in &model.params {
        push(name.clone(), t);
    }
    let mut quantizers = Vec::new();
    for (site, st) in &model.quant {
        let (lo, hi) = (format!("quant/{site}/raw_min"), format!("quant/{site}/raw_max"));
        push(lo.clone(), &st.raw_min);
        push(hi.clone(), &st.raw_max);
        quantizers.push(QuantEntry {
            site: site.clone(),
            spec: st.spec,
            bits: st.bits(),
            raw_min: lo,
            raw_max: hi,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        blob: blob_name.to_string(),
        input_shape: model.input_shape.clone(),
        classes: model.classes,
        residual_strategy: model.residual_strategy,
        quantize_skip: model.quantize_skip,
        pool_strategy: model.pool_strategy,
        first_last_policy: model.first_last_policy,
        baseline_accuracy: model.baseline_accuracy,
        layers: model.layers.clone(),
        entries,
        quantizers,
    };
    Ok((manifest, bytes))
}

/// Parses manifest text, checking the format version before the body.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| QuantError::ManifestParse {
        version: 0,
        reason: e.to_string(),
    })?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| QuantError::ManifestParse {
            version: 0,
            reason: "missing format_version".into(),
        })? as u32;
    if version != FORMAT_VERSION {
        return Err(QuantError::ManifestParse {
            version,
            reason: format!("unsupported format version (this build reads {FORMAT_VERSION})"),
        });
    }
    serde_json::from_value(value).map_err(|e| QuantError::ManifestParse {
        version,
        reason: e.to_string(),
    })
}

/// Rebuilds a model from a parsed manifest and its blob bytes.
pub fn decode_model(manifest: &Manifest, bytes: &[u8]) -> Result<ModelGraph> {
    let corrupt = |entry: &str, reason: String| QuantError::CorruptModel {
        entry: entry.to_string(),
        reason,
    };
    let mut tensors: IndexMap<String, Tensor> = IndexMap::new();
    for e in &manifest.entries {
        if e.shape.iter().product::<usize>() != e.len {
            return Err(corrupt(&e.name, format!("shape {:?} does not hold {} values", e.shape, e.len)));
        }
        let (start, end) = (e.offset * 8, (e.offset + e.len) * 8);
        if end > bytes.len() {
            return Err(corrupt(
                &e.name,
                format!("blob has {} bytes, entry needs bytes {start}..{end}", bytes.len()),
            ));
        }
        let raw = &bytes[start..end];
        if digest(raw) != e.sha256 {
            return Err(corrupt(&e.name, "checksum mismatch".into()));
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    let mut model = ModelGraph {
        layers: manifest.layers.clone(),
        residual_strategy: manifest.residual_strategy,
        quantize_skip: manifest.quantize_skip,
        pool_strategy: manifest.pool_strategy,
        first_last_policy: manifest.first_last_policy,
        input_shape: manifest.input_shape.clone(),
        classes: manifest.classes,
        params: IndexMap::new(),
        quant: IndexMap::new(),
        baseline_accuracy: manifest.baseline_accuracy,
    };
    model.validate()?;
    for (name, shape) in model.param_shapes() {
        let t = tensors
            .shift_remove(&name)
            .ok_or_else(|| corrupt(&name, "missing from blob".into()))?;
        if t.shape() != shape.as_slice() {
            return Err(corrupt(&name, format!("shape {:?}, layer expects {shape:?}", t.shape())));
        }
        model.params.insert(name, t);
    }
    for q in &manifest.quantizers {
        let mut take = |n: &str| tensors.shift_remove(n).ok_or_else(|| corrupt(n, "missing from blob".into()));
        let (lo, hi) = (take(&q.raw_min)?, take(&q.raw_max)?);
        let st = SiteState::new(q.spec, lo, hi, q.bits).map_err(|e| corrupt(&q.site, e.to_string()))?;
        model.quant.insert(q.site.clone(), st);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(corrupt(extra, "entry not referenced by any layer or quantizer".into()));
    }
    Ok(model)
}

/// Writes `<path>` (manifest) and `<path>.bin` (blob).
pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let blob = blob_path(path);
    let blob_name = blob
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| QuantError::Config(format!("bad model path {}", path.display())))?
        .to_string();
    let (manifest, bytes) = encode_model(model, &blob_name)?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| QuantError::Serde(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| QuantError::io(dir, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| QuantError::io(path, e))?;
    fs::write(&blob, bytes).map_err(|e| QuantError::io(&blob, e))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| QuantError::io(path, e))?;
    let manifest = parse_manifest(&text)?;
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| QuantError::io(&blob, e))?;
    decode_model(&manifest, &bytes)
}
