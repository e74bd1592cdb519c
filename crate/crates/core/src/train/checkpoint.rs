//! Checkpoint container: a magic header, a JSON manifest describing every
//! tensor, then raw little-endian `f64` blobs in manifest order. The format
//! is exact — saving and loading reproduces every bit, including the
//! memory module's stored patterns and weight matrix.

use std::path::Path;

use ndarray::{Array1, Array2, IxDyn};

use crate::autodiff::Arr;
use crate::error::{Error, Result};
use crate::hopfield::HopfieldMemory;
use crate::train::model::{Model, ModelConfig, ModelId};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPKMEM01";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Shape record for one serialized tensor.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct BlobMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Everything needed to rebuild the model before the blobs are applied.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub model_id: ModelId,
    pub seed: u64,
    pub config: ModelConfig,
    /// Free-form run metadata (training hyperparameters, epoch, metrics).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
    pub params: Vec<BlobMeta>,
}

/// Write `model` to `path`, with optional run metadata in the manifest.
pub fn save_checkpoint(path: &Path, model: &Model, extra: Option<serde_json::Value>) -> Result<()> {
    let tensors = model.all_tensors();
    let mut params: Vec<BlobMeta> = tensors
        .iter()
        .map(|t| BlobMeta {
            name: t.name.clone(),
            shape: t.data.shape().to_vec(),
        })
        .collect();
    if let Some(mem) = &model.memory {
        params.push(BlobMeta {
            name: "memory.patterns".into(),
            shape: vec![mem.len(), mem.dim()],
        });
        params.push(BlobMeta {
            name: "memory.weights".into(),
            shape: vec![mem.dim(), mem.dim()],
        });
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        model_id: model.id,
        seed: model.seed,
        config: model.cfg.clone(),
        extra,
        params,
    };
    let json = serde_json::to_vec(&manifest)?;

    let blob_len: usize = manifest.params.iter().map(|m| m.shape.iter().product::<usize>()).sum();
    let mut out = Vec::with_capacity(12 + json.len() + 8 * blob_len);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &tensors {
        for &v in t.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(mem) = &model.memory {
        for p in mem.patterns() {
            for &v in p.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &v in mem.weights().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a checkpoint back into a freshly built model.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointManifest)> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::DatasetMissing {
                path: path.to_path_buf(),
                hint: "no checkpoint at this path; train a model first".into(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadCheckpoint(
            "missing or wrong magic header".into(),
        ));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let blobs_at = 12 + mlen;
    if bytes.len() < blobs_at {
        return Err(Error::BadCheckpoint(
            "manifest extends past the end of the file".into(),
        ));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[12..blobs_at])?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::BadCheckpoint(format!(
            "unsupported version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }

    let mut model = Model::build(manifest.model_id, &manifest.config, manifest.seed)?;
    let mut offset = blobs_at;
    let mut mem_patterns: Option<(Vec<usize>, Vec<f64>)> = None;
    let mut mem_weights: Option<(Vec<usize>, Vec<f64>)> = None;
    for meta in &manifest.params {
        let n: usize = meta.shape.iter().product();
        let end = offset
            .checked_add(8 * n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::BadCheckpoint(format!("blob '{}' is truncated", meta.name)))?;
        let vals: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset = end;
        match meta.name.as_str() {
            "memory.patterns" => mem_patterns = Some((meta.shape.clone(), vals)),
            "memory.weights" => mem_weights = Some((meta.shape.clone(), vals)),
            name => {
                let arr = Arr::from_shape_vec(IxDyn(&meta.shape), vals)
                    .map_err(|_| Error::BadCheckpoint(format!("blob '{name}' has a bad shape")))?;
                let tensor = model
                    .all_tensors_mut()
                    .into_iter()
                    .find(|t| t.name == name)
                    .ok_or_else(|| {
                        Error::BadCheckpoint(format!("tensor '{name}' unknown to this variant"))
                    })?;
                tensor.replace(arr)?;
            }
        }
    }
    if offset != bytes.len() {
        return Err(Error::BadCheckpoint(
            "trailing bytes after the last blob".into(),
        ));
    }

    match (&mut model.memory, mem_patterns, mem_weights) {
        (Some(slot), Some((pshape, pvals)), Some((wshape, wvals))) => {
            let dim = slot.dim();
            if pshape.len() != 2 || pshape[1] != dim || wshape != [dim, dim] {
                return Err(Error::BadCheckpoint(format!(
                    "memory blobs sized {pshape:?}/{wshape:?} do not fit dimension {dim}"
                )));
            }
            let patterns: Vec<Array1<f64>> = pvals
                .chunks_exact(dim)
                .map(|c| Array1::from_vec(c.to_vec()))
                .collect();
            if patterns.len() != pshape[0] {
                return Err(Error::BadCheckpoint("pattern blob count mismatch".into()));
            }
            let weights = Array2::from_shape_vec((dim, dim), wvals)
                .map_err(|_| Error::BadCheckpoint("weight blob size mismatch".into()))?;
            *slot = HopfieldMemory::from_parts(dim, patterns, weights)?;
        }
        (None, None, None) => {}
        _ => {
            return Err(Error::BadCheckpoint(
                "memory blobs do not match the model variant".into(),
            ))
        }
    }
    Ok((model, manifest))
}

// ───────────────────────── tests ─────────────────────────
