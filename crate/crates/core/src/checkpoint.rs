//! On-disk format: `<stem>.json` manifest (config plus a tensor registry of
//! name, shape and byte offset) next to `<stem>.bin`, a little-endian f32 blob.
//!
//! Adapter checkpoints use the same format under the `adapters.` namespace
//! and also carry the retrained `embed.token` and `lm_head`, so a base model
//! and an adapter checkpoint load independently.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterMode, AdapterSet, LayerAdapter, LoraPair, PfeifferAdapter};
use crate::error::{Error, Result};
use crate::model::params::{LM_HEAD, TOKEN_EMBEDDING};
use crate::model::{ModelConfig, TransformerParams};
use crate::numerics::Tensor2D;
use crate::scalar::Scalar;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CheckpointKind {
    Model,
    Adapters {
        mode: AdapterMode,
        lora_scale: f64,
        trainable_embeddings: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(flatten)]
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub blob: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn write<T: Scalar>(stem: &Path, kind: CheckpointKind, config: &ModelConfig, tensors: &[(String, &Tensor2D<T>)]) -> Result<String> {
    let (json_path, bin_path) = paths(stem);
    if let Some(parent) = json_path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [t.rows(), t.cols()],
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_f32_bits().to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind,
        config: config.clone(),
        blob: bin_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        tensors: entries,
    };
    fs::write(&bin_path, &blob)?;
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&json_path, &text)?;
    Ok(hash_parts(text.as_bytes(), &blob))
}

fn hash_parts(manifest: &[u8], blob: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(manifest);
    h.update(blob);
    hex::encode(h.finalize())
}

fn read<T: Scalar>(stem: &Path) -> Result<(Manifest, BTreeMap<String, Tensor2D<T>>)> {
    let (json_path, _) = paths(stem);
    if !json_path.exists() {
        return Err(ckpt_err(&json_path, "not found"));
    }
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(&json_path)?).map_err(|e| ckpt_err(&json_path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ckpt_err(&json_path, format!("unsupported format version {}", manifest.format_version)));
    }
    let bin_path = json_path.with_file_name(&manifest.blob);
    let blob = fs::read(&bin_path).map_err(|e| ckpt_err(&bin_path, e.to_string()))?;
    if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(ckpt_err(&bin_path, "blob hash does not match manifest"));
    }
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let n = e.shape[0] * e.shape[1];
        let end = e.offset + 4 * n;
        let bytes = blob
            .get(e.offset..end)
            .ok_or_else(|| ckpt_err(&bin_path, format!("tensor {} runs past the blob", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| T::from_f32_bits(u32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        let t = Tensor2D::from_vec(e.shape[0], e.shape[1], data).map_err(|err| ckpt_err(&bin_path, err.to_string()))?;
        tensors.insert(e.name.clone(), t);
    }
    Ok((manifest, tensors))
}

/// Writes a base model; returns the checkpoint hash.
pub fn save_model<T: Scalar>(params: &TransformerParams<T>, stem: &Path) -> Result<String> {
    write(stem, CheckpointKind::Model, &params.config, &params.named_tensors())
}

pub fn load_model<T: Scalar>(stem: &Path) -> Result<TransformerParams<T>> {
    let (manifest, mut tensors) = read::<T>(stem)?;
    if manifest.kind != CheckpointKind::Model {
        return Err(ckpt_err(stem, "not a model checkpoint"));
    }
    let mut params = TransformerParams::<T>::init(&manifest.config, 0)?;
    for name in params.tensor_names() {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| ckpt_err(stem, format!("missing tensor {name}")))?;
        params.set_tensor(&name, t)?;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(ckpt_err(stem, format!("unexpected tensor {extra}")));
    }
    Ok(params)
}

/// Writes an adapter set together with the adapted model's input and output
/// embeddings; returns the checkpoint hash.
pub fn save_adapters<T: Scalar>(adapters: &AdapterSet<T>, adapted: &TransformerParams<T>, stem: &Path) -> Result<String> {
    let lora_scale = adapters
        .layers
        .iter()
        .find_map(|a| match a {
            LayerAdapter::Lora { ffn_in, .. } => Some(ffn_in.scale.as_f64()),
            LayerAdapter::Pfeiffer(_) => None,
        })
        .unwrap_or(1.0);
    let mut tensors = adapters.named_tensors();
    tensors.push((TOKEN_EMBEDDING.to_string(), &adapted.token_embedding));
    tensors.push((LM_HEAD.to_string(), &adapted.lm_head));
    write(
        stem,
        CheckpointKind::Adapters {
            mode: adapters.mode,
            lora_scale,
            trainable_embeddings: adapters.trainable_embeddings,
        },
        &adapted.config,
        &tensors,
    )
}

/// Loads an adapter checkpoint onto `base`, returning the adapters and a copy
/// of `base` with the adapted embeddings swapped in.
pub fn load_adapters<T: Scalar>(stem: &Path, base: &TransformerParams<T>) -> Result<(AdapterSet<T>, TransformerParams<T>)> {
    let (manifest, mut tensors) = read::<T>(stem)?;
    let CheckpointKind::Adapters {
        mode,
        lora_scale,
        trainable_embeddings,
    } = manifest.kind
    else {
        return Err(ckpt_err(stem, "not an adapter checkpoint"));
    };
    if manifest.config != base.config {
        return Err(ckpt_err(stem, "adapter checkpoint was trained on a different model configuration"));
    }
    let mut take = |name: String| tensors.remove(&name).ok_or_else(|| ckpt_err(stem, format!("missing tensor {name}")));
    let mut layers = Vec::with_capacity(base.config.n_layers);
    for l in 0..base.config.n_layers {
        layers.push(match mode {
            AdapterMode::Pfeiffer => {
                LayerAdapter::Pfeiffer(PfeifferAdapter::new(take(format!("adapters.{l}.w1"))?, take(format!("adapters.{l}.w2"))?)?)
            }
            AdapterMode::Lora => LayerAdapter::Lora {
                ffn_in: LoraPair::new(
                    take(format!("adapters.{l}.lora1.down"))?,
                    take(format!("adapters.{l}.lora1.up"))?,
                    T::of(lora_scale),
                )?,
                ffn_out: LoraPair::new(
                    take(format!("adapters.{l}.lora2.down"))?,
                    take(format!("adapters.{l}.lora2.up"))?,
                    T::of(lora_scale),
                )?,
            },
        });
    }
    let mut adapted = base.clone();
    adapted.set_tensor(TOKEN_EMBEDDING, take(TOKEN_EMBEDDING.to_string())?)?;
    adapted.set_tensor(LM_HEAD, take(LM_HEAD.to_string())?)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(ckpt_err(stem, format!("unexpected tensor {extra}")));
    }
    let set = AdapterSet {
        mode,
        layers,
        trainable_embeddings,
    };
    set.validate_for(&adapted.config)?;
    Ok((set, adapted))
}

/// SHA-256 over the manifest text and the blob.
pub fn checkpoint_hash(stem: &Path) -> Result<String> {
    let (json_path, _) = paths(stem);
    let manifest = fs::read(&json_path).map_err(|e| ckpt_err(&json_path, e.to_string()))?;
    let parsed: Manifest = serde_json::from_slice(&manifest).map_err(|e| ckpt_err(&json_path, e.to_string()))?;
    let bin_path = json_path.with_file_name(&parsed.blob);
    let blob = fs::read(&bin_path).map_err(|e| ckpt_err(&bin_path, e.to_string()))?;
    Ok(hash_parts(&manifest, &blob))
}

pub fn exists(stem: &Path) -> bool {
    paths(stem).0.exists()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adapters, AdapterConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ffn: 32,
            vocab_size: 20,
            max_seq_len: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = TransformerParams::<f32>::init(&tiny(), 4).unwrap();
        let h1 = save_model(&p, &dir.path().join("base")).unwrap();
        let q = load_model::<f32>(&dir.path().join("base")).unwrap();
        for ((n, a), (_, b)) in p.named_tensors().into_iter().zip(q.named_tensors()) {
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{n}");
        }
        assert_eq!(h1, checkpoint_hash(&dir.path().join("base")).unwrap());
    }

    #[test]
    fn adapters_round_trip_in_both_modes() {
        let dir = tempfile::tempdir().unwrap();
        let base = TransformerParams::<f32>::init(&tiny(), 4).unwrap();
        let mut adapted = base.clone();
        adapted.lm_head.data_mut()[0] = 9.0;
        for mode in [AdapterMode::Pfeiffer, AdapterMode::Lora] {
            let cfg = AdapterConfig { mode, reduction_factor: 4, lora_rank: 2, ..AdapterConfig::default() };
            let mut a = init_adapters::<f32>(&base.config, &cfg, 1).unwrap();
            for (_, t) in a.named_tensors_mut() {
                t.data_mut()[0] = 0.5;
            }
            let stem = dir.path().join(format!("{mode:?}"));
            save_adapters(&a, &adapted, &stem).unwrap();
            let (b, q) = load_adapters::<f32>(&stem, &base).unwrap();
            assert_eq!(a, b);
            assert_eq!(q, adapted);
            assert!(load_model::<f32>(&stem).is_err());
        }
    }

    #[test]
    fn missing_and_corrupt_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        assert!(matches!(load_model::<f32>(&stem), Err(Error::Checkpoint { .. })));
        let p = TransformerParams::<f32>::init(&tiny(), 4).unwrap();
        save_model(&p, &stem).unwrap();
        let mut blob = fs::read(stem.with_extension("bin")).unwrap();
        blob[3] ^= 1;
        fs::write(stem.with_extension("bin"), blob).unwrap();
        assert!(matches!(load_model::<f32>(&stem), Err(Error::Checkpoint { .. })));
    }
}
