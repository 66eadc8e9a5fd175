//! Self-describing checkpoint container.
//!
//! A checkpoint is one safetensors file. Tensors are named
//! `<group>/p/<param>` (trainable parameters) or `<group>/b/<buffer>`
//! (batch-norm running statistics). The safetensors metadata entry
//! `jointscope` holds a JSON [`CheckpointMeta`]: encoder spec, architecture,
//! normalization constants and the probe-embedding ledger used to verify
//! that a loaded encoder reproduces the embeddings recorded at save time.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{EncoderSpec, Encoder};
use super::layers::ParamGroup;
use super::Architecture;
use crate::error::{Error, Result};
use crate::preprocess::Normalizer;
use crate::seed;

const META_KEY: &str = "jointscope";
pub const FORMAT_VERSION: u32 = 1;
pub const PROBE_COUNT: usize = 16;
const PROBE_SEED: u64 = 0x5eed0f9b0be;
/// Maximum absolute deviation tolerated when replaying probe embeddings.
pub const PROBE_TOLERANCE: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Pretrained encoder(s) only.
    Backbone,
    /// A complete network.
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeLedger {
    pub input_px: usize,
    /// Group name → one embedding per probe image.
    pub embeddings: BTreeMap<String, Vec<Vec<f32>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub encoder_spec: EncoderSpec,
    #[serde(default)]
    pub architecture: Option<Architecture>,
    #[serde(default)]
    pub normalizer: Option<Normalizer>,
    #[serde(default)]
    pub probe_ledger: Option<ProbeLedger>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub groups: BTreeMap<String, ParamGroup>,
}

/// Sixteen fixed smooth-pattern images used to fingerprint encoders.
pub fn probe_images(input_px: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut rng = seed::rng(PROBE_SEED);
    let mut data = Vec::with_capacity(PROBE_COUNT * 3 * input_px * input_px);
    for _ in 0..PROBE_COUNT {
        for _ in 0..3 {
            let waves: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.5..4.0),
                        rng.random_range(0.5..4.0),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.3..1.0),
                    )
                })
                .collect();
            for y in 0..input_px {
                for x in 0..input_px {
                    let (u, v) = (x as f64 / input_px as f64, y as f64 / input_px as f64);
                    let s: f64 = waves
                        .iter()
                        .map(|&(fx, fy, ph, a)| a * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin())
                        .sum();
                    data.push(s as f32);
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (PROBE_COUNT, 3, input_px, input_px), device)?.to_dtype(dtype)?)
}

/// Eval-mode embeddings of the probe images.
pub fn probe_embeddings(encoder: &Encoder, input_px: usize) -> Result<Vec<Vec<f32>>> {
    let first = encoder.params().params.values().next().expect("encoder has params");
    let x = probe_images(input_px, first.dtype(), first.device())?;
    Ok(encoder
        .forward(&x, false)?
        .to_dtype(DType::F32)?
        .to_vec2::<f32>()?)
}

/// Replays the ledger entry for `group` against `encoder`.
pub fn verify_probes(ledger: &ProbeLedger, group: &str, encoder: &Encoder) -> Result<()> {
    let Some(expected) = ledger.embeddings.get(group) else {
        return Ok(());
    };
    let got = probe_embeddings(encoder, ledger.input_px)?;
    let worst = expected
        .iter()
        .flatten()
        .zip(got.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0f32, f32::max);
    if expected.len() != got.len() || worst > PROBE_TOLERANCE {
        return Err(Error::checkpoint(
            format!("probe embeddings deviate by {worst:e}"),
            vec![group.to_string()],
        ));
    }
    Ok(())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (group, params) in &self.groups {
            for (name, var) in &params.params {
                tensors.push((format!("{group}/p/{name}"), var.as_tensor().to_dtype(DType::F32)?));
            }
            for (name, var) in &params.buffers {
                tensors.push((format!("{group}/b/{name}"), var.as_tensor().to_dtype(DType::F32)?));
            }
        }
        let mut meta = HashMap::new();
        meta.insert(META_KEY.to_string(), serde_json::to_string(&self.meta)?);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        safetensors::serialize_to_file(tensors, Some(meta), path)?;
        Ok(())
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::checkpoint("missing jointscope metadata", vec![]))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::checkpoint(
                format!("unsupported format version {}", meta.format_version),
                vec![],
            ));
        }
        let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
        let mut groups: BTreeMap<String, ParamGroup> = BTreeMap::new();
        for (key, t) in tensors {
            let mut parts = key.splitn(3, '/');
            let (Some(group), Some(kind), Some(name)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::checkpoint(format!("malformed tensor name `{key}`"), vec![]));
            };
            let var = Var::from_tensor(&t.to_dtype(dtype)?)?;
            let g = groups.entry(group.to_string()).or_default();
            match kind {
                "p" => g.params.insert(name.to_string(), var),
                "b" => g.buffers.insert(name.to_string(), var),
                _ => return Err(Error::checkpoint(format!("malformed tensor name `{key}`"), vec![])),
            };
        }
        Ok(Checkpoint { meta, groups })
    }

    /// Checks that the stored encoder is interchangeable with `spec`.
    pub fn check_spec(&self, spec: &EncoderSpec) -> Result<()> {
        let stored = &self.meta.encoder_spec;
        if stored.backbone != spec.backbone || stored.feature_dim != spec.feature_dim {
            let groups = self
                .groups
                .keys()
                .filter(|g| g.ends_with("encoder"))
                .cloned()
                .collect();
            return Err(Error::checkpoint(
                format!(
                    "checkpoint encoder is {:?}/{} but network wants {:?}/{}",
                    stored.backbone, stored.feature_dim, spec.backbone, spec.feature_dim
                ),
                groups,
            ));
        }
        Ok(())
    }
}
