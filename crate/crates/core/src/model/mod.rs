//! Global/local dual-encoder network.
//!
//! For a hand image `X` with joint patches `x_1 … x_N` the network computes,
//! per joint `j`,
//!
//! ```text
//! ŷ_j = sigmoid(head([global_ffn(G(X)) ; local_ffn(L(x_j))]))
//! ```
//!
//! where `G` and `L` are the global and local encoders and `[a ; b]` is
//! concatenation. `G(X)` is computed once per image and shared by every
//! joint; the head's weights are shared across joints.

mod backbone;
mod checkpoint;
mod layers;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

pub use candle_core::DType;

pub use backbone::{copy_group, BackboneKind, Encoder, EncoderSpec};
pub use checkpoint::{
    probe_embeddings, probe_images, verify_probes, Checkpoint, CheckpointKind, CheckpointMeta,
    ProbeLedger, FORMAT_VERSION, PROBE_COUNT, PROBE_TOLERANCE,
};
pub use layers::{global_avg_pool, Init, Linear, Mlp, ParamGroup};

use crate::error::{Error, Result};
use crate::preprocess::{Normalizer, PreparedSample};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Whole-hand and joint-patch streams fused by concatenation.
    #[default]
    GlobalLocal,
    /// Joint-patch stream only; the head sees `ffn_dim` inputs.
    LocalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    GlobalEncoder,
    LocalEncoder,
    GlobalFfn,
    LocalFfn,
    Head,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::GlobalEncoder,
        Group::LocalEncoder,
        Group::GlobalFfn,
        Group::LocalFfn,
        Group::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::GlobalEncoder => "global_encoder",
            Group::LocalEncoder => "local_encoder",
            Group::GlobalFfn => "global_ffn",
            Group::LocalFfn => "local_ffn",
            Group::Head => "head",
        }
    }

    pub fn is_encoder(self) -> bool {
        matches!(self, Group::GlobalEncoder | Group::LocalEncoder)
    }
}

/// Where encoder weights come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightsSource {
    Random { seed: u64 },
    PretrainedCheckpoint(PathBuf),
}

#[derive(Debug, Clone)]
struct Heads {
    global_ffn: Option<(Mlp, ParamGroup)>,
    local_ffn: (Mlp, ParamGroup),
    head: (Mlp, ParamGroup),
}

impl Heads {
    fn new(spec: &EncoderSpec, arch: Architecture, seed: u64, dtype: DType, device: &Device) -> Result<Heads> {
        let build = |group: Group, input: usize, output: usize| -> Result<(Mlp, ParamGroup)> {
            let mut init = Init::new(seed::derive_indexed(seed, "init/heads", group as u64), dtype, device);
            let mlp = Mlp::new(&mut init, "mlp", input, spec.ffn_dim, output)?;
            Ok((mlp, init.finish()))
        };
        let fused = match arch {
            Architecture::GlobalLocal => 2 * spec.ffn_dim,
            Architecture::LocalOnly => spec.ffn_dim,
        };
        Ok(Heads {
            global_ffn: match arch {
                Architecture::GlobalLocal => Some(build(Group::GlobalFfn, spec.feature_dim, spec.ffn_dim)?),
                Architecture::LocalOnly => None,
            },
            local_ffn: build(Group::LocalFfn, spec.feature_dim, spec.ffn_dim)?,
            head: build(Group::Head, fused, 1)?,
        })
    }
}

/// A batch of prepared samples as tensors.
pub struct SampleBatch {
    /// `B × 3 × P × P`.
    pub global: Tensor,
    /// `(B·N) × 3 × P × P`, joint-major within each sample.
    pub local: Tensor,
    /// `B × N`, 0/1 (0 where unlabeled).
    pub targets: Tensor,
    /// `B × N`, 1 where labeled.
    pub mask: Tensor,
    pub batch: usize,
    pub joints: usize,
}

impl SampleBatch {
    pub fn new(samples: &[&PreparedSample], dtype: DType, device: &Device) -> Result<SampleBatch> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Config("empty batch".into()))?;
        let joints = first.local_patches.len();
        let px = first.global_image.width();
        let lpx = first.local_patches.first().map_or(px, |p| p.width());
        let mut global = Vec::with_capacity(samples.len() * 3 * px * px);
        let mut local = Vec::with_capacity(samples.len() * joints * 3 * lpx * lpx);
        let mut targets = Vec::with_capacity(samples.len() * joints);
        let mut mask = Vec::with_capacity(samples.len() * joints);
        for s in samples {
            if s.local_patches.len() != joints || s.global_image.width() != px {
                return Err(Error::Config("samples in a batch disagree in shape".into()));
            }
            global.extend_from_slice(s.global_image.data());
            for p in &s.local_patches {
                local.extend_from_slice(p.data());
            }
            for l in &s.labels {
                targets.push(f32::from(l.unwrap_or(0)));
                mask.push(if l.is_some() { 1f32 } else { 0.0 });
            }
        }
        let b = samples.len();
        Ok(SampleBatch {
            global: Tensor::from_vec(global, (b, 3, px, px), device)?.to_dtype(dtype)?,
            local: Tensor::from_vec(local, (b * joints, 3, lpx, lpx), device)?.to_dtype(dtype)?,
            targets: Tensor::from_vec(targets, (b, joints), device)?.to_dtype(dtype)?,
            mask: Tensor::from_vec(mask, (b, joints), device)?.to_dtype(dtype)?,
            batch: b,
            joints,
        })
    }
}

/// Encoder outputs for a batch: `B × F` global (absent for local-only
/// networks) and `(B·N) × F` local features.
#[derive(Debug, Clone)]
pub struct Features {
    pub global: Option<Tensor>,
    pub local: Tensor,
}

#[derive(Debug, Clone)]
pub struct GlobalLocalNet {
    spec: EncoderSpec,
    arch: Architecture,
    dtype: DType,
    device: Device,
    global_encoder: Option<Encoder>,
    local_encoder: Encoder,
    heads: Heads,
    trainable: BTreeSet<Group>,
}

impl GlobalLocalNet {
    /// Randomly initialized network with every group trainable.
    pub fn new(spec: &EncoderSpec, arch: Architecture, seed: u64, dtype: DType) -> Result<Self> {
        spec.validate()?;
        let device = Device::Cpu;
        let enc_seed = |g: Group| seed::derive_indexed(seed, "init/encoder", g as u64);
        let global_encoder = match arch {
            Architecture::GlobalLocal => Some(Encoder::new(spec, enc_seed(Group::GlobalEncoder), dtype, &device)?),
            Architecture::LocalOnly => None,
        };
        let local_encoder = Encoder::new(spec, enc_seed(Group::LocalEncoder), dtype, &device)?;
        let heads = Heads::new(spec, arch, seed, dtype, &device)?;
        let mut net = GlobalLocalNet {
            spec: spec.clone(),
            arch,
            dtype,
            device,
            global_encoder,
            local_encoder,
            heads,
            trainable: BTreeSet::new(),
        };
        net.trainable = net.groups().keys().copied().collect();
        Ok(net)
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn global_encoder(&self) -> Option<&Encoder> {
        self.global_encoder.as_ref()
    }

    pub fn local_encoder(&self) -> &Encoder {
        &self.local_encoder
    }

    /// Parameter groups present in this architecture.
    pub fn groups(&self) -> BTreeMap<Group, &ParamGroup> {
        let mut out = BTreeMap::new();
        if let Some(g) = &self.global_encoder {
            out.insert(Group::GlobalEncoder, g.params());
        }
        out.insert(Group::LocalEncoder, self.local_encoder.params());
        if let Some((_, p)) = &self.heads.global_ffn {
            out.insert(Group::GlobalFfn, p);
        }
        out.insert(Group::LocalFfn, &self.heads.local_ffn.1);
        out.insert(Group::Head, &self.heads.head.1);
        out
    }

    pub fn is_trainable(&self, group: Group) -> bool {
        self.trainable.contains(&group)
    }

    pub fn trainable_groups(&self) -> &BTreeSet<Group> {
        &self.trainable
    }

    /// Marks only the FFNs and the head as trainable.
    pub fn freeze_encoders(mut self) -> Self {
        self.trainable.retain(|g| !g.is_encoder());
        self
    }

    pub fn unfreeze_all(mut self) -> Self {
        self.trainable = self.groups().keys().copied().collect();
        self
    }

    pub fn encoders_frozen(&self) -> bool {
        !self.trainable.iter().any(|g| g.is_encoder())
    }

    /// Parameters handed to the optimizer.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.groups()
            .into_iter()
            .filter(|(g, _)| self.trainable.contains(g))
            .flat_map(|(_, p)| p.vars())
            .collect()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.groups()
            .into_iter()
            .filter(|(g, _)| self.trainable.contains(g))
            .map(|(_, p)| p.num_params())
            .sum()
    }

    /// Joint checksum of both encoders.
    pub fn encoder_checksum(&self) -> Result<String> {
        let mut parts = Vec::new();
        for (g, p) in self.groups() {
            if g.is_encoder() {
                parts.push(format!("{}:{}", g.name(), p.checksum()?));
            }
        }
        Ok(parts.join(","))
    }

    /// Encoder features; batch-norm runs in training mode only for
    /// trainable encoders when `train` is set. Frozen encoder outputs are
    /// detached from the graph.
    pub fn encode(&self, global: &Tensor, local: &Tensor, train: bool) -> Result<Features> {
        let run = |enc: &Encoder, x: &Tensor, group: Group| -> Result<Tensor> {
            let trainable = self.is_trainable(group);
            let y = enc.forward(x, train && trainable)?;
            Ok(if trainable { y } else { y.detach() })
        };
        let g = match &self.global_encoder {
            Some(enc) => Some(run(enc, global, Group::GlobalEncoder)?),
            None => None,
        };
        let l = run(&self.local_encoder, local, Group::LocalEncoder)?;
        Ok(Features { global: g, local: l })
    }

    /// `B × N` logits from encoder features.
    pub fn logits_from_features(&self, features: &Features, batch: usize, joints: usize) -> Result<Tensor> {
        let local = self.heads.local_ffn.0.forward(&features.local)?;
        let fused = match (&self.heads.global_ffn, &features.global) {
            (Some((ffn, _)), Some(g)) => {
                let g = ffn.forward(g)?;
                let ffn_dim = g.dim(1)?;
                let g = g
                    .unsqueeze(1)?
                    .broadcast_as((batch, joints, ffn_dim))?
                    .reshape((batch * joints, ffn_dim))?;
                Tensor::cat(&[&g, &local], D::Minus1)?
            }
            (None, _) => local,
            (Some(_), None) => return Err(Error::Config("global features missing".into())),
        };
        Ok(self.heads.head.0.forward(&fused)?.reshape((batch, joints))?)
    }

    pub fn logits(&self, batch: &SampleBatch, train: bool) -> Result<Tensor> {
        let f = self.encode(&batch.global, &batch.local, train)?;
        self.logits_from_features(&f, batch.batch, batch.joints)
    }

    /// Per-joint probabilities for each sample, each strictly inside (0, 1).
    pub fn predict(&self, samples: &[&PreparedSample]) -> Result<Vec<Vec<f64>>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        self.check_sample(samples[0])?;
        let batch = SampleBatch::new(samples, self.dtype, &self.device)?;
        let logits = self.logits(&batch, false)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(logits
            .into_iter()
            .map(|row| row.into_iter().map(probability).collect())
            .collect())
    }

    pub fn forward(&self, sample: &PreparedSample) -> Result<Vec<f64>> {
        Ok(self.predict(&[sample])?.remove(0))
    }

    fn check_sample(&self, sample: &PreparedSample) -> Result<()> {
        if sample.global_image.channels() != 3 || sample.local_patches.iter().any(|p| p.channels() != 3) {
            return Err(Error::Config("samples must have 3 channels".into()));
        }
        if sample.local_patches.is_empty() {
            return Err(Error::Config("sample has no joint patches".into()));
        }
        Ok(())
    }

    /// Replaces encoder weights and re-initializes both FFNs and the head
    /// from `head_seed`.
    pub fn load_backbone(self, source: &WeightsSource, head_seed: u64) -> Result<Self> {
        let heads = Heads::new(&self.spec, self.arch, head_seed, self.dtype, &self.device)?;
        let trainable = self.trainable.clone();
        let mut net = match source {
            WeightsSource::Random { seed } => GlobalLocalNet::new(&self.spec, self.arch, *seed, self.dtype)?,
            WeightsSource::PretrainedCheckpoint(path) => {
                let ckpt = Checkpoint::load(path, self.dtype, &self.device)?;
                ckpt.check_spec(&self.spec)?;
                let pick = |name: &str| -> Result<&ParamGroup> {
                    ckpt.groups
                        .get(name)
                        .or_else(|| ckpt.groups.get("encoder"))
                        .ok_or_else(|| Error::checkpoint("no encoder weights", vec![name.to_string()]))
                };
                if let Some(enc) = &self.global_encoder {
                    let src = pick(Group::GlobalEncoder.name())?;
                    enc.load_from(src)?;
                    if let Some(ledger) = &ckpt.meta.probe_ledger {
                        let key = if ckpt.groups.contains_key("global_encoder") { "global_encoder" } else { "encoder" };
                        verify_probes(ledger, key, enc)?;
                    }
                }
                let src = pick(Group::LocalEncoder.name())?;
                self.local_encoder.load_from(src)?;
                if let Some(ledger) = &ckpt.meta.probe_ledger {
                    let key = if ckpt.groups.contains_key("local_encoder") { "local_encoder" } else { "encoder" };
                    verify_probes(ledger, key, &self.local_encoder)?;
                }
                self
            }
        };
        net.heads = heads;
        net.trainable = trainable;
        Ok(net)
    }

    /// Writes the whole network plus `normalizer` and a probe ledger for
    /// both encoders.
    pub fn save(&self, path: &Path, normalizer: &Normalizer, probe_px: usize) -> Result<()> {
        let mut embeddings = BTreeMap::new();
        if let Some(enc) = &self.global_encoder {
            embeddings.insert(Group::GlobalEncoder.name().to_string(), probe_embeddings(enc, probe_px)?);
        }
        embeddings.insert(
            Group::LocalEncoder.name().to_string(),
            probe_embeddings(&self.local_encoder, probe_px)?,
        );
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                kind: CheckpointKind::Model,
                encoder_spec: self.spec.clone(),
                architecture: Some(self.arch),
                normalizer: Some(*normalizer),
                probe_ledger: Some(ProbeLedger {
                    input_px: probe_px,
                    embeddings,
                }),
                notes: BTreeMap::from([(
                    "trainable".to_string(),
                    self.trainable.iter().map(|g| g.name()).collect::<Vec<_>>().join(","),
                )]),
            },
            groups: self
                .groups()
                .into_iter()
                .map(|(g, p)| (g.name().to_string(), p.clone()))
                .collect(),
        };
        ckpt.save(path)
    }

    /// Loads a network written by [`GlobalLocalNet::save`].
    pub fn load(path: &Path, dtype: DType) -> Result<(Self, Normalizer)> {
        let ckpt = Checkpoint::load(path, dtype, &Device::Cpu)?;
        if ckpt.meta.kind != CheckpointKind::Model {
            return Err(Error::checkpoint("expected a model checkpoint", vec![]));
        }
        let arch = ckpt.meta.architecture.unwrap_or_default();
        let net = GlobalLocalNet::new(&ckpt.meta.encoder_spec, arch, 0, dtype)?;
        let mut missing = Vec::new();
        for (g, params) in net.groups() {
            match ckpt.groups.get(g.name()) {
                Some(src) => copy_group(params, src)?,
                None => missing.push(g.name().to_string()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::checkpoint("missing parameter groups", missing));
        }
        if let Some(ledger) = &ckpt.meta.probe_ledger {
            if let Some(enc) = &net.global_encoder {
                verify_probes(ledger, Group::GlobalEncoder.name(), enc)?;
            }
            verify_probes(ledger, Group::LocalEncoder.name(), &net.local_encoder)?;
        }
        let trainable: BTreeSet<Group> = ckpt
            .meta
            .notes
            .get("trainable")
            .map(|s| {
                Group::ALL
                    .into_iter()
                    .filter(|g| s.split(',').any(|n| n == g.name()))
                    .collect()
            })
            .unwrap_or_default();
        let mut net = net;
        if !trainable.is_empty() {
            net.trainable = trainable;
        }
        Ok((net, ckpt.meta.normalizer.unwrap_or_default()))
    }
}

/// Logistic function in `f64`, kept strictly inside (0, 1).
pub fn probability(logit: f64) -> f64 {
    let p = 1.0 / (1.0 + (-logit).exp());
    p.clamp(1e-15, 1.0 - 1e-15)
}
