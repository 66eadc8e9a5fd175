//! Experiment configuration.
//!
//! Every field has a default. The defaults are a desk-scale preset (small
//! CNN encoders, 32 px inputs) that runs cross-validation in minutes on one
//! CPU core; `configs/full.toml` in the repository holds the full-size
//! settings.
//!
//! All randomness comes from the root `seed`. Each stage gets its own seed
//! via [`crate::seed::derive`] with the labels `synth`, `corpus`, `folds`,
//! `pretrain`, `init` and `finetune`; the per-section `seed` fields are
//! overwritten with these derived values by [`ExperimentConfig::resolved`].

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Variant;
use crate::finetune::TrainConfig;
use crate::model::{Architecture, BackboneKind, EncoderSpec};
use crate::preprocess::CropSpec;
use crate::pretrain::{AugmentConfig, CorpusConfig, DistillConfig};
use crate::seed;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Existing manifest to use; a synthetic dataset is generated when absent.
    pub manifest: Option<PathBuf>,
    pub n_folds: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            n_folds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub feature_dim: usize,
    pub ffn_dim: usize,
    pub architecture: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::SmallCnn,
            feature_dim: 64,
            ffn_dim: 32,
            architecture: Architecture::GlobalLocal,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> EncoderSpec {
        EncoderSpec {
            backbone: self.backbone,
            feature_dim: self.feature_dim,
            ffn_dim: self.ffn_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Variants run by the ablation.
    pub variants: Vec<Variant>,
    /// Variant run by `crossval`.
    pub variant: Variant,
    /// Adds ROC AUC to reports.
    pub auc: bool,
    /// Writes a bar chart next to ablation tables.
    pub plot: bool,
    pub predict_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.5,
            variants: Variant::ALL.to_vec(),
            variant: Variant::Ours,
            auc: false,
            plot: true,
            predict_batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub seed: u64,
    /// Requires bit-reproducible execution. All kernels used here are
    /// deterministic on CPU, so this only disables timing fields in reports.
    pub test_mode: bool,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub corpus: CorpusConfig,
    pub preprocess: CropSpec,
    pub model: ModelConfig,
    pub pretrain: DistillConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_id: "default".into(),
            seed: 0,
            test_mode: true,
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            corpus: CorpusConfig::default(),
            preprocess: CropSpec {
                patch_size_px: 32,
                model_input_px: 32,
                ..CropSpec::default()
            },
            model: ModelConfig::default(),
            pretrain: DistillConfig {
                global_input_px: 32,
                local_input_px: 32,
                global_crop_scale: (0.4, 1.0),
                local_crop_scale: (0.02, 0.1),
                head_hidden_dim: 128,
                head_bottleneck_dim: 64,
                augment: AugmentConfig {
                    color_jitter: 0.1,
                    ..AugmentConfig::default()
                },
                epochs: 5,
                learning_rate: 1.5e-4,
                warmup_epochs: 1,
                ..DistillConfig::default()
            },
            finetune: TrainConfig {
                learning_rate: 7e-4,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive(self.seed, stage)
    }

    /// Copy with stage seeds derived from the root seed.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut c = self.clone();
        c.synth.seed = self.stage_seed("synth");
        c.pretrain.seed = self.stage_seed("pretrain");
        c.finetune.seed = self.stage_seed("finetune");
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return Err(Error::Config(format!("invalid run_id `{}`", self.run_id)));
        }
        if self.data.n_folds < 2 {
            return Err(Error::Config("data.n_folds must be at least 2".into()));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Config("eval.threshold must lie in (0, 1)".into()));
        }
        if self.eval.variants.is_empty() {
            return Err(Error::Config("eval.variants is empty".into()));
        }
        self.synth.validate()?;
        self.preprocess.validate()?;
        self.model.spec().validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.finetune.loss_config().validate()?;
        Ok(())
    }
}
