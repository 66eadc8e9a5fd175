//! Stage orchestration shared by the command-line tool and the tests.

use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{load_manifest, make_folds, DatasetManifest, FoldPlan};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, FoldResult, Variant};
use crate::finetune::{finetune_loop, predict_all, FinetuneLog, LossKind, TrainConfig};
use crate::image::FloatImage;
use crate::model::{Architecture, Checkpoint, GlobalLocalNet, WeightsSource};
use crate::preprocess::{prepare_records, Normalizer, PreparedSample};
use crate::pretrain::{load_corpus, pretrain_loop, PretrainOutcome};
use crate::seed;
use crate::synth::generate_dataset;

/// The configured manifest, or a freshly generated synthetic dataset in
/// `data_dir`.
pub fn load_or_generate_dataset(cfg: &ExperimentConfig, data_dir: &Path) -> Result<DatasetManifest> {
    match &cfg.data.manifest {
        Some(path) => load_manifest(path),
        None => generate_dataset(&cfg.resolved().synth, data_dir),
    }
}

pub fn fold_plan(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<FoldPlan> {
    make_folds(manifest, cfg.data.n_folds, cfg.stage_seed("folds"))
}

/// Unnormalized samples for every record, in manifest order.
pub fn prepare_all(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<Vec<PreparedSample>> {
    let all: Vec<usize> = (0..manifest.records.len()).collect();
    prepare_records(manifest, &all, &cfg.preprocess)
}

pub fn pretrain_corpus(cfg: &ExperimentConfig) -> Result<Vec<FloatImage>> {
    load_corpus(&cfg.corpus, &cfg.synth, cfg.stage_seed("corpus"))
}

/// Runs pretraining and writes the backbone checkpoint to `checkpoint`
/// and the epoch log next to it as `pretrain_log.jsonl`.
pub fn pretrain_backbone(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<PretrainOutcome> {
    let resolved = cfg.resolved();
    let corpus = pretrain_corpus(cfg).map_err(|e| e.in_stage("pretrain corpus"))?;
    let outcome = pretrain_loop(&corpus, &cfg.model.spec(), &resolved.pretrain).map_err(|e| e.in_stage("pretrain"))?;
    outcome
        .checkpoint(cfg.preprocess.model_input_px, &resolved.pretrain)?
        .save(checkpoint)?;
    let log_path = checkpoint.with_file_name("pretrain_log.jsonl");
    outcome.write_log(&log_path)?;
    Ok(outcome)
}

/// Normalization stored in a backbone checkpoint.
pub fn backbone_normalizer(path: &Path) -> Result<Normalizer> {
    let ckpt = Checkpoint::load(path, DType::F32, &Device::Cpu)?;
    ckpt.meta
        .normalizer
        .ok_or_else(|| Error::checkpoint("backbone checkpoint has no normalizer", vec![]))
}

/// Fine-tuning settings for `variant` on `fold`.
pub fn fold_train_config(cfg: &ExperimentConfig, variant: Variant, fold: usize) -> TrainConfig {
    let mut tc = cfg.resolved().finetune;
    tc.seed = seed::derive_indexed(cfg.stage_seed("finetune"), "fold", fold as u64);
    if variant == Variant::NoFocal {
        tc.loss = LossKind::Bce;
    }
    tc
}

pub fn variant_architecture(cfg: &ExperimentConfig, variant: Variant) -> Architecture {
    if variant == Variant::LocalOnly {
        Architecture::LocalOnly
    } else {
        cfg.model.architecture
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutput {
    pub result: FoldResult,
    pub log: FinetuneLog,
    /// Manifest indices of the test records.
    pub test_indices: Vec<usize>,
    /// Per test record, one probability per active joint.
    pub predictions: Vec<Vec<f64>>,
}

fn normalized(samples: &[PreparedSample], indices: &[usize], norm: &Normalizer) -> Vec<PreparedSample> {
    indices
        .iter()
        .map(|&i| {
            let mut s = samples[i].clone();
            norm.apply(&mut s);
            s
        })
        .collect()
}

/// Builds, fine-tunes and evaluates one fold. `raw` holds unnormalized
/// samples for every manifest record.
#[allow(clippy::too_many_arguments)]
pub fn train_fold(
    cfg: &ExperimentConfig,
    variant: Variant,
    manifest: &DatasetManifest,
    raw: &[PreparedSample],
    plan: &FoldPlan,
    fold: usize,
    backbone: Option<&Path>,
) -> Result<(FoldOutput, GlobalLocalNet, Normalizer)> {
    let (train_idx, test_idx) = plan.split(manifest, fold)?;
    let init_seed = seed::derive_indexed(cfg.stage_seed("init"), "fold", fold as u64);
    let net = GlobalLocalNet::new(&cfg.model.spec(), variant_architecture(cfg, variant), init_seed, DType::F32)?;
    let (net, norm) = if variant.uses_pretraining() {
        let path = backbone.ok_or_else(|| {
            Error::Config(format!("variant `{}` needs a pretrained backbone", variant.key()))
        })?;
        let net = net.load_backbone(&WeightsSource::PretrainedCheckpoint(path.to_path_buf()), init_seed)?;
        (net, backbone_normalizer(path)?)
    } else {
        let train_raw: Vec<PreparedSample> = train_idx.iter().map(|&i| raw[i].clone()).collect();
        (net, Normalizer::fit(&train_raw))
    };
    let train = normalized(raw, &train_idx, &norm);
    let test = normalized(raw, &test_idx, &norm);
    let (net, mut log) = finetune_loop(net, &train, &fold_train_config(cfg, variant, fold))?;
    if cfg.test_mode {
        for e in &mut log.epochs {
            e.elapsed_s = 0.0;
        }
    }
    let predictions = predict_all(&net, &test, cfg.eval.predict_batch)?;
    let flat_p: Vec<f64> = predictions.iter().flatten().copied().collect();
    let flat_y: Vec<Option<u8>> = test.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let result = FoldResult::new(fold, &flat_p, &flat_y, cfg.eval.threshold, cfg.eval.auc);
    Ok((
        FoldOutput {
            result,
            log,
            test_indices: test_idx,
            predictions,
        },
        net,
        norm,
    ))
}

/// Cross-validated report for one variant; folds run in order.
pub fn crossval_evaluate(
    cfg: &ExperimentConfig,
    variant: Variant,
    manifest: &DatasetManifest,
    raw: &[PreparedSample],
    plan: &FoldPlan,
    backbone: Option<&Path>,
) -> Result<(EvalReport, Vec<FoldOutput>)> {
    let mut outputs = Vec::with_capacity(plan.n_folds);
    for fold in 0..plan.n_folds {
        let (out, _, _) = train_fold(cfg, variant, manifest, raw, plan, fold, backbone)
            .map_err(|e| e.in_stage(format!("fold {fold}")))?;
        outputs.push(out);
    }
    let mut report = EvalReport::from_folds(
        variant.label(),
        cfg.eval.threshold,
        outputs.iter().map(|o| o.result.clone()).collect(),
    );
    let tc = fold_train_config(cfg, variant, 0);
    report.metadata.insert("variant_key".into(), variant.key().into());
    report.metadata.insert(
        "architecture".into(),
        match variant_architecture(cfg, variant) {
            Architecture::GlobalLocal => "global-local".into(),
            Architecture::LocalOnly => "local-only (global branch removed, head input ffn_dim)".into(),
        },
    );
    report.metadata.insert(
        "loss".into(),
        match tc.loss {
            LossKind::Focal => format!("focal gamma={}", tc.gamma),
            LossKind::Bce => "bce".into(),
        },
    );
    report.metadata.insert(
        "encoders".into(),
        if variant.uses_pretraining() { "pretrained, frozen" } else { "random init, frozen" }.to_string(),
    );
    report.metadata.insert("pooling".into(), "micro within fold, macro across folds".into());
    Ok((report, outputs))
}

/// One cross-validated report per variant, in the given order.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    variants: &[Variant],
    manifest: &DatasetManifest,
    raw: &[PreparedSample],
    plan: &FoldPlan,
    backbone: Option<&Path>,
) -> Result<Vec<EvalReport>> {
    variants
        .iter()
        .map(|&v| {
            crossval_evaluate(cfg, v, manifest, raw, plan, backbone)
                .map(|(r, _)| r)
                .map_err(|e| e.in_stage(format!("variant {}", v.key())))
        })
        .collect()
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hex SHA-256 of a value's JSON form; identifies the settings a stage
/// output was produced with.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

/// Settings that determine the synthetic dataset.
pub fn dataset_fingerprint(cfg: &ExperimentConfig) -> Result<String> {
    let r = cfg.resolved();
    fingerprint(&(&r.data, &r.synth))
}

/// Settings that determine the pretrained backbone.
pub fn backbone_fingerprint(cfg: &ExperimentConfig) -> Result<String> {
    let r = cfg.resolved();
    fingerprint(&(
        &r.synth,
        &r.corpus,
        cfg.stage_seed("corpus"),
        &r.model.spec(),
        &r.pretrain,
        r.preprocess.model_input_px,
    ))
}
