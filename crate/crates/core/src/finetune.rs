//! Supervised fine-tuning with the focal loss
//!
//! ```text
//! L = −(1/M) Σ_i [ y_i (1 − ŷ_i)^γ log ŷ_i + (1 − y_i) ŷ_i^γ log(1 − ŷ_i) ]
//! ```
//!
//! where `M` counts labeled joint instances only. `γ = 0` is binary
//! cross-entropy, which is also the ablation control.

use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Features, GlobalLocalNet, SampleBatch};
use crate::preprocess::PreparedSample;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalLossConfig {
    pub gamma: f64,
    /// Probabilities are clamped to `[ε, 1 − ε]` before taking logs.
    pub epsilon: f64,
    /// Optional weight `α` on positive terms (`1 − α` on negatives). Off by
    /// default; the objective above has no such term.
    pub alpha: Option<f64>,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        FocalLossConfig {
            gamma: 2.0,
            epsilon: 1e-7,
            alpha: None,
        }
    }
}

impl FocalLossConfig {
    pub fn bce() -> Self {
        FocalLossConfig {
            gamma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::Config("focal loss gamma must be >= 0".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-4) {
            return Err(Error::Config("focal loss epsilon must lie in (0, 1e-4]".into()));
        }
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config("focal loss alpha must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    fn weights(&self) -> (f64, f64) {
        self.alpha.map_or((1.0, 1.0), |a| (a, 1.0 - a))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Focal,
    Bce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Hands per batch; every labeled joint of a hand is in the same batch.
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub gamma: f64,
    pub freeze: bool,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            loss: LossKind::Focal,
            gamma: 2.0,
            freeze: true,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Loss settings implied by `loss` and `gamma`.
    pub fn loss_config(&self) -> FocalLossConfig {
        match self.loss {
            LossKind::Focal => FocalLossConfig {
                gamma: self.gamma,
                ..FocalLossConfig::default()
            },
            LossKind::Bce => FocalLossConfig::bce(),
        }
    }
}

fn focal_term(p: f64, y: u8, cfg: &FocalLossConfig) -> f64 {
    let p = p.clamp(cfg.epsilon, 1.0 - cfg.epsilon);
    let (wp, wn) = cfg.weights();
    if y == 1 {
        -wp * (1.0 - p).powf(cfg.gamma) * p.ln()
    } else {
        -wn * p.powf(cfg.gamma) * (1.0 - p).ln()
    }
}

/// Focal loss averaged over labeled entries.
pub fn focal_loss(predictions: &[f64], labels: &[Option<u8>], cfg: &FocalLossConfig) -> Result<f64> {
    let mut sum = 0.0;
    let mut m = 0usize;
    for (&p, &y) in predictions.iter().zip(labels) {
        if let Some(y) = y {
            sum += focal_term(p, y, cfg);
            m += 1;
        }
    }
    if m == 0 {
        return Err(Error::UndefinedLoss);
    }
    Ok(sum / m as f64)
}

/// Binary cross-entropy averaged over labeled entries.
pub fn bce(predictions: &[f64], labels: &[Option<u8>], epsilon: f64) -> Result<f64> {
    focal_loss(
        predictions,
        labels,
        &FocalLossConfig {
            gamma: 0.0,
            epsilon,
            alpha: None,
        },
    )
}

/// `∂L/∂ŷ_i` of [`focal_loss`]; zero for unlabeled entries and wherever
/// the clamp is active.
pub fn focal_loss_grad(predictions: &[f64], labels: &[Option<u8>], cfg: &FocalLossConfig) -> Result<Vec<f64>> {
    let m = labels.iter().filter(|l| l.is_some()).count();
    if m == 0 {
        return Err(Error::UndefinedLoss);
    }
    let g = cfg.gamma;
    let (wp, wn) = cfg.weights();
    Ok(predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if p < cfg.epsilon || p > 1.0 - cfg.epsilon {
                return 0.0;
            }
            let d = match y {
                None => return 0.0,
                // d/dp [−(1−p)^γ ln p]
                Some(1) => {
                    let pull = if g == 0.0 { 0.0 } else { g * (1.0 - p).powf(g - 1.0) * p.ln() };
                    wp * (pull - (1.0 - p).powf(g) / p)
                }
                // d/dp [−p^γ ln(1−p)]
                Some(_) => {
                    let pull = if g == 0.0 { 0.0 } else { -g * p.powf(g - 1.0) * (1.0 - p).ln() };
                    wn * (pull + p.powf(g) / (1.0 - p))
                }
            };
            d / m as f64
        })
        .collect())
}

/// Focal loss on `B × N` logits with `B × N` 0/1 targets and mask.
pub fn focal_loss_tensor(logits: &Tensor, targets: &Tensor, mask: &Tensor, cfg: &FocalLossConfig) -> Result<Tensor> {
    let m = mask.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if m == 0.0 {
        return Err(Error::UndefinedLoss);
    }
    let p = candle_nn::ops::sigmoid(logits)?.clamp(cfg.epsilon, 1.0 - cfg.epsilon)?;
    let q = p.affine(-1.0, 1.0)?;
    let (wp, wn) = cfg.weights();
    let (pos_w, neg_w) = if cfg.gamma == 0.0 {
        (p.ones_like()?, p.ones_like()?)
    } else {
        (q.powf(cfg.gamma)?, p.powf(cfg.gamma)?)
    };
    let pos = (targets * (pos_w * p.log()?)?)?;
    let neg = (targets.affine(-1.0, 1.0)? * (neg_w * q.log()?)?)?;
    let terms = ((pos * wp)? + (neg * wn)?)?;
    Ok(((terms * mask)?.sum_all()? / (-m))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    /// Mean training loss over labeled joints.
    pub loss: f64,
    pub learning_rate: f64,
    pub encoder_checksum: String,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub start_encoder_checksum: String,
    pub end_encoder_checksum: String,
    pub epochs: Vec<FinetuneEpoch>,
    pub steps: usize,
    pub skipped_batches: usize,
}

/// Per-sample encoder features for a frozen network.
pub fn cache_features(net: &GlobalLocalNet, samples: &[PreparedSample]) -> Result<Vec<Features>> {
    samples
        .iter()
        .map(|s| {
            let b = SampleBatch::new(&[s], net.dtype(), net.device())?;
            net.encode(&b.global, &b.local, false)
        })
        .collect()
}

fn cat_features(features: &[&Features]) -> Result<Features> {
    let local: Vec<&Tensor> = features.iter().map(|f| &f.local).collect();
    let global = match features[0].global {
        Some(_) => {
            let g: Vec<&Tensor> = features.iter().filter_map(|f| f.global.as_ref()).collect();
            Some(Tensor::cat(&g, 0)?)
        }
        None => None,
    };
    Ok(Features {
        global,
        local: Tensor::cat(&local, 0)?,
    })
}

/// Loss of `net` on `samples`, using cached `features` when given.
pub fn batch_loss(
    net: &GlobalLocalNet,
    samples: &[&PreparedSample],
    features: Option<&[&Features]>,
    cfg: &FocalLossConfig,
    train: bool,
) -> Result<Tensor> {
    let batch = SampleBatch::new(samples, net.dtype(), net.device())?;
    let logits = match features {
        Some(f) => net.logits_from_features(&cat_features(f)?, batch.batch, batch.joints)?,
        None => net.logits(&batch, train)?,
    };
    focal_loss_tensor(&logits, &batch.targets, &batch.mask, cfg)
}

/// Trains the trainable groups of `net` on `train` with Adam.
pub fn finetune_loop(net: GlobalLocalNet, train: &[PreparedSample], config: &TrainConfig) -> Result<(GlobalLocalNet, FinetuneLog)> {
    config.validate()?;
    let loss_cfg = config.loss_config();
    loss_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("fine-tuning set is empty".into()));
    }
    let net = if config.freeze {
        net.freeze_encoders()
    } else {
        net.unfreeze_all()
    };
    let start_checksum = net.encoder_checksum()?;
    let cached = if net.encoders_frozen() {
        Some(cache_features(&net, train)?)
    } else {
        None
    };
    let mut opt = AdamW::new(
        net.trainable_vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let mut rng = seed::rng(seed::derive(config.seed, "finetune/shuffle"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = FinetuneLog {
        start_encoder_checksum: start_checksum.clone(),
        end_encoder_checksum: String::new(),
        epochs: Vec::new(),
        steps: 0,
        skipped_batches: 0,
    };
    let start = Instant::now();
    'outer: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut labeled) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| log.steps >= m) {
                break 'outer;
            }
            let samples: Vec<&PreparedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let feats: Option<Vec<&Features>> = cached.as_ref().map(|c| chunk.iter().map(|&i| &c[i]).collect());
            let loss = match batch_loss(&net, &samples, feats.as_deref(), &loss_cfg, true) {
                Ok(l) => l,
                Err(Error::UndefinedLoss) => {
                    log.skipped_batches += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Numerical {
                    step: log.steps,
                    message: format!("fine-tuning loss is {value} in epoch {epoch}"),
                });
            }
            opt.backward_step(&loss)?;
            let m = samples
                .iter()
                .flat_map(|s| &s.labels)
                .filter(|l| l.is_some())
                .count() as f64;
            sum += value * m;
            labeled += m;
            log.steps += 1;
        }
        let record = FinetuneEpoch {
            epoch,
            loss: if labeled > 0.0 { sum / labeled } else { f64::NAN },
            learning_rate: config.learning_rate,
            encoder_checksum: net.encoder_checksum()?,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        log::info!("finetune epoch {epoch}: loss {:.5}", record.loss);
        log.epochs.push(record);
    }
    log.end_encoder_checksum = net.encoder_checksum()?;
    Ok((net, log))
}

/// Probabilities for every sample, `batch_size` samples at a time.
pub fn predict_all(net: &GlobalLocalNet, samples: &[PreparedSample], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        out.extend(net.predict(&refs)?);
    }
    Ok(out)
}
