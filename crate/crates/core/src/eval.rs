//! Imbalance-aware metrics and report files.
//!
//! Within a fold every labeled test joint is pooled into one confusion
//! matrix; the reported aggregate is the unweighted mean over folds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::AddAssign;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use crate::pipeline::{crossval_evaluate, run_ablation};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

/// Counts over labeled entries; a prediction is positive iff `ŷ ≥ threshold`.
pub fn confusion(predictions: &[f64], labels: &[Option<u8>], threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        match (y, p >= threshold) {
            (Some(1), true) => c.tp += 1,
            (Some(1), false) => c.fn_ += 1,
            (Some(_), true) => c.fp += 1,
            (Some(_), false) => c.tn += 1,
            (None, _) => {}
        }
    }
    c
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub gmean: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Recall, precision, F1 and Gmean with every `0/0` taken as 0.
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let recall = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    let f1 = if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let specificity = ratio(c.tn, c.tn + c.fp);
    Metrics {
        recall,
        precision,
        f1,
        gmean: (recall * specificity).sqrt(),
    }
}

/// Area under the ROC curve by the rank-sum statistic (ties count half).
/// `None` when either class is absent.
pub fn roc_auc(predictions: &[f64], labels: &[Option<u8>]) -> Option<f64> {
    let mut scored: Vec<(f64, u8)> = predictions
        .iter()
        .zip(labels)
        .filter_map(|(&p, &y)| y.map(|y| (p, y)))
        .collect();
    let pos = scored.iter().filter(|s| s.1 == 1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * scored[i..j].iter().filter(|s| s.1 == 1).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

impl FoldResult {
    pub fn new(fold: usize, predictions: &[f64], labels: &[Option<u8>], threshold: f64, with_auc: bool) -> Self {
        let counts = confusion(predictions, labels, threshold);
        FoldResult {
            fold,
            counts,
            metrics: metrics(&counts),
            auc: if with_auc { roc_auc(predictions, labels) } else { None },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub threshold: f64,
    pub per_fold: Vec<FoldResult>,
    pub aggregate: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate_auc: Option<f64>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn from_folds(variant: impl Into<String>, threshold: f64, per_fold: Vec<FoldResult>) -> Self {
        let n = per_fold.len().max(1) as f64;
        let mean = |f: fn(&Metrics) -> f64| per_fold.iter().fold(0.0, |acc, r| acc + f(&r.metrics)) / n;
        let aggregate = Metrics {
            recall: mean(|m| m.recall),
            precision: mean(|m| m.precision),
            f1: mean(|m| m.f1),
            gmean: mean(|m| m.gmean),
        };
        let aucs: Vec<f64> = per_fold.iter().filter_map(|r| r.auc).collect();
        EvalReport {
            variant: variant.into(),
            threshold,
            aggregate_auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
            per_fold,
            aggregate,
            metadata: BTreeMap::new(),
        }
    }

    /// Sum of all per-fold confusion matrices.
    pub fn pooled_counts(&self) -> ConfusionCounts {
        let mut c = ConfusionCounts::default();
        for r in &self.per_fold {
            c += r.counts;
        }
        c
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_text(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }
}

/// The ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Pretrained frozen encoders, focal loss, both streams.
    Ours,
    /// Randomly initialized frozen encoders.
    NoPretrain,
    /// Plain binary cross-entropy.
    NoFocal,
    /// Local stream only.
    LocalOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ours, Variant::NoPretrain, Variant::NoFocal, Variant::LocalOnly];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::NoPretrain => "no-pretrain",
            Variant::NoFocal => "no-focal",
            Variant::LocalOnly => "local-only",
        }
    }

    /// Row label in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Ours => "Ours",
            Variant::NoPretrain => "w/o DINO pre-training",
            Variant::NoFocal => "w/o Focal Loss",
            Variant::LocalOnly => "w/o Global/Local Encoder",
        }
    }

    pub fn uses_pretraining(self) -> bool {
        self != Variant::NoPretrain
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s || v.label() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (expected one of: ours, no-pretrain, no-focal, local-only)"
                ))
            })
    }
}

pub const TABLE_COLUMNS: [&str; 5] = ["variant", "recall", "precision", "f1", "gmean"];

/// One row per report: `variant,recall,precision,f1,gmean`.
pub fn ablation_csv(reports: &[EvalReport]) -> String {
    let mut out = TABLE_COLUMNS.join(",");
    out.push('\n');
    for r in reports {
        let m = &r.aggregate;
        let name = if r.variant.contains(',') {
            format!("\"{}\"", r.variant)
        } else {
            r.variant.clone()
        };
        let _ = writeln!(out, "{name},{:.6},{:.6},{:.6},{:.6}", m.recall, m.precision, m.f1, m.gmean);
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Grouped bar chart: one group per metric, one bar per report, on a white
/// background with a baseline and gridlines at 0.25 steps. No text.
pub fn bar_chart(reports: &[EvalReport]) -> RgbImage {
    let (w, h, margin) = (480u32, 240u32, 20u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let plot_h = h - 2 * margin;
    for q in 0..=4 {
        let y = h - margin - plot_h * q / 4;
        for x in margin..w - margin {
            img.put_pixel(x, y, Rgb(if q == 0 { [0, 0, 0] } else { [220, 220, 220] }));
        }
    }
    let groups = 4u32;
    let group_w = (w - 2 * margin) / groups;
    let n = reports.len().max(1) as u32;
    let bar_w = ((group_w - 10) / n).max(1);
    for (gi, get) in [
        |m: &Metrics| m.recall,
        |m: &Metrics| m.precision,
        |m: &Metrics| m.f1,
        |m: &Metrics| m.gmean,
    ]
    .iter()
    .enumerate()
    {
        for (ri, r) in reports.iter().enumerate() {
            let v = get(&r.aggregate).clamp(0.0, 1.0);
            let bh = (v * plot_h as f64).round() as u32;
            let x0 = margin + gi as u32 * group_w + 5 + ri as u32 * bar_w;
            for x in x0..(x0 + bar_w.saturating_sub(1)).min(w - margin) {
                for y in (h - margin - bh)..(h - margin) {
                    img.put_pixel(x, y, Rgb(PALETTE[ri % PALETTE.len()]));
                }
            }
        }
    }
    img
}
