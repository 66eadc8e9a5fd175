//! Self-distillation pretraining of an encoder backbone.
//!
//! A student (encoder + projection head) is trained to match the output
//! distribution of a teacher over different augmented views of the same
//! image. The teacher is an exponential moving average of the student and
//! never receives gradients; its outputs are centered and sharpened with a
//! low temperature to avoid collapse.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{FloatImage, PaddingPolicy};
use crate::model::{
    probe_embeddings, Checkpoint, CheckpointKind, CheckpointMeta, Encoder, EncoderSpec, Init,
    Linear, ParamGroup, ProbeLedger,
};
use crate::preprocess::{apply_mask, Normalizer};
use crate::seed;
use crate::synth::{self, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from
    /// `[1 − color_jitter, 1 + color_jitter]`.
    pub color_jitter: f64,
    pub blur_prob: f64,
    /// Blur sigma range in pixels.
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            color_jitter: 0.2,
            blur_prob: 0.2,
            blur_sigma: (0.1, 1.0),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            color_jitter: 0.0,
            blur_prob: 0.0,
            blur_sigma: (0.1, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Projection output dimension `K`.
    pub n_prototypes: usize,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub center_momentum: f64,
    pub ema_momentum: f64,
    pub n_global_crops: usize,
    pub n_local_crops: usize,
    pub global_crop_scale: (f64, f64),
    pub local_crop_scale: (f64, f64),
    /// Side of global views after resizing.
    pub global_input_px: usize,
    /// Side of local views after resizing.
    pub local_input_px: usize,
    pub augment: AugmentConfig,
    pub head_hidden_dim: usize,
    pub head_bottleneck_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// One run shared by both encoders, or one independent run each.
    pub shared_encoders: bool,
    pub probe_batch: usize,
    /// Collapse is reported when the teacher-embedding spread falls below this.
    pub collapse_threshold: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            n_prototypes: 256,
            student_temp: 0.1,
            teacher_temp: 0.04,
            center_momentum: 0.9,
            ema_momentum: 0.996,
            n_global_crops: 2,
            n_local_crops: 4,
            global_crop_scale: (0.4, 1.0),
            local_crop_scale: (0.05, 0.4),
            global_input_px: 224,
            local_input_px: 96,
            augment: AugmentConfig::default(),
            head_hidden_dim: 512,
            head_bottleneck_dim: 128,
            epochs: 20,
            batch_size: 32,
            learning_rate: 1.5e-4,
            weight_decay: 0.04,
            warmup_epochs: 2,
            shared_encoders: true,
            probe_batch: 64,
            collapse_threshold: 0.01,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("pretrain: {m}")));
        if self.n_prototypes == 0 {
            return bad("n_prototypes must be positive");
        }
        if !(self.student_temp > 0.0 && self.teacher_temp > 0.0) {
            return bad("temperatures must be positive");
        }
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.center_momentum) || !unit(self.ema_momentum) {
            return bad("center_momentum and ema_momentum must lie in (0, 1)");
        }
        if self.n_global_crops != 2 {
            return bad("n_global_crops must be 2");
        }
        for (name, (lo, hi)) in [("global_crop_scale", self.global_crop_scale), ("local_crop_scale", self.local_crop_scale)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad(&format!("{name} must be a sub-range of (0, 1]"));
            }
        }
        if self.global_input_px < 8 || self.local_input_px < 8 {
            return bad("view sizes must be at least 8 px");
        }
        if self.batch_size == 0 || self.head_hidden_dim == 0 || self.head_bottleneck_dim == 0 {
            return bad("batch_size and head widths must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// Smallest image side accepted by [`multi_crop`].
pub const MIN_IMAGE_PX: usize = 8;

/// Views of one image: `n_global_crops` global views then the local views.
pub fn multi_crop(image: &FloatImage, config: &DistillConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<FloatImage>, Vec<FloatImage>)> {
    if image.width() < MIN_IMAGE_PX || image.height() < MIN_IMAGE_PX {
        return Err(Error::validation(
            "corpus image",
            format!(
                "{}x{} is below the {MIN_IMAGE_PX} px minimum crop size",
                image.width(),
                image.height()
            ),
        ));
    }
    let globals = (0..config.n_global_crops)
        .map(|_| {
            let v = random_resized_crop(image, config.global_crop_scale, config.global_input_px, rng);
            augment(&v, &config.augment, rng)
        })
        .collect();
    let locals = (0..config.n_local_crops)
        .map(|_| {
            let v = random_resized_crop(image, config.local_crop_scale, config.local_input_px, rng);
            augment(&v, &config.augment, rng)
        })
        .collect();
    Ok((globals, locals))
}

/// Crop covering a random area fraction in `scale` with aspect ratio in
/// `[3/4, 4/3]`, resized to `out × out`. Falls back to the whole image
/// after ten rejected draws.
pub fn random_resized_crop(image: &FloatImage, scale: (f64, f64), out: usize, rng: &mut ChaCha8Rng) -> FloatImage {
    let (w, h) = (image.width() as f64, image.height() as f64);
    let (lo, hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let area = w * h * rng.random_range(scale.0..=scale.1);
        let ratio = rng.random_range(lo..=hi).exp();
        let cw = (area * ratio).sqrt().round();
        let ch = (area / ratio).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= w && ch <= h {
            let x0 = rng.random_range(0..=(w - cw) as i64);
            let y0 = rng.random_range(0..=(h - ch) as i64);
            return image
                .crop(x0, y0, cw as usize, ch as usize, PaddingPolicy::ZeroPad)
                .resize_bilinear(out, out);
        }
    }
    image.resize_bilinear(out, out)
}

/// Flip, color jitter and Gaussian blur on a `[0, 1]` RGB image.
pub fn augment(image: &FloatImage, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> FloatImage {
    let mut out = if config.flip_prob > 0.0 && rng.random_bool(config.flip_prob.min(1.0)) {
        image.hflip()
    } else {
        image.clone()
    };
    if config.color_jitter > 0.0 {
        let j = config.color_jitter;
        let brightness = rng.random_range(1.0 - j..=1.0 + j) as f32;
        let contrast = rng.random_range(1.0 - j..=1.0 + j) as f32;
        let saturation = rng.random_range(1.0 - j..=1.0 + j) as f32;
        color_jitter(&mut out, brightness, contrast, saturation);
    }
    if config.blur_prob > 0.0 && rng.random_bool(config.blur_prob.min(1.0)) {
        let sigma = rng.random_range(config.blur_sigma.0..=config.blur_sigma.1);
        out = gaussian_blur(&out, sigma);
    }
    out
}

fn color_jitter(img: &mut FloatImage, brightness: f32, contrast: f32, saturation: f32) {
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let data = img.data_mut();
    for v in data.iter_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let gray = |d: &[f32], i: usize| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i];
    let mean: f32 = (0..n).map(|i| gray(data, i)).sum::<f32>() / n as f32;
    for v in data.iter_mut() {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    for i in 0..n {
        let g = gray(data, i);
        for c in 0..3 {
            let v = &mut data[c * n + i];
            *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
        }
    }
}

/// Separable Gaussian blur with a `2·⌈2σ⌉ + 1` tap kernel and clamped edges.
pub fn gaussian_blur(img: &FloatImage, sigma: f64) -> FloatImage {
    let r = (2.0 * sigma).ceil().max(1.0) as i64;
    let kernel: Vec<f32> = {
        let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let s: f64 = k.iter().sum();
        k.iter().map(|v| (v / s) as f32).collect()
    };
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let pass = |src: &FloatImage, horizontal: bool| {
        let mut dst = FloatImage::zeros(c, h, w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0f32;
                    for (k, &wt) in kernel.iter().enumerate() {
                        let o = k as i64 - r;
                        let (sx, sy) = if horizontal {
                            ((x as i64 + o).clamp(0, w as i64 - 1) as usize, y)
                        } else {
                            (x, (y as i64 + o).clamp(0, h as i64 - 1) as usize)
                        };
                        acc += wt * src.get(ch, sy, sx);
                    }
                    dst.set(ch, y, x, acc);
                }
            }
        }
        dst
    };
    pass(&pass(img, true), false)
}

/// Cross-entropy `−Σ_k p_k log q_k` averaged over the batch, where
/// `p = softmax((teacher − center)/τ_t)` is held constant and
/// `q = softmax(student/τ_s)`.
pub fn distill_cross_entropy(teacher: &Tensor, student: &Tensor, center: &Tensor, student_temp: f64, teacher_temp: f64) -> Result<Tensor> {
    let p = teacher_probs(teacher, center, teacher_temp)?;
    let log_q = candle_nn::ops::log_softmax(&(student / student_temp)?, D::Minus1)?;
    Ok((p * log_q)?.sum(D::Minus1)?.neg()?.mean_all()?)
}

fn teacher_probs(teacher: &Tensor, center: &Tensor, teacher_temp: f64) -> Result<Tensor> {
    let centered = teacher.detach().broadcast_sub(&center.detach())?;
    Ok(candle_nn::ops::softmax(&(centered / teacher_temp)?, D::Minus1)?)
}

/// Mean cross-entropy over every (teacher view, student view) pair except
/// a global view paired with itself. `student[i]` and `teacher[i]` are the
/// same view for `i < teacher.len()`. Each tensor is `B × K`.
pub fn distill_loss(student: &[Tensor], teacher: &[Tensor], center: &Tensor, student_temp: f64, teacher_temp: f64) -> Result<Tensor> {
    for t in student.iter().chain(teacher).chain([center]) {
        let s = t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
        if !s.is_finite() {
            return Err(Error::Numerical {
                step: 0,
                message: "non-finite logits".into(),
            });
        }
    }
    let mut terms = Vec::new();
    for (ti, t) in teacher.iter().enumerate() {
        let p = teacher_probs(t, center, teacher_temp)?;
        for (si, s) in student.iter().enumerate() {
            if si == ti {
                continue;
            }
            let log_q = candle_nn::ops::log_softmax(&(s / student_temp)?, D::Minus1)?;
            terms.push((&p * log_q)?.sum(D::Minus1)?.neg()?.mean_all()?);
        }
    }
    if terms.is_empty() {
        return Err(Error::Config("distill_loss needs at least one cross-view pair".into()));
    }
    let n = terms.len() as f64;
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / n)?)
}

/// `θ_t ← m·θ_t + (1 − m)·θ_s` for every parameter of `teacher`.
pub fn ema_update(teacher: &ParamGroup, student: &ParamGroup, m: f64) -> Result<()> {
    for (name, t) in &teacher.params {
        let s = student
            .params
            .get(name)
            .ok_or_else(|| Error::checkpoint("student lacks teacher parameter", vec![name.clone()]))?;
        let next = ((t.as_tensor() * m)? + (s.as_tensor().detach() * (1.0 - m))?)?;
        t.set(&next)?;
    }
    Ok(())
}

/// `c ← λ·c + (1 − λ)·mean_b(teacher_logits_b)` for a `B × K` batch.
pub fn center_update(center: &Tensor, teacher_logits: &Tensor, lambda: f64) -> Result<Tensor> {
    let batch_mean = teacher_logits.detach().mean(0)?;
    Ok(((center * lambda)? + (batch_mean * (1.0 - lambda))?)?)
}

/// Three-layer MLP, L2 normalization, then a linear layer whose weight rows
/// are normalized to unit length.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    layers: [Linear; 3],
    last: Linear,
    params: ParamGroup,
}

impl ProjectionHead {
    pub fn new(input: usize, hidden: usize, bottleneck: usize, k: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut init = Init::new(seed, dtype, device);
        let layers = [
            init.linear("mlp.0", input, hidden)?,
            init.linear("mlp.1", hidden, hidden)?,
            init.linear("mlp.2", hidden, bottleneck)?,
        ];
        let last = init.linear_no_bias("last", bottleneck, k)?;
        Ok(ProjectionHead {
            layers,
            last,
            params: init.finish(),
        })
    }

    pub fn params(&self) -> &ParamGroup {
        &self.params
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.layers[0].forward(x)?.gelu_erf()?;
        let y = self.layers[1].forward(&y)?.gelu_erf()?;
        let y = l2_normalize(&self.layers[2].forward(&y)?)?;
        let w = l2_normalize(self.last.weight().as_tensor())?;
        Ok(y.matmul(&w.t()?)?)
    }
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Encoder plus projection head.
#[derive(Debug, Clone)]
struct DistillNet {
    encoder: Encoder,
    head: ProjectionHead,
}

impl DistillNet {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.encoder.forward(x, true)?)
    }

    fn params(&self) -> ParamGroup {
        let mut g = ParamGroup::default();
        for (prefix, group) in [("encoder", self.encoder.params()), ("head", self.head.params())] {
            for (n, v) in &group.params {
                g.params.insert(format!("{prefix}.{n}"), v.clone());
            }
        }
        g
    }

    fn deep_clone(&self) -> Result<DistillNet> {
        let first = self.head.params.params.values().next().expect("head has params");
        let head = ProjectionHead::new(
            self.head.layers[0].weight().dim(1)?,
            self.head.layers[0].weight().dim(0)?,
            self.head.layers[2].weight().dim(0)?,
            self.head.last.weight().dim(0)?,
            0,
            first.dtype(),
            first.device(),
        )?;
        crate::model::copy_group(&head.params, &self.head.params)?;
        Ok(DistillNet {
            encoder: self.encoder.deep_clone()?,
            head,
        })
    }
}

/// Mean over dimensions of the per-dimension standard deviation of
/// L2-normalized embeddings (rows of `embeddings`).
pub fn embedding_spread(embeddings: &[Vec<f32>]) -> f64 {
    let n = embeddings.len();
    if n < 2 {
        return 0.0;
    }
    let normed: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| {
            let norm = e.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt().max(1e-12);
            e.iter().map(|&v| f64::from(v) / norm).collect()
        })
        .collect();
    let d = normed[0].len();
    let mut total = 0.0;
    for k in 0..d {
        let mean = normed.iter().map(|e| e[k]).sum::<f64>() / n as f64;
        let var = normed.iter().map(|e| (e[k] - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    total / d as f64
}

/// Where unlabeled pretraining images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Folder of PNG/JPEG hand images; synthetic hands when absent.
    pub folder: Option<PathBuf>,
    /// Number of synthetic hands (one per synthetic subject).
    pub n_images: usize,
    /// Marker prevalence in synthetic corpus hands.
    pub prevalence: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            folder: None,
            n_images: 500,
            prevalence: 0.0,
        }
    }
}

/// Loads the pretraining corpus as `[0, 1]` images. Synthetic hands are
/// rendered in memory with the background masked out, from subjects
/// disjoint from any labeled dataset drawn with the same `synth` settings
/// (the corpus uses its own seed).
pub fn load_corpus(corpus: &CorpusConfig, synth: &SynthConfig, seed: u64) -> Result<Vec<FloatImage>> {
    let images = match &corpus.folder {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                        Some("png" | "jpg" | "jpeg")
                    )
                })
                .collect();
            paths.sort();
            paths
                .par_iter()
                .map(|p| Ok(FloatImage::from_rgb8(&image::open(p)?.to_rgb8())))
                .collect::<Result<Vec<_>>>()?
        }
        None => {
            let cfg = SynthConfig {
                n_patients: corpus.n_images,
                images_per_patient: 1,
                prevalence: synth::Prevalence::Uniform(corpus.prevalence),
                seed,
                ..synth.clone()
            };
            cfg.validate()?;
            (0..corpus.n_images)
                .into_par_iter()
                .map(|p| {
                    let labels = synth::draw_labels(&cfg, p, 0);
                    let hand = synth::render_hand(synth::patient_seed(&cfg, p), synth::image_seed(&cfg, p, 0), &labels, &cfg);
                    Ok(FloatImage::from_rgb8(&apply_mask(&hand.image, &hand.mask)?))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    if images.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    Ok(images)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub run: String,
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
    /// Teacher-embedding spread over the probe batch.
    pub collapse_stat: f64,
    pub collapsed: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// `"encoder"` for a shared run, else `"global_encoder"` and `"local_encoder"`.
    pub encoders: BTreeMap<String, Encoder>,
    pub spec: EncoderSpec,
    pub normalizer: Normalizer,
    pub log: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

impl PretrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_collapse_stat(&self) -> f64 {
        self.log.last().map_or(0.0, |r| r.collapse_stat)
    }

    /// Backbone checkpoint with a probe ledger at `probe_px`.
    pub fn checkpoint(&self, probe_px: usize, config: &DistillConfig) -> Result<Checkpoint> {
        let mut embeddings = BTreeMap::new();
        for (name, enc) in &self.encoders {
            embeddings.insert(name.clone(), probe_embeddings(enc, probe_px)?);
        }
        Ok(Checkpoint {
            meta: CheckpointMeta {
                format_version: crate::model::FORMAT_VERSION,
                kind: CheckpointKind::Backbone,
                encoder_spec: self.spec.clone(),
                architecture: None,
                normalizer: Some(self.normalizer),
                probe_ledger: Some(ProbeLedger {
                    input_px: probe_px,
                    embeddings,
                }),
                notes: BTreeMap::from([
                    ("distill_config".to_string(), serde_json::to_string(config)?),
                    ("final_loss".to_string(), format!("{:e}", self.final_loss())),
                ]),
            },
            groups: self
                .encoders
                .iter()
                .map(|(n, e)| (n.clone(), e.params().clone()))
                .collect(),
        })
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for r in &self.log {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        for w in &self.warnings {
            text.push_str(&serde_json::to_string(&serde_json::json!({ "warning": w }))?);
            text.push('\n');
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn stack_views(views: &[&FloatImage], normalizer: &Normalizer, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = (views[0].height(), views[0].width());
    let mut data = Vec::with_capacity(views.len() * 3 * h * w);
    for v in views {
        let mut v = (*v).clone();
        normalizer.normalize(&mut v);
        data.extend_from_slice(v.data());
    }
    Ok(Tensor::from_vec(data, (views.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Runs self-distillation on `corpus` (`[0, 1]` images) and returns the
/// teacher encoder(s), which are the usual export of this method.
pub fn pretrain_loop(corpus: &[FloatImage], spec: &EncoderSpec, config: &DistillConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    spec.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    let normalizer = Normalizer::fit_images(corpus.iter());
    let mut encoders = BTreeMap::new();
    let mut log = Vec::new();
    let mut warnings = Vec::new();
    let runs: &[&str] = if config.shared_encoders {
        &["encoder"]
    } else {
        &["global_encoder", "local_encoder"]
    };
    for (i, run) in runs.iter().enumerate() {
        let run_seed = seed::derive_indexed(config.seed, "pretrain/run", i as u64);
        let enc = distill_run(corpus, spec, config, &normalizer, run_seed, run, &mut log, &mut warnings)?;
        encoders.insert(run.to_string(), enc);
    }
    Ok(PretrainOutcome {
        encoders,
        spec: spec.clone(),
        normalizer,
        log,
        warnings,
    })
}

#[allow(clippy::too_many_arguments)]
fn distill_run(
    corpus: &[FloatImage],
    spec: &EncoderSpec,
    config: &DistillConfig,
    normalizer: &Normalizer,
    run_seed: u64,
    run: &str,
    log: &mut Vec<EpochRecord>,
    warnings: &mut Vec<String>,
) -> Result<Encoder> {
    let device = Device::Cpu;
    let dtype = DType::F32;
    let student = DistillNet {
        encoder: Encoder::new(spec, seed::derive(run_seed, "encoder"), dtype, &device)?,
        head: ProjectionHead::new(
            spec.feature_dim,
            config.head_hidden_dim,
            config.head_bottleneck_dim,
            config.n_prototypes,
            seed::derive(run_seed, "head"),
            dtype,
            &device,
        )?,
    };
    let teacher = student.deep_clone()?;
    let (student_params, teacher_params) = (student.params(), teacher.params());
    let mut opt = AdamW::new(
        student_params.vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;
    let mut center = Tensor::zeros(config.n_prototypes, dtype, &device)?;

    let probe: Vec<FloatImage> = corpus
        .iter()
        .take(config.probe_batch.max(2))
        .map(|img| img.resize_bilinear(config.global_input_px, config.global_input_px))
        .collect();
    let probe_refs: Vec<&FloatImage> = probe.iter().collect();
    let probe_tensor = stack_views(&probe_refs, normalizer, dtype, &device)?;

    let steps_per_epoch = corpus.len().div_ceil(config.batch_size);
    let warmup_steps = config.warmup_epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut shuffle_rng = seed::rng(seed::derive(run_seed, "shuffle"));
    let mut step = 0usize;
    let start = Instant::now();

    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = config.learning_rate;
        for batch in order.chunks(config.batch_size) {
            lr = if step < warmup_steps {
                config.learning_rate * (step + 1) as f64 / warmup_steps as f64
            } else {
                config.learning_rate
            };
            opt.set_learning_rate(lr);

            let views: Vec<(Vec<FloatImage>, Vec<FloatImage>)> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let mut rng = seed::rng(seed::derive_indexed(
                        run_seed,
                        "crops",
                        (step * config.batch_size + k) as u64,
                    ));
                    multi_crop(&corpus[idx], config, &mut rng)
                })
                .collect::<Result<_>>()?;

            let at = |e: Error| match e {
                Error::Numerical { message, .. } => Error::Numerical { step, message },
                e => e,
            };
            let b = batch.len();
            let globals: Vec<&FloatImage> = (0..config.n_global_crops)
                .flat_map(|v| views.iter().map(move |(g, _)| &g[v]))
                .collect();
            let global_t = stack_views(&globals, normalizer, dtype, &device)?;
            let student_global = student.forward(&global_t)?;
            let teacher_global = teacher.forward(&global_t)?.detach();
            let mut student_views: Vec<Tensor> = (0..config.n_global_crops)
                .map(|v| student_global.narrow(0, v * b, b))
                .collect::<candle_core::Result<_>>()?;
            let teacher_views: Vec<Tensor> = (0..config.n_global_crops)
                .map(|v| teacher_global.narrow(0, v * b, b))
                .collect::<candle_core::Result<_>>()?;
            if config.n_local_crops > 0 {
                let locals: Vec<&FloatImage> = (0..config.n_local_crops)
                    .flat_map(|v| views.iter().map(move |(_, l)| &l[v]))
                    .collect();
                let local_out = student.forward(&stack_views(&locals, normalizer, dtype, &device)?)?;
                for v in 0..config.n_local_crops {
                    student_views.push(local_out.narrow(0, v * b, b)?);
                }
            }
            let loss = distill_loss(&student_views, &teacher_views, &center, config.student_temp, config.teacher_temp)
                .map_err(at)?;
            let loss_value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !loss_value.is_finite() {
                return Err(Error::Numerical {
                    step,
                    message: format!("pretraining loss is {loss_value}"),
                });
            }
            opt.backward_step(&loss)?;
            ema_update(&teacher_params, &student_params, config.ema_momentum)?;
            center = center_update(&center, &teacher_global, config.center_momentum)?;
            loss_sum += loss_value * b as f64;
            step += 1;
        }

        let emb = teacher
            .encoder
            .forward(&probe_tensor, false)?
            .to_dtype(DType::F32)?
            .to_vec2::<f32>()?;
        let spread = embedding_spread(&emb);
        let collapsed = spread <= config.collapse_threshold;
        if collapsed {
            let msg = format!("{run}: epoch {epoch} teacher embeddings collapsed (spread {spread:.3e})");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let record = EpochRecord {
            run: run.to_string(),
            epoch,
            loss: loss_sum / corpus.len() as f64,
            learning_rate: lr,
            collapse_stat: spread,
            collapsed,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "pretrain {run} epoch {epoch}: loss {:.4} spread {:.4}",
            record.loss,
            record.collapse_stat
        );
        log.push(record);
    }
    Ok(teacher.encoder)
}

/// Teacher-embedding spread of `encoder` over the first `n` corpus images.
pub fn probe_spread(encoder: &Encoder, corpus: &[FloatImage], normalizer: &Normalizer, input_px: usize, n: usize) -> Result<f64> {
    let probe: Vec<FloatImage> = corpus
        .iter()
        .take(n)
        .map(|img| img.resize_bilinear(input_px, input_px))
        .collect();
    let refs: Vec<&FloatImage> = probe.iter().collect();
    let first = encoder.params().params.values().next().expect("encoder has params");
    let x = stack_views(&refs, normalizer, first.dtype(), first.device())?;
    let emb = encoder.forward(&x, false)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    Ok(embedding_spread(&emb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;

    fn dev() -> Device {
        Device::Cpu
    }

    fn t64(rows: &[&[f64]]) -> Tensor {
        let k = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), k), &dev()).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    #[test]
    fn uniform_distributions_give_ln_k() {
        let k = 7;
        let zeros = Tensor::zeros((3, k), DType::F64, &dev()).unwrap();
        let c = Tensor::zeros(k, DType::F64, &dev()).unwrap();
        let l = distill_cross_entropy(&zeros, &zeros, &c, 0.1, 0.04).unwrap();
        assert!((scalar(&l) - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn near_one_hot_agreement_is_almost_free() {
        let t = t64(&[&[10.0, -10.0]]);
        let c = Tensor::zeros(2, DType::F64, &dev()).unwrap();
        let l = scalar(&distill_cross_entropy(&t, &t, &c, 1.0, 1.0).unwrap());
        assert!((0.0..=1e-3).contains(&l), "{l}");
    }

    #[test]
    fn loss_bounded_below_by_teacher_entropy() {
        let mut rng = seed::rng(11);
        for _ in 0..200 {
            let t: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let c: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (ts, tt) = (rng.random_range(0.05..1.0), rng.random_range(0.02..1.0));
            let loss = scalar(
                &distill_cross_entropy(&t64(&[&t]), &t64(&[&s]), &Tensor::new(c.as_slice(), &dev()).unwrap(), ts, tt).unwrap(),
            );
            let p = softmax(&t.iter().zip(&c).map(|(a, b)| (a - b) / tt).collect::<Vec<_>>());
            let entropy: f64 = -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
            assert!(loss >= entropy - 1e-12, "{loss} < {entropy}");
        }
    }

    #[test]
    fn shifting_teacher_and_center_together_is_invariant() {
        let t = t64(&[&[0.3, -1.2, 2.0, 0.1], &[1.0, 0.0, -0.5, 0.2]]);
        let s = t64(&[&[0.5, 0.1, -0.3, 1.1], &[0.0, 0.4, 0.9, -2.0]]);
        let c = Tensor::new(&[0.1f64, 0.2, -0.3, 0.0], &dev()).unwrap();
        let shift = Tensor::new(&[5.0f64, -2.0, 0.7, 3.3], &dev()).unwrap();
        let a = scalar(&distill_loss(&[s.clone(), s.clone()], &[t.clone(), t.clone()], &c, 0.1, 0.04).unwrap());
        let t2 = t.broadcast_add(&shift).unwrap();
        let c2 = (&c + &shift).unwrap();
        let b = scalar(&distill_loss(&[s.clone(), s], &[t2.clone(), t2], &c2, 0.1, 0.04).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn self_pairs_are_skipped() {
        // With one teacher view and two student views only (t0, s1) counts.
        let t = t64(&[&[1.0, 0.0, -1.0]]);
        let s0 = t64(&[&[9.0, -9.0, 0.0]]);
        let s1 = t64(&[&[0.2, 0.1, 0.0]]);
        let c = Tensor::zeros(3, DType::F64, &dev()).unwrap();
        let full = scalar(&distill_loss(&[s0, s1.clone()], std::slice::from_ref(&t), &c, 0.5, 0.5).unwrap());
        let pair = scalar(&distill_cross_entropy(&t, &s1, &c, 0.5, 0.5).unwrap());
        assert!((full - pair).abs() < 1e-15);
    }

    #[test]
    fn non_finite_logits_are_reported() {
        let t = t64(&[&[f64::NAN, 0.0]]);
        let c = Tensor::zeros(2, DType::F64, &dev()).unwrap();
        let err = distill_loss(&[t.clone(), t.clone()], std::slice::from_ref(&t), &c, 0.1, 0.04).unwrap_err();
        assert!(matches!(err, Error::Numerical { .. }));
    }

    fn group_of(values: &[(&str, &[f64])]) -> ParamGroup {
        let mut g = ParamGroup::default();
        for (n, v) in values {
            g.params.insert(n.to_string(), Var::new(*v, &dev()).unwrap());
        }
        g
    }

    #[test]
    fn ema_fixed_points_and_single_step() {
        let student = group_of(&[("w", &[0.0, 2.0])]);
        let teacher = group_of(&[("w", &[1.0, -1.0])]);
        ema_update(&teacher, &student, 0.9).unwrap();
        let w = teacher.params["w"].to_vec1::<f64>().unwrap();
        assert!((w[0] - 0.9).abs() < 1e-15 && (w[1] - (-0.9 + 0.2)).abs() < 1e-15);
        let before = teacher.params["w"].to_vec1::<f64>().unwrap();
        ema_update(&teacher, &student, 1.0).unwrap();
        assert_eq!(teacher.params["w"].to_vec1::<f64>().unwrap(), before);
        ema_update(&teacher, &student, 0.0).unwrap();
        assert_eq!(teacher.params["w"].to_vec1::<f64>().unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn center_fixed_points_and_single_step() {
        let c = Tensor::zeros(4, DType::F64, &dev()).unwrap();
        let batch = Tensor::ones((3, 4), DType::F64, &dev()).unwrap();
        let next = center_update(&c, &batch, 0.9).unwrap().to_vec1::<f64>().unwrap();
        assert!(next.iter().all(|v| (v - 0.1).abs() < 1e-15));
        assert_eq!(center_update(&c, &batch, 1.0).unwrap().to_vec1::<f64>().unwrap(), vec![0.0; 4]);
        assert_eq!(center_update(&c, &batch, 0.0).unwrap().to_vec1::<f64>().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn student_gradient_matches_finite_differences() {
        // Toy heads: student logits = x·Wᵀ + b with K = 4, teacher fixed.
        let mut rng = seed::rng(3);
        let mut rand = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let w = Var::from_tensor(&Tensor::from_vec(rand(12), (4, 3), &dev()).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::from_vec(rand(4), 4, &dev()).unwrap()).unwrap();
        let xs: Vec<Tensor> = (0..3).map(|_| Tensor::from_vec(rand(6), (2, 3), &dev()).unwrap()).collect();
        let teacher: Vec<Tensor> = (0..2).map(|_| Tensor::from_vec(rand(8), (2, 4), &dev()).unwrap()).collect();
        let center = Tensor::from_vec(rand(4), 4, &dev()).unwrap();
        let loss = |w: &Tensor, b: &Tensor| -> Tensor {
            let s: Vec<Tensor> = xs
                .iter()
                .map(|x| x.matmul(&w.t().unwrap()).unwrap().broadcast_add(b).unwrap())
                .collect();
            distill_loss(&s, &teacher, &center, 0.5, 0.3).unwrap()
        };
        let grads = loss(w.as_tensor(), b.as_tensor()).backward().unwrap();
        for var in [&w, &b] {
            let analytic = grads.get(var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for i in 0..base.len() {
                let eval = |d: f64| {
                    let mut v = base.clone();
                    v[i] += d;
                    let t = Tensor::from_vec(v, var.shape(), &dev()).unwrap();
                    if var.dims().len() == 2 {
                        scalar(&loss(&t, b.as_tensor()))
                    } else {
                        scalar(&loss(w.as_tensor(), &t))
                    }
                };
                let h = 1e-5;
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
                assert!(rel < 1e-3, "param {i}: {} vs {numeric}", analytic[i]);
            }
        }
    }

    #[test]
    fn no_gradient_reaches_teacher_or_center() {
        let wt = Var::new(&[[0.5f64, -0.2], [0.1, 0.3]], &dev()).unwrap();
        let ws = Var::new(&[[0.2f64, 0.1], [-0.4, 0.6]], &dev()).unwrap();
        let c = Var::new(&[0.1f64, -0.1], &dev()).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0]], &dev()).unwrap();
        let t = x.matmul(&wt.as_tensor().t().unwrap()).unwrap();
        let s = x.matmul(&ws.as_tensor().t().unwrap()).unwrap();
        let loss = distill_loss(&[s.clone(), s], &[t.clone(), t], c.as_tensor(), 0.1, 0.04).unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(&ws).is_some());
        assert!(grads.get(&wt).is_none());
        assert!(grads.get(&c).is_none());
    }

    fn test_image(px: usize) -> FloatImage {
        let mut rng = seed::rng(5);
        FloatImage::from_vec(3, px, px, (0..3 * px * px).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    #[test]
    fn multi_crop_counts_and_determinism() {
        let img = test_image(40);
        let mut cfg = DistillConfig {
            global_input_px: 16,
            local_input_px: 8,
            ..DistillConfig::default()
        };
        let (g, l) = multi_crop(&img, &cfg, &mut seed::rng(1)).unwrap();
        assert_eq!((g.len(), l.len()), (2, 4));
        assert_eq!(g[0].width(), 16);
        assert_eq!(l[0].width(), 8);
        let again = multi_crop(&img, &cfg, &mut seed::rng(1)).unwrap();
        assert_eq!(g, again.0);
        assert_eq!(l, again.1);
        cfg.n_local_crops = 0;
        let (g, l) = multi_crop(&img, &cfg, &mut seed::rng(2)).unwrap();
        assert_eq!(g.len() + l.len(), 2);
    }

    #[test]
    fn full_scale_without_augmentation_is_the_resized_image() {
        let img = test_image(24);
        let cfg = DistillConfig {
            global_crop_scale: (1.0, 1.0),
            global_input_px: 12,
            local_input_px: 8,
            n_local_crops: 0,
            augment: AugmentConfig::none(),
            ..DistillConfig::default()
        };
        let (g, _) = multi_crop(&img, &cfg, &mut seed::rng(9)).unwrap();
        let expected = img.resize_bilinear(12, 12);
        assert!(g.iter().all(|v| *v == expected));
    }

    #[test]
    fn tiny_images_are_rejected() {
        let err = multi_crop(&test_image(4), &DistillConfig::default(), &mut seed::rng(0)).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    #[test]
    fn blur_preserves_constants() {
        let img = FloatImage::from_vec(3, 6, 6, vec![0.25; 108]);
        assert!(gaussian_blur(&img, 0.8).data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn spread_of_identical_embeddings_is_zero() {
        assert_eq!(embedding_spread(&[vec![1.0, 2.0], vec![2.0, 4.0]]), 0.0);
        assert!(embedding_spread(&[vec![1.0, 0.0], vec![0.0, 1.0]]) > 0.4);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        for cfg in [
            DistillConfig { n_global_crops: 3, ..Default::default() },
            DistillConfig { teacher_temp: 0.0, ..Default::default() },
            DistillConfig { ema_momentum: 1.0, ..Default::default() },
            DistillConfig { local_crop_scale: (0.5, 0.2), ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    fn tiny_config() -> DistillConfig {
        DistillConfig {
            n_prototypes: 16,
            global_input_px: 16,
            local_input_px: 8,
            n_local_crops: 2,
            head_hidden_dim: 16,
            head_bottleneck_dim: 8,
            epochs: 1,
            batch_size: 4,
            warmup_epochs: 0,
            probe_batch: 8,
            ..DistillConfig::default()
        }
    }

    #[test]
    fn one_epoch_checkpoint_round_trips_through_probes() {
        let corpus: Vec<FloatImage> = (0..8).map(|i| {
            let mut img = test_image(24);
            img.data_mut()[i] = 0.0;
            img
        }).collect();
        let spec = EncoderSpec::small(8, 4);
        let cfg = tiny_config();
        let out = pretrain_loop(&corpus, &spec, &cfg).unwrap();
        assert_eq!(out.log.len(), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.safetensors");
        out.checkpoint(16, &cfg).unwrap().save(&path).unwrap();
        let net = crate::model::GlobalLocalNet::new(&spec, crate::model::Architecture::GlobalLocal, 1, DType::F32)
            .unwrap()
            .load_backbone(&crate::model::WeightsSource::PretrainedCheckpoint(path), 2)
            .unwrap();
        let ckpt_enc = &out.encoders["encoder"];
        assert_eq!(net.local_encoder().params().checksum().unwrap(), ckpt_enc.params().checksum().unwrap());

        let again = pretrain_loop(&corpus, &spec, &cfg).unwrap();
        assert_eq!(again.final_loss(), out.final_loss());
    }
}
