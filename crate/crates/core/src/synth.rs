//! Procedural hand images with controllable per-joint "inflammation" markers.
//!
//! A patient is a fixed hand geometry (finger lengths, angles, skin tone)
//! drawn from the patient seed; each image of that patient shifts the whole
//! hand by at most `landmark_jitter_px` pixels per axis and redraws noise and
//! clutter. A joint labeled 1 gets a disk of radius `marker_radius_px` around
//! its landmark in which red rises by `0.6·I` and green/blue fall by `0.4·I`
//! (`I = marker_intensity`, channel units in `[0, 1]`), so the redness
//! `R − (G + B)/2` rises by exactly `I` before clipping.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    DatasetManifest, HandImageRecord, HandSide, JointId, JointLabels, Landmark, Landmarks,
    JOINT_COUNT,
};
use crate::error::{Error, Result};
use crate::seed;

/// Per-joint positive probability: one number for every joint, or 14 in
/// canonical joint order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prevalence {
    Uniform(f64),
    PerJoint(Vec<f64>),
}

impl Prevalence {
    pub fn get(&self, joint: JointId) -> f64 {
        match self {
            Prevalence::Uniform(p) => *p,
            Prevalence::PerJoint(v) => v[joint.index()],
        }
    }

    fn validate(&self) -> Result<()> {
        if let Prevalence::PerJoint(v) = self {
            if v.len() != JOINT_COUNT {
                return Err(Error::Config(format!(
                    "prevalence needs {JOINT_COUNT} entries, got {}",
                    v.len()
                )));
            }
        }
        if JointId::all().any(|j| !(0.0..=1.0).contains(&self.get(j))) {
            return Err(Error::Config("prevalence values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub images_per_patient: usize,
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
    pub prevalence: Prevalence,
    pub marker_intensity: f64,
    pub marker_radius_px: u32,
    pub background_clutter: f64,
    /// Maximum per-axis shift of a patient's hand between images.
    pub landmark_jitter_px: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 68,
            images_per_patient: 2,
            image_size: (160, 160),
            prevalence: Prevalence::Uniform(0.05),
            marker_intensity: 0.5,
            marker_radius_px: 4,
            background_clutter: 0.3,
            landmark_jitter_px: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.prevalence.validate()?;
        let (w, h) = self.image_size;
        if w < 32 || h < 32 {
            return Err(Error::Config("image_size must be at least 32x32".into()));
        }
        if self.marker_radius_px == 0 || 4 * self.marker_radius_px >= w.min(h) {
            return Err(Error::Config(
                "marker_radius_px must be positive and below min(image dimensions)/4".into(),
            ));
        }
        if !(self.marker_intensity > 0.0 && self.marker_intensity <= 1.0) {
            return Err(Error::Config("marker_intensity must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.background_clutter) {
            return Err(Error::Config("background_clutter must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One rendered hand.
#[derive(Debug, Clone)]
pub struct RenderedHand {
    pub image: RgbImage,
    pub mask: GrayImage,
    pub landmarks: Landmarks,
    pub hand_side: HandSide,
}

/// One ledger line: the ground truth behind a rendered record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub image_path: String,
    pub patient_id: String,
    /// All 14 labels in canonical order.
    pub labels: Vec<u8>,
    /// `[joint_index, x, y]` for every drawn marker.
    pub markers: Vec<(usize, u32, u32)>,
}

pub fn patient_seed(config: &SynthConfig, patient: usize) -> u64 {
    seed::derive_indexed(config.seed, "synth/patient", patient as u64)
}

pub fn image_seed(config: &SynthConfig, patient: usize, image: usize) -> u64 {
    seed::derive_indexed(
        patient_seed(config, patient),
        "synth/image",
        image as u64,
    )
}

/// Draws labels for every joint of one image.
pub fn draw_labels(config: &SynthConfig, patient: usize, image: usize) -> JointLabels {
    let mut rng = seed::rng(seed::derive(image_seed(config, patient, image), "labels"));
    let mut labels = JointLabels::default();
    for j in JointId::all() {
        let u: f64 = rng.random();
        labels.set(j, Some(u8::from(u < config.prevalence.get(j))));
    }
    labels
}

/// Renders the dataset, writing `images/`, `masks/`, `manifest.jsonl` and
/// `ledger.jsonl` under `out_dir`.
pub fn generate_dataset(config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let jobs: Vec<(usize, usize)> = (0..config.n_patients)
        .flat_map(|p| (0..config.images_per_patient).map(move |i| (p, i)))
        .collect();
    let rendered: Vec<(HandImageRecord, LedgerEntry, RenderedHand)> = jobs
        .par_iter()
        .map(|&(p, i)| {
            let labels = draw_labels(config, p, i);
            let hand = render_hand(patient_seed(config, p), image_seed(config, p, i), &labels, config);
            let stem = format!("p{p:03}_w{:02}", 12 * i);
            let record = HandImageRecord {
                image_path: format!("images/{stem}.png"),
                patient_id: format!("p{p:03}"),
                hand_side: hand.hand_side,
                capture_week: 12 * i as u32,
                mask_path: Some(format!("masks/{stem}.png")),
                image_width: config.image_size.0,
                image_height: config.image_size.1,
                landmarks: hand.landmarks.clone(),
                labels,
            };
            let ledger = LedgerEntry {
                image_path: record.image_path.clone(),
                patient_id: record.patient_id.clone(),
                labels: JointId::all().map(|j| labels.get(j).unwrap_or(0)).collect(),
                markers: JointId::all()
                    .filter(|&j| labels.get(j) == Some(1))
                    .map(|j| {
                        let p = hand.landmarks.get(j);
                        (j.index(), p.x, p.y)
                    })
                    .collect(),
            };
            (record, ledger, hand)
        })
        .collect();

    let mut ledger_text = String::new();
    let mut records = Vec::with_capacity(rendered.len());
    for (record, ledger, hand) in rendered {
        let img_path = out_dir.join(&record.image_path);
        hand.image.save(&img_path)?;
        let mask_path = out_dir.join(record.mask_path.as_deref().expect("synthetic masks"));
        hand.mask.save(&mask_path)?;
        ledger_text.push_str(&serde_json::to_string(&ledger)?);
        ledger_text.push('\n');
        records.push(record);
    }
    let ledger_path = out_dir.join("ledger.jsonl");
    fs::write(&ledger_path, ledger_text).map_err(|e| Error::io(&ledger_path, e))?;
    let manifest = DatasetManifest::new(records, out_dir)?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    half_width: f64,
}

impl Capsule {
    fn contains(&self, q: (f64, f64)) -> bool {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = (((q.0 - self.a.0) * dx + (q.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0);
        let (px, py) = (self.a.0 + t * dx - q.0, self.a.1 + t * dy - q.1);
        px * px + py * py <= self.half_width * self.half_width
    }
}

/// A patient's hand in a canonical frame (unit = min image side, right hand,
/// fingers pointing up, thumb towards −x).
struct HandGeometry {
    side: HandSide,
    center: (f64, f64),
    scale: f64,
    rotation: f64,
    palm_center: (f64, f64),
    palm_axes: (f64, f64),
    capsules: Vec<Capsule>,
    joints: [(f64, f64); JOINT_COUNT],
    joint_dirs: [(f64, f64); JOINT_COUNT],
    joint_half_width: [f64; JOINT_COUNT],
    skin: [f64; 3],
}

fn direction(deg: f64) -> (f64, f64) {
    let a = deg * PI / 180.0;
    (a.sin(), -a.cos())
}

fn step(p: (f64, f64), d: (f64, f64), len: f64) -> (f64, f64) {
    (p.0 + d.0 * len, p.1 + d.1 * len)
}

impl HandGeometry {
    fn from_seed(patient_seed: u64, config: &SynthConfig) -> Self {
        let mut rng = seed::rng(patient_seed);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let side = if u(0.0, 1.0) < 0.5 { HandSide::Left } else { HandSide::Right };
        let (w, h) = (f64::from(config.image_size.0), f64::from(config.image_size.1));
        let center = (w * (0.5 + u(-0.03, 0.03)), h * (0.55 + u(-0.03, 0.03)));
        let scale = w.min(h) * u(0.9, 1.05);
        let rotation = u(-7.0, 7.0) * PI / 180.0;

        let mut joints = [(0.0, 0.0); JOINT_COUNT];
        let mut joint_dirs = [(0.0, -1.0); JOINT_COUNT];
        let mut joint_half_width = [0.0; JOINT_COUNT];
        let mut capsules = Vec::new();

        // index, middle, ring, little: base x, angle, segment lengths, half-width
        let fingers = [
            (-0.105, -9.0, [0.105, 0.062, 0.048], 0.029),
            (-0.035, -2.0, [0.115, 0.072, 0.052], 0.030),
            (0.035, 4.0, [0.108, 0.066, 0.050], 0.029),
            (0.100, 11.0, [0.085, 0.050, 0.043], 0.025),
        ];
        for (f, (bx, angle, lens, hw)) in fingers.into_iter().enumerate() {
            let len_scale = u(0.9, 1.1);
            let d = direction(angle + u(-4.0, 4.0));
            let mcp = (bx + u(-0.008, 0.008), -0.01);
            let pip = step(mcp, d, lens[0] * len_scale);
            let dip = step(pip, d, lens[1] * len_scale);
            let tip = step(dip, d, lens[2] * len_scale);
            let hw = hw * u(0.92, 1.08);
            for (j, p) in [(1 + f, mcp), (6 + f, pip), (10 + f, dip)] {
                joints[j] = p;
                joint_dirs[j] = d;
                joint_half_width[j] = hw;
            }
            capsules.push(Capsule {
                a: step(mcp, d, -0.04),
                b: tip,
                half_width: hw,
            });
        }
        let cmc = (-0.12 + u(-0.008, 0.008), 0.2);
        let d1 = direction(-55.0 + u(-5.0, 5.0));
        let d2 = direction(-35.0 + u(-5.0, 5.0));
        let len_scale = u(0.9, 1.1);
        let mcp = step(cmc, d1, 0.085 * len_scale);
        let ip = step(mcp, d2, 0.065 * len_scale);
        let tip = step(ip, d2, 0.05 * len_scale);
        let hw = 0.033 * u(0.92, 1.08);
        joints[0] = mcp;
        joints[5] = ip;
        joint_dirs[0] = d1;
        joint_dirs[5] = d2;
        joint_half_width[0] = hw;
        joint_half_width[5] = hw;
        capsules.push(Capsule { a: cmc, b: mcp, half_width: hw });
        capsules.push(Capsule { a: mcp, b: tip, half_width: hw });

        let r = u(175.0, 200.0);
        let g = r - u(40.0, 55.0);
        let b = g - u(15.0, 25.0);

        HandGeometry {
            side,
            center,
            scale,
            rotation,
            palm_center: (0.0, 0.13),
            palm_axes: (0.165 * u(0.95, 1.05), 0.175 * u(0.95, 1.05)),
            capsules,
            joints,
            joint_dirs,
            joint_half_width,
            skin: [r, g, b],
        }
    }

    fn to_world(&self, q: (f64, f64), shift: (f64, f64)) -> (f64, f64) {
        let qx = if self.side == HandSide::Left { -q.0 } else { q.0 };
        let (c, s) = (self.rotation.cos(), self.rotation.sin());
        (
            self.center.0 + shift.0 + self.scale * (c * qx - s * q.1),
            self.center.1 + shift.1 + self.scale * (s * qx + c * q.1),
        )
    }

    fn to_canonical(&self, p: (f64, f64), shift: (f64, f64)) -> (f64, f64) {
        let (dx, dy) = (
            (p.0 - self.center.0 - shift.0) / self.scale,
            (p.1 - self.center.1 - shift.1) / self.scale,
        );
        let (c, s) = (self.rotation.cos(), self.rotation.sin());
        let qx = c * dx + s * dy;
        let qy = -s * dx + c * dy;
        (if self.side == HandSide::Left { -qx } else { qx }, qy)
    }

    fn inside(&self, q: (f64, f64)) -> bool {
        let (ex, ey) = (
            (q.0 - self.palm_center.0) / self.palm_axes.0,
            (q.1 - self.palm_center.1) / self.palm_axes.1,
        );
        if ex * ex + ey * ey <= 1.0 {
            return true;
        }
        if (-0.11..=0.11).contains(&q.0) && q.1 >= 0.2 {
            return true;
        }
        self.capsules.iter().any(|c| c.contains(q))
    }
}

/// Renders one image. All randomness comes from the two seeds; `labels`
/// only decides where markers are drawn, so flipping labels changes pixels
/// inside marker disks and nowhere else.
pub fn render_hand(
    patient_seed: u64,
    image_seed: u64,
    labels: &JointLabels,
    config: &SynthConfig,
) -> RenderedHand {
    let geo = HandGeometry::from_seed(patient_seed, config);
    let mut rng = seed::rng(image_seed);
    let (w, h) = config.image_size;
    let j = i64::from(config.landmark_jitter_px);
    let shift = (rng.random_range(-j..=j) as f64, rng.random_range(-j..=j) as f64);

    let mut landmark_arr = [Landmark { x: 0, y: 0 }; JOINT_COUNT];
    let mut centers = [(0.0, 0.0); JOINT_COUNT];
    for (i, &q) in geo.joints.iter().enumerate() {
        let base = geo.to_world(q, (0.0, 0.0));
        let x = (base.0.round() + shift.0).clamp(0.0, f64::from(w - 1));
        let y = (base.1.round() + shift.1).clamp(0.0, f64::from(h - 1));
        landmark_arr[i] = Landmark { x: x as u32, y: y as u32 };
        centers[i] = (x, y);
    }

    let clutter = config.background_clutter;
    let intensity = config.marker_intensity;
    let radius = f64::from(config.marker_radius_px);

    let mut inside = vec![false; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let q = geo.to_canonical((f64::from(x) + 0.5, f64::from(y) + 0.5), shift);
            inside[(y * w + x) as usize] = geo.inside(q);
        }
    }

    // Per-image random draws, consumed in a fixed order regardless of labels.
    let tint = rng.random_range(-0.08..=0.08) * clutter;
    let illum = 1.0 + rng.random_range(-0.1..=0.1) * clutter;
    let background: f64 = rng.random_range(20.0..60.0);
    let natural: Vec<f64> = (0..JOINT_COUNT)
        .map(|_| rng.random_range(0.0..=0.5) * clutter * intensity)
        .collect();
    let n_blobs = (clutter * 12.0).round() as usize;
    let hand_pixels: Vec<usize> = (0..inside.len()).filter(|&i| inside[i]).collect();
    let mut blobs = Vec::with_capacity(n_blobs);
    let mut attempts = 0;
    while blobs.len() < n_blobs && attempts < 200 && !hand_pixels.is_empty() {
        attempts += 1;
        let idx = hand_pixels[rng.random_range(0..hand_pixels.len())];
        let (bx, by) = ((idx as u32 % w) as f64, (idx as u32 / w) as f64);
        let amp = rng.random_range(0.3..=1.0) * intensity;
        let br = rng.random_range(0.6..=1.2) * radius;
        let far = centers
            .iter()
            .all(|c| ((c.0 - bx).powi(2) + (c.1 - by).powi(2)).sqrt() >= 2.5 * radius);
        if far {
            blobs.push((bx, by, br, amp));
        }
    }
    let noise = Normal::new(0.0, 2.0 + 10.0 * clutter).expect("finite std");
    let bg_noise = Normal::new(0.0, 8.0).expect("finite std");

    let mut image = RgbImage::new(w, h);
    let mut mask = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let idx = (y * w + x) as usize;
            let p = (f64::from(x), f64::from(y));
            let n: [f64; 3] = [
                noise.sample(&mut rng),
                noise.sample(&mut rng),
                noise.sample(&mut rng),
            ];
            if !inside[idx] {
                let v = background + bg_noise.sample(&mut rng);
                let v = v.round().clamp(0.0, 255.0) as u8;
                image.put_pixel(x, y, Rgb([v, v, v.saturating_add(6)]));
                continue;
            }
            mask.put_pixel(x, y, Luma([255]));
            let q = geo.to_canonical((p.0 + 0.5, p.1 + 0.5), shift);
            let shade = illum * (1.0 + 0.06 * q.0 - 0.05 * q.1);
            let mut rgb = [
                geo.skin[0] * shade * (1.0 + tint),
                geo.skin[1] * shade,
                geo.skin[2] * shade * (1.0 - tint),
            ];
            // Knuckle creases: a thin darker line across each joint.
            for jn in 0..JOINT_COUNT {
                let (cx, cy) = geo.joints[jn];
                let d = geo.joint_dirs[jn];
                let rel = (q.0 - cx, q.1 - cy);
                let along = (rel.0 * d.0 + rel.1 * d.1) * geo.scale;
                let across = (rel.0 * d.1 - rel.1 * d.0).abs();
                if along.abs() < 0.6 && across < geo.joint_half_width[jn] * 0.8 {
                    for v in rgb.iter_mut() {
                        *v *= 0.9;
                    }
                }
            }
            let mut redness = 0.0;
            for (jn, c) in centers.iter().enumerate() {
                let d2 = (c.0 - p.0).powi(2) + (c.1 - p.1).powi(2);
                redness += natural[jn] * (-d2 / (2.0 * radius * radius)).exp();
            }
            for &(bx, by, br, amp) in &blobs {
                let d = ((bx - p.0).powi(2) + (by - p.1).powi(2)).sqrt();
                redness += amp * disk_weight(d, br);
            }
            for joint in JointId::all() {
                if labels.get(joint) == Some(1) {
                    let c = centers[joint.index()];
                    let d = ((c.0 - p.0).powi(2) + (c.1 - p.1).powi(2)).sqrt();
                    redness += intensity * disk_weight(d, radius);
                }
            }
            rgb[0] += 0.6 * redness * 255.0;
            rgb[1] -= 0.4 * redness * 255.0;
            rgb[2] -= 0.4 * redness * 255.0;
            let px = [0, 1, 2].map(|c| (rgb[c] + n[c]).round().clamp(0.0, 255.0) as u8);
            image.put_pixel(x, y, Rgb(px));
        }
    }

    RenderedHand {
        image,
        mask,
        landmarks: Landmarks::new(landmark_arr),
        hand_side: geo.side,
    }
}

/// Flat disk with a one-pixel linear rim.
fn disk_weight(d: f64, radius: f64) -> f64 {
    (radius + 0.5 - d).clamp(0.0, 1.0)
}

/// Redness `R − (G + B)/2` of a pixel in `[0, 1]` channel units.
pub fn redness(px: &Rgb<u8>) -> f64 {
    (f64::from(px[0]) - 0.5 * (f64::from(px[1]) + f64::from(px[2]))) / 255.0
}

/// Hand-written marker detector: mean redness in the marker disk minus mean
/// redness in the surrounding annulus, thresholded at `marker_intensity / 2`.
/// Only hand pixels (mask > 0) are considered.
pub fn detect_marker(
    image: &RgbImage,
    mask: &GrayImage,
    center: Landmark,
    config: &SynthConfig,
) -> bool {
    let r = f64::from(config.marker_radius_px);
    let (inner_lo, inner_hi) = (r + 2.0, 2.0 * r + 2.0);
    let (mut disk, mut nd, mut ring, mut nr) = (0.0, 0usize, 0.0, 0usize);
    let reach = inner_hi.ceil() as i64;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let (x, y) = (i64::from(center.x) + dx, i64::from(center.y) + dy);
            if x < 0 || y < 0 || x >= i64::from(image.width()) || y >= i64::from(image.height()) {
                continue;
            }
            if mask.get_pixel(x as u32, y as u32)[0] == 0 {
                continue;
            }
            let d = ((dx * dx + dy * dy) as f64).sqrt();
            let v = redness(image.get_pixel(x as u32, y as u32));
            if d <= r - 0.5 {
                disk += v;
                nd += 1;
            } else if d >= inner_lo && d <= inner_hi {
                ring += v;
                nr += 1;
            }
        }
    }
    if nd == 0 || nr == 0 {
        return false;
    }
    disk / nd as f64 - ring / nr as f64 > config.marker_intensity / 2.0
}

/// Counts of positives per joint index across ledger entries.
pub fn ledger_positive_counts(entries: &[LedgerEntry]) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for e in entries {
        for (j, &l) in e.labels.iter().enumerate() {
            *out.entry(j).or_insert(0) += usize::from(l);
        }
    }
    out
}
