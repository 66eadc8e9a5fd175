//! Turns manifest records into network-ready samples: background masking,
//! whole-hand resize and landmark-centred joint patches.
//!
//! Pixel values leave [`prepare_raw`] in `[0, 1]`; [`Normalizer`] then maps
//! each channel through `(v − mean_c) / std_c` with constants fitted on a
//! fold's training split.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetManifest, HandImageRecord, JointId, Landmarks};
use crate::error::{Error, Result};
use crate::image::{FloatImage, PaddingPolicy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropSpec {
    pub patch_size_px: usize,
    pub model_input_px: usize,
    pub padding_policy: PaddingPolicy,
}

impl Default for CropSpec {
    fn default() -> Self {
        CropSpec {
            patch_size_px: 64,
            model_input_px: 224,
            padding_policy: PaddingPolicy::ZeroPad,
        }
    }
}

impl CropSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size_px == 0 || self.model_input_px == 0 {
            return Err(Error::Config("crop sizes must be positive".into()));
        }
        if self.patch_size_px > self.model_input_px {
            return Err(Error::Config(format!(
                "patch_size_px {} exceeds model_input_px {}",
                self.patch_size_px, self.model_input_px
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub global_image: FloatImage,
    pub local_patches: Vec<FloatImage>,
    pub joint_ids: Vec<JointId>,
    pub labels: Vec<Option<u8>>,
}

/// Source of joint landmarks for a record. The manifest's precomputed
/// landmarks are the default; a live detector can implement this instead.
pub trait LandmarkProvider: Sync {
    fn landmarks(&self, record: &HandImageRecord, image: &RgbImage) -> Result<Landmarks>;
}

pub struct ManifestLandmarks;

impl LandmarkProvider for ManifestLandmarks {
    fn landmarks(&self, record: &HandImageRecord, _image: &RgbImage) -> Result<Landmarks> {
        Ok(record.landmarks.clone())
    }
}

/// Zeroes every pixel whose mask value is 0.
pub fn apply_mask(image: &RgbImage, mask: &GrayImage) -> Result<RgbImage> {
    if image.dimensions() != mask.dimensions() {
        return Err(Error::validation(
            "mask",
            format!(
                "mask is {:?} but image is {:?}",
                mask.dimensions(),
                image.dimensions()
            ),
        ));
    }
    let mut out = image.clone();
    for (px, m) in out.pixels_mut().zip(mask.pixels()) {
        if m[0] == 0 {
            px.0 = [0, 0, 0];
        }
    }
    Ok(out)
}

/// Cuts a `patch_size_px` window centred on each active joint's landmark
/// (rows/cols `[c − s/2, c + s/2)`) from the original-resolution image, then
/// resizes it bilinearly to `model_input_px`.
pub fn crop_joint_patches(
    image: &FloatImage,
    landmarks: &Landmarks,
    spec: &CropSpec,
    active_joints: &[JointId],
) -> Vec<FloatImage> {
    let s = spec.patch_size_px;
    active_joints
        .iter()
        .map(|&j| {
            let c = landmarks.get(j);
            let x0 = i64::from(c.x) - (s / 2) as i64;
            let y0 = i64::from(c.y) - (s / 2) as i64;
            image
                .crop(x0, y0, s, s, spec.padding_policy)
                .resize_bilinear(spec.model_input_px, spec.model_input_px)
        })
        .collect()
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn load_mask(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)?.to_luma8())
}

/// Masked original-resolution image of a record.
pub fn load_masked(manifest: &DatasetManifest, record: &HandImageRecord) -> Result<RgbImage> {
    let image = load_rgb(&manifest.resolve(&record.image_path))?;
    if image.dimensions() != (record.image_width, record.image_height) {
        return Err(Error::validation(
            &record.image_path,
            format!(
                "image is {:?}, manifest says {}x{}",
                image.dimensions(),
                record.image_width,
                record.image_height
            ),
        ));
    }
    match &record.mask_path {
        Some(m) => apply_mask(&image, &load_mask(&manifest.resolve(m))?),
        None => Ok(image),
    }
}

/// Unnormalized sample, pixel values in `[0, 1]`.
pub fn prepare_raw(
    manifest: &DatasetManifest,
    record: &HandImageRecord,
    spec: &CropSpec,
    provider: &dyn LandmarkProvider,
) -> Result<PreparedSample> {
    let masked = load_masked(manifest, record)?;
    let landmarks = provider.landmarks(record, &masked)?;
    let full = FloatImage::from_rgb8(&masked);
    let active = manifest.active_joints();
    let global_image = full.resize_bilinear(spec.model_input_px, spec.model_input_px);
    let local_patches = crop_joint_patches(&full, &landmarks, spec, &active);
    Ok(PreparedSample {
        global_image,
        local_patches,
        labels: active.iter().map(|&j| record.labels.get(j)).collect(),
        joint_ids: active,
    })
}

/// Masked, resized, cropped and normalized sample.
pub fn prepare_sample(
    manifest: &DatasetManifest,
    record: &HandImageRecord,
    spec: &CropSpec,
    normalizer: &Normalizer,
) -> Result<PreparedSample> {
    let mut s = prepare_raw(manifest, record, spec, &ManifestLandmarks)?;
    normalizer.apply(&mut s);
    Ok(s)
}

/// Raw samples for the given record indices, prepared concurrently.
pub fn prepare_records(
    manifest: &DatasetManifest,
    indices: &[usize],
    spec: &CropSpec,
) -> Result<Vec<PreparedSample>> {
    spec.validate()?;
    indices
        .par_iter()
        .map(|&i| prepare_raw(manifest, &manifest.records[i], spec, &ManifestLandmarks))
        .collect()
}

/// Per-channel affine normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer::identity()
    }
}

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Fits mean and standard deviation over every pixel of the global
    /// images and patches of `samples`.
    pub fn fit(samples: &[PreparedSample]) -> Self {
        Normalizer::fit_images(
            samples
                .iter()
                .flat_map(|s| std::iter::once(&s.global_image).chain(s.local_patches.iter())),
        )
    }

    pub fn fit_images<'a>(images: impl Iterator<Item = &'a FloatImage>) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut n = 0usize;
        for img in images {
            for (c, (s, q)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
                for &v in img.plane(c) {
                    *s += f64::from(v);
                    *q += f64::from(v) * f64::from(v);
                }
            }
            n += img.height() * img.width();
        }
        if n == 0 {
            return Normalizer::identity();
        }
        let mut out = Normalizer::identity();
        for c in 0..3 {
            let m = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - m * m).max(0.0);
            out.mean[c] = m as f32;
            out.std[c] = (var.sqrt() as f32).max(1e-3);
        }
        out
    }

    pub fn normalize(&self, img: &mut FloatImage) {
        let n = img.height() * img.width();
        for c in 0..img.channels().min(3) {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in &mut img.data_mut()[c * n..(c + 1) * n] {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn denormalize(&self, img: &mut FloatImage) {
        let n = img.height() * img.width();
        for c in 0..img.channels().min(3) {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in &mut img.data_mut()[c * n..(c + 1) * n] {
                *v = *v * s + m;
            }
        }
    }

    pub fn apply(&self, sample: &mut PreparedSample) {
        self.normalize(&mut sample.global_image);
        for p in &mut sample.local_patches {
            self.normalize(p);
        }
    }
}

/// On-disk cache of prepared samples keyed by (manifest hash, spec hash,
/// fold id).
pub struct PreparedCache {
    dir: PathBuf,
}

impl PreparedCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        PreparedCache { dir: dir.into() }
    }

    pub fn key(manifest: &DatasetManifest, spec: &CropSpec, fold: usize) -> String {
        let mut h = Sha256::new();
        h.update(manifest.to_text().as_bytes());
        h.update(serde_json::to_vec(spec).expect("spec serializes"));
        h.update(fold.to_le_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.safetensors"))
    }

    pub fn get(&self, key: &str) -> Result<Option<Vec<PreparedSample>>> {
        let path = self.path(key);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes)?;
        let shape = st.tensor("shape")?;
        let dims: Vec<usize> = shape
            .data()
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
            .collect();
        let [n, joints, px] = dims[..] else {
            return Err(Error::Config(format!("corrupt cache entry {key}")));
        };
        let floats = |name: &str| -> Result<Vec<f32>> {
            Ok(st
                .tensor(name)?
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect())
        };
        let global = floats("global")?;
        let local = floats("local")?;
        let labels = st.tensor("labels")?.data().to_vec();
        let ids = st.tensor("joint_ids")?.data().to_vec();
        let plane = 3 * px * px;
        let samples = (0..n)
            .map(|i| PreparedSample {
                global_image: FloatImage::from_vec(3, px, px, global[i * plane..(i + 1) * plane].to_vec()),
                local_patches: (0..joints)
                    .map(|j| {
                        let o = (i * joints + j) * plane;
                        FloatImage::from_vec(3, px, px, local[o..o + plane].to_vec())
                    })
                    .collect(),
                joint_ids: ids.iter().map(|&j| JointId::new(usize::from(j)).expect("cached id")).collect(),
                labels: labels[i * joints..(i + 1) * joints]
                    .iter()
                    .map(|&l| (l != u8::MAX).then_some(l))
                    .collect(),
            })
            .collect();
        Ok(Some(samples))
    }

    pub fn put(&self, key: &str, samples: &[PreparedSample]) -> Result<()> {
        use safetensors::tensor::{Dtype, TensorView};
        let Some(first) = samples.first() else {
            return Ok(());
        };
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let (n, joints, px) = (samples.len(), first.local_patches.len(), first.global_image.width());
        let shape: Vec<u8> = [n as u64, joints as u64, px as u64]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let to_bytes = |it: &mut dyn Iterator<Item = f32>| -> Vec<u8> { it.flat_map(f32::to_le_bytes).collect() };
        let global = to_bytes(&mut samples.iter().flat_map(|s| s.global_image.data().iter().copied()));
        let local = to_bytes(&mut samples.iter().flat_map(|s| s.local_patches.iter().flat_map(|p| p.data().iter().copied())));
        let labels: Vec<u8> = samples
            .iter()
            .flat_map(|s| s.labels.iter().map(|l| l.unwrap_or(u8::MAX)))
            .collect();
        let ids: Vec<u8> = first.joint_ids.iter().map(|j| j.index() as u8).collect();
        let views = vec![
            ("shape", TensorView::new(Dtype::U64, vec![3], &shape)?),
            ("global", TensorView::new(Dtype::F32, vec![n, 3, px, px], &global)?),
            ("local", TensorView::new(Dtype::F32, vec![n, joints, 3, px, px], &local)?),
            ("labels", TensorView::new(Dtype::U8, vec![n, joints], &labels)?),
            ("joint_ids", TensorView::new(Dtype::U8, vec![joints], &ids)?),
        ];
        let path = self.path(key);
        safetensors::serialize_to_file(views, None, &path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use image::Rgb;

    use super::*;
    use crate::data::Landmark;

    fn landmarks_at(points: &[(u32, u32)]) -> Landmarks {
        let mut arr = [Landmark { x: 0, y: 0 }; 14];
        for (i, &(x, y)) in points.iter().cycle().take(14).enumerate() {
            arr[i] = Landmark { x, y };
        }
        Landmarks::new(arr)
    }

    #[test]
    fn mask_identity_and_annihilation() {
        let img = RgbImage::from_fn(5, 4, |x, y| Rgb([x as u8 * 40, y as u8 * 50, 200]));
        let ones = GrayImage::from_pixel(5, 4, image::Luma([255]));
        let zeros = GrayImage::new(5, 4);
        assert_eq!(apply_mask(&img, &ones).unwrap(), img);
        assert!(apply_mask(&img, &zeros).unwrap().pixels().all(|p| p.0 == [0, 0, 0]));
        assert!(apply_mask(&img, &GrayImage::new(4, 4)).is_err());
    }

    #[test]
    fn constant_image_gives_constant_patch() {
        let img = FloatImage::from_vec(3, 128, 128, vec![0.4; 3 * 128 * 128]);
        let spec = CropSpec::default();
        let joints: Vec<JointId> = JointId::all().take(1).collect();
        let p = &crop_joint_patches(&img, &landmarks_at(&[(64, 64)]), &spec, &joints)[0];
        assert_eq!((p.height(), p.width()), (224, 224));
        assert!(p.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn corner_landmark_zero_pads_three_quadrants() {
        let img = FloatImage::from_vec(1, 100, 100, vec![1.0; 100 * 100]);
        let spec = CropSpec {
            patch_size_px: 64,
            model_input_px: 64,
            padding_policy: PaddingPolicy::ZeroPad,
        };
        let joints: Vec<JointId> = JointId::all().take(1).collect();
        let p = &crop_joint_patches(&img, &landmarks_at(&[(0, 0)]), &spec, &joints)[0];
        for y in 0..64 {
            for x in 0..64 {
                let expect = if x >= 32 && y >= 32 { 1.0 } else { 0.0 };
                assert_eq!(p.get(0, y, x), expect, "({x},{y})");
            }
        }
        let clamp = CropSpec {
            padding_policy: PaddingPolicy::Clamp,
            ..spec
        };
        let p = &crop_joint_patches(&img, &landmarks_at(&[(0, 0)]), &clamp, &joints)[0];
        assert!(p.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn normalization_round_trips_within_quantization() {
        let data: Vec<f32> = (0..3 * 16).map(|i| (i * 5 % 256) as f32 / 255.0).collect();
        let img = FloatImage::from_vec(3, 4, 4, data);
        let norm = Normalizer::fit_images(std::iter::once(&img));
        let mut x = img.clone();
        norm.normalize(&mut x);
        for c in 0..3 {
            let m: f32 = x.plane(c).iter().sum::<f32>() / 16.0;
            assert!(m.abs() < 1e-5);
        }
        norm.denormalize(&mut x);
        for (a, b) in x.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn crop_spec_rejects_patch_larger_than_input() {
        let spec = CropSpec {
            patch_size_px: 65,
            model_input_px: 64,
            ..CropSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
