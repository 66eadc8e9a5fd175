#![allow(dead_code)]

use std::collections::BTreeSet;

use jointscope::data::{
    DatasetManifest, FoldPlan, HandImageRecord, HandSide, JointId, JointLabels, Landmark, Landmarks, JOINT_COUNT,
};
use jointscope::image::FloatImage;
use jointscope::preprocess::{crop_joint_patches, CropSpec};
use rand::Rng;

/// Manifest with `1..=max_patients` patients, one to three records each and
/// random labels. Patient ids are drawn non-contiguously.
pub fn random_manifest(rng: &mut impl Rng, min_patients: usize, max_patients: usize) -> DatasetManifest {
    let n = rng.random_range(min_patients..=max_patients);
    let mut records = Vec::new();
    for p in 0..n {
        let id = format!("pt{}", p * 7 + rng.random_range(0..7));
        for i in 0..rng.random_range(1..=3) {
            let mut labels = JointLabels::default();
            for j in JointId::all() {
                let u: f64 = rng.random();
                labels.set(j, if u < 0.1 { None } else { Some(u8::from(u > 0.9)) });
            }
            records.push(HandImageRecord {
                image_path: format!("{id}_{i}.png"),
                patient_id: id.clone(),
                hand_side: HandSide::Left,
                capture_week: i * 12,
                mask_path: None,
                image_width: 32,
                image_height: 32,
                landmarks: Landmarks::new([Landmark { x: 16, y: 16 }; JOINT_COUNT]),
                labels,
            });
        }
    }
    DatasetManifest::new(records, ".").unwrap()
}

/// Every patient is tested exactly once, never trained on in the fold that
/// tests it, and record splits follow patient splits.
pub fn check_fold_hygiene(manifest: &DatasetManifest, plan: &FoldPlan) -> Result<(), String> {
    let patients = manifest.patients();
    let mut seen = BTreeSet::new();
    for k in 0..plan.n_folds {
        let test = plan.test_patients(k);
        let train = plan.train_patients(k);
        if let Some(p) = test.intersection(&train).next() {
            return Err(format!("fold {k}: patient {p} in train and test"));
        }
        let union: BTreeSet<&str> = test.union(&train).copied().collect();
        if union != patients {
            return Err(format!("fold {k}: train and test do not cover all patients"));
        }
        for p in &test {
            if !seen.insert(p.to_string()) {
                return Err(format!("patient {p} tested twice"));
            }
        }
        let (tr, te) = plan.split(manifest, k).map_err(|e| e.to_string())?;
        for &i in &tr {
            if test.contains(manifest.records[i].patient_id.as_str()) {
                return Err(format!("fold {k}: record {i} of a test patient in training"));
            }
        }
        for &i in &te {
            if !test.contains(manifest.records[i].patient_id.as_str()) {
                return Err(format!("fold {k}: record {i} tested outside its fold"));
            }
        }
        if tr.len() + te.len() != manifest.records.len() {
            return Err(format!("fold {k}: records lost"));
        }
    }
    if seen.len() != patients.len() {
        return Err("test partitions do not tile the patient set".into());
    }
    Ok(())
}

/// Spread-out landmarks inside a `w × h` image.
pub fn landmark_grid(w: u32, h: u32) -> Landmarks {
    let mut points = [Landmark { x: 0, y: 0 }; JOINT_COUNT];
    for (i, p) in points.iter_mut().enumerate() {
        *p = Landmark {
            x: (w * (1 + (i as u32 % 5) * 2)) / 11,
            y: (h * (1 + (i as u32 / 5) * 3)) / 10,
        };
    }
    Landmarks::new(points)
}

/// For each of the 14 joints, the per-axis distance in output pixels between
/// the brightest pixel of its patch and the patch center, when a single
/// bright pixel sits on that joint's landmark.
pub fn impulse_offsets(w: u32, h: u32, landmarks: &Landmarks, spec: &CropSpec) -> Vec<f64> {
    let joints: Vec<JointId> = JointId::all().collect();
    joints
        .iter()
        .map(|&j| {
            let mut img = FloatImage::zeros(3, h as usize, w as usize);
            let l = landmarks.get(j);
            for c in 0..3 {
                img.set(c, l.y as usize, l.x as usize, 1.0);
            }
            let patch = &crop_joint_patches(&img, landmarks, spec, &[j])[0];
            let plane = patch.plane(0);
            let (mut best, mut at) = (f32::MIN, 0);
            for (i, &v) in plane.iter().enumerate() {
                if v > best {
                    best = v;
                    at = i;
                }
            }
            let n = spec.model_input_px;
            let (y, x) = ((at / n) as f64, (at % n) as f64);
            let centre = (n as f64 - 1.0) / 2.0;
            (y - centre).abs().max((x - centre).abs())
        })
        .collect()
}
