use std::fs;
use std::path::Path;

use jointscope::config::ExperimentConfig;
use jointscope::data::{load_manifest, JointId};
use jointscope::image::FloatImage;
use jointscope::preprocess::{load_mask, load_rgb, prepare_raw, CropSpec, ManifestLandmarks};
use jointscope::synth::{generate_dataset, ledger_positive_counts, read_ledger, Prevalence, SynthConfig};

/// Central 99% interval of Binomial(1360, 0.05), from an exact CDF.
const BINOMIAL_99: (usize, usize) = (48, 90);

fn binomial_quantile(n: usize, p: f64, q: f64) -> usize {
    let mut pmf = (1.0 - p).powi(n as i32);
    let mut cdf = pmf;
    let mut k = 0;
    while cdf < q {
        pmf *= (n - k) as f64 / (k + 1) as f64 * p / (1.0 - p);
        k += 1;
        cdf += pmf;
    }
    k
}

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        n_patients: 6,
        images_per_patient: 2,
        image_size: (96, 96),
        marker_radius_px: 3,
        prevalence: Prevalence::Uniform(0.3),
        seed,
        ..SynthConfig::default()
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images", "masks"] {
        let d = dir.join(sub);
        let mut entries: Vec<_> = fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries.into_iter().filter(|p| p.is_file()) {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn frozen_binomial_interval_matches_recurrence() {
    assert_eq!(binomial_quantile(1360, 0.05, 0.005), BINOMIAL_99.0);
    assert_eq!(binomial_quantile(1360, 0.05, 0.995), BINOMIAL_99.1);
}

#[test]
fn positive_count_within_binomial_interval() {
    for root in 0..3 {
        let cfg = ExperimentConfig { seed: root, ..Default::default() }.resolved();
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&cfg.synth, dir.path()).unwrap();
        assert_eq!(manifest.records.len() * manifest.active_joints().len(), 1360);
        let k = manifest.positive_count();
        assert!((BINOMIAL_99.0..=BINOMIAL_99.1).contains(&k), "seed {root}: {k} positives");
    }
}

#[test]
fn same_config_gives_byte_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&small(5), a.path()).unwrap();
    generate_dataset(&small(5), b.path()).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), 2 + 2 * 12);
    assert_eq!(fa, fb);
    let c = tempfile::tempdir().unwrap();
    generate_dataset(&small(6), c.path()).unwrap();
    assert_ne!(fa, files(c.path()));
}

#[test]
fn zero_prevalence_gives_all_negative_labels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { prevalence: Prevalence::Uniform(0.0), ..small(1) };
    let manifest = generate_dataset(&cfg, dir.path()).unwrap();
    assert!(manifest
        .records
        .iter()
        .all(|r| JointId::all().all(|j| r.labels.get(j) == Some(0))));
    let ledger = read_ledger(&dir.path().join("ledger.jsonl")).unwrap();
    assert!(ledger.iter().all(|e| e.markers.is_empty()));
}

#[test]
fn ledger_and_manifest_agree() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&small(2), dir.path()).unwrap();
    assert_eq!(load_manifest(&dir.path().join("manifest.jsonl")).unwrap().records, manifest.records);
    let ledger = read_ledger(&dir.path().join("ledger.jsonl")).unwrap();
    assert_eq!(ledger.len(), manifest.records.len());
    for (entry, record) in ledger.iter().zip(&manifest.records) {
        assert_eq!(entry.image_path, record.image_path);
        for j in JointId::all() {
            assert_eq!(Some(entry.labels[j.index()]), record.labels.get(j));
            let marked = entry.markers.iter().find(|m| m.0 == j.index());
            assert_eq!(marked.is_some(), record.labels.get(j) == Some(1));
            if let Some(&(_, x, y)) = marked {
                let l = record.landmarks.get(j);
                assert_eq!((x, y), (l.x, l.y));
            }
        }
    }
    let counts = ledger_positive_counts(&ledger);
    let active: usize = manifest.active_joints().iter().map(|j| counts[&j.index()]).sum();
    assert_eq!(active, manifest.positive_count());
}

#[test]
fn stored_images_are_zero_outside_the_mask() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&small(3), dir.path()).unwrap();
    let spec = CropSpec { patch_size_px: 16, model_input_px: 16, ..CropSpec::default() };
    for record in &manifest.records {
        let mask = load_mask(&manifest.resolve(record.mask_path.as_ref().unwrap())).unwrap();
        let raw = load_rgb(&manifest.resolve(&record.image_path)).unwrap();
        assert!(raw.pixels().zip(mask.pixels()).any(|(p, m)| m[0] == 0 && p.0 != [0, 0, 0]));
        let masked = jointscope::preprocess::load_masked(&manifest, record).unwrap();
        let outside: u64 = masked
            .pixels()
            .zip(mask.pixels())
            .filter(|(_, m)| m[0] == 0)
            .map(|(p, _)| p.0.iter().map(|&v| u64::from(v)).sum::<u64>())
            .sum();
        assert_eq!(outside, 0);
        let s = prepare_raw(&manifest, record, &spec, &ManifestLandmarks).unwrap();
        assert_eq!(s.local_patches.len(), 10);
        assert_eq!(s.joint_ids, manifest.active_joints());
    }
}

#[test]
fn absent_labels_keep_their_positions() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = generate_dataset(&small(4), dir.path()).unwrap();
    let active = manifest.active_joints();
    let record = &mut manifest.records[0];
    for &k in &[1, 4, 8] {
        record.labels.set(active[k], None);
    }
    let s = prepare_raw(&manifest, &manifest.records[0], &CropSpec::default(), &ManifestLandmarks).unwrap();
    let absent: Vec<usize> = s.labels.iter().enumerate().filter(|(_, l)| l.is_none()).map(|(i, _)| i).collect();
    assert_eq!(absent, vec![1, 4, 8]);
}

fn correlation(a: &FloatImage, b: &FloatImage) -> f64 {
    let (x, y) = (a.data(), b.data());
    let n = x.len() as f64;
    let mx = x.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let my = y.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&u, &v) in x.iter().zip(y) {
        let (du, dv) = (f64::from(u) - mx, f64::from(v) - my);
        sxy += du * dv;
        sxx += du * du;
        syy += dv * dv;
    }
    sxy / (sxx * syy).sqrt()
}

#[test]
fn same_patient_patches_correlate_without_clutter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        background_clutter: 0.0,
        prevalence: Prevalence::Uniform(0.0),
        image_size: (160, 160),
        marker_radius_px: 4,
        ..small(8)
    };
    let manifest = generate_dataset(&cfg, dir.path()).unwrap();
    let spec = CropSpec { patch_size_px: 32, model_input_px: 32, ..CropSpec::default() };
    for p in 0..cfg.n_patients {
        let a = prepare_raw(&manifest, &manifest.records[2 * p], &spec, &ManifestLandmarks).unwrap();
        let b = prepare_raw(&manifest, &manifest.records[2 * p + 1], &spec, &ManifestLandmarks).unwrap();
        assert_eq!(manifest.records[2 * p].patient_id, manifest.records[2 * p + 1].patient_id);
        for (j, (pa, pb)) in a.local_patches.iter().zip(&b.local_patches).enumerate() {
            let r = correlation(pa, pb);
            assert!(r > 0.9, "patient {p} joint {j}: correlation {r}");
        }
    }
}
