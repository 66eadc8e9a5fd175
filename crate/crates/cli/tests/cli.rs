use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

/// Pretraining settings small enough for plumbing tests.
const QUICK: [&str; 4] = ["--set", "pretrain.epochs=1", "--set", "corpus.n_images=48"];

fn jointscope(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointscope"))
        .arg("--run-root")
        .arg(root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = jointscope(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().filter(|l| l.starts_with('{')).collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    serde_json::from_str(lines[0]).unwrap()
}

fn resolved(root: &Path, run_id: &str) -> toml::Table {
    toml::from_str(&fs::read_to_string(root.join(run_id).join("config.resolved.toml")).unwrap()).unwrap()
}

#[test]
fn file_then_overrides_take_precedence_over_defaults() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("exp.toml");
    fs::write(
        &cfg,
        "run_id = \"prec\"\n[finetune]\nepochs = 3\nbatch_size = 4\n[synth]\nn_patients = 6\n",
    )
    .unwrap();
    let cfg_arg = cfg.to_str().unwrap();
    ok(root.path(), &["--config", cfg_arg, "--set", "finetune.epochs=4", "synth"]);
    let r = resolved(root.path(), "prec");
    assert_eq!(r["finetune"]["epochs"].as_integer(), Some(4));
    assert_eq!(r["finetune"]["batch_size"].as_integer(), Some(4));
    assert_eq!(r["synth"]["n_patients"].as_integer(), Some(6));
    assert_eq!(r["data"]["n_folds"].as_integer(), Some(5));
    let run = root.path().join("prec");
    let manifest = fs::read_to_string(run.join("data/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 12);

    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("provenance/synth.json")).unwrap()).unwrap();
    assert_eq!(prov["subcommand"], "synth");
    let hash = prov["outputs"]["data/manifest.jsonl"].as_str().unwrap();
    assert_eq!(hash, jointscope::pipeline::sha256_file(&run.join("data/manifest.jsonl")).unwrap());
    assert!(run.join("provenance/synth.config.toml").exists());
}

#[test]
fn unknown_key_is_a_one_line_config_error() {
    let root = tempfile::tempdir().unwrap();
    let out = jointscope(root.path(), &["--set", "finetune.lr=1", "crossval"]);
    let e = error_line(&out);
    assert_eq!(e["error"], "config");
    assert_eq!(e["subcommand"], "crossval");
    assert_eq!(e["stage"][0], "config");
    assert!(e["message"].as_str().unwrap().contains("lr"));
}

#[test]
fn bad_values_and_missing_inputs_fail_cleanly() {
    let root = tempfile::tempdir().unwrap();
    let e = error_line(&jointscope(root.path(), &["--set", "eval.threshold=2.0", "synth"]));
    assert_eq!(e["error"], "config");
    let e = error_line(&jointscope(root.path(), &["--set", "synth.n_patients=6", "evaluate", "--model", "missing.safetensors"]));
    assert_eq!(e["error"], "io");
    assert_eq!(e["subcommand"], "evaluate");
    let e = error_line(&jointscope(root.path(), &["--set", "synth.n_patients=6", "finetune", "--random-init", "--fold", "9"]));
    assert_eq!(e["error"], "config");
}

#[test]
fn finetune_then_evaluate_leaves_inputs_untouched() {
    let root = tempfile::tempdir().unwrap();
    let base = ["--set", "synth.n_patients=10", "--set", "finetune.epochs=2"];
    let mut args: Vec<&str> = base.to_vec();
    args.extend(QUICK);
    args.extend(["finetune", "--fold", "1"]);
    let model = ok(root.path(), &args).trim().to_string();
    assert!(model.ends_with("models/model_fold1.safetensors"));
    let before = jointscope::pipeline::sha256_file(Path::new(&model)).unwrap();

    let mut args: Vec<&str> = base.to_vec();
    args.extend(["evaluate", "--model", &model, "--fold", "1"]);
    let report_path = ok(root.path(), &args).trim().to_string();
    assert_eq!(jointscope::pipeline::sha256_file(Path::new(&model)).unwrap(), before);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["per_fold"].as_array().unwrap().len(), 1);
    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.path().join("default/provenance/evaluate.json")).unwrap()).unwrap();
    let model_key = Path::new(&model).strip_prefix(root.path().join("default")).unwrap().display().to_string();
    assert_eq!(prov["inputs"][model_key.as_str()], before.as_str());
}

#[test]
fn crossval_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut args: Vec<&str> = QUICK.to_vec();
    args.push("crossval");
    ok(a.path(), &args);
    ok(b.path(), &args);
    let dir_a = a.path().join("default/crossval");
    for k in 0..5 {
        assert!(dir_a.join(format!("fold_{k}.json")).exists());
    }
    let files: Vec<_> = fs::read_dir(&dir_a).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().is_file()).collect();
    assert_eq!(files.len(), 6);
    let agg = |p: &Path| fs::read(p.join("default/crossval/aggregate.json")).unwrap();
    assert_eq!(agg(a.path()), agg(b.path()));
    let report: serde_json::Value = serde_json::from_slice(&agg(a.path())).unwrap();
    assert_eq!(report["variant"], "Ours");
    assert_eq!(report["per_fold"].as_array().unwrap().len(), 5);
}

#[test]
fn default_ablation_smoke_test() {
    let root = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let csv_path = ok(root.path(), &["ablate"]).trim().to_string();
    let elapsed = start.elapsed();
    let csv = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,recall,precision,f1,gmean");
    let labels: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        labels,
        ["Ours", "w/o DINO pre-training", "w/o Focal Loss", "w/o Global/Local Encoder"]
    );
    for l in &lines[1..] {
        let values: Vec<f64> = l.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(values.len(), 4);
        assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let run = root.path().join("default");
    assert!(run.join("ablation/summary.json").exists());
    assert!(run.join("ablation/ablation.png").exists());
    assert!(run.join("backbone/pretrain_log.jsonl").exists());
    assert!(elapsed < Duration::from_secs(600), "smoke test took {elapsed:?}");
}
