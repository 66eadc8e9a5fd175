use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use jointscope::config::ExperimentConfig;
use jointscope::data::{load_manifest, DatasetManifest};
use jointscope::eval::{ablation_csv, bar_chart, write_text, EvalReport, FoldResult, Variant};
use jointscope::finetune::{finetune_loop, predict_all};
use jointscope::model::{DType, GlobalLocalNet, WeightsSource};
use jointscope::pipeline::{self, sha256_file};
use jointscope::preprocess::Normalizer;
use jointscope::{seed, Error};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "jointscope", version, about = "Per-joint inflammation detection pipeline")]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration value, e.g. `--set finetune.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Directory holding `<run_id>/` output folders.
    #[arg(long, env = "JOINTSCOPE_RUN_ROOT", default_value = "runs", global = true)]
    run_root: PathBuf,

    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic labeled dataset.
    Synth,
    /// Pretrain the encoder backbone by self-distillation.
    Pretrain,
    /// Fine-tune a network on one fold's training patients (or all records).
    Finetune {
        /// Backbone checkpoint; defaults to the run's pretrained backbone.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Start from randomly initialized encoders instead.
        #[arg(long, conflicts_with = "checkpoint")]
        random_init: bool,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Evaluate a fine-tuned model on one fold's test patients (or all records).
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Cross-validate the configured variant.
    Crossval,
    /// Cross-validate every configured ablation variant.
    Ablate,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Pretrain => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::Crossval => "crossval",
            Command::Ablate => "ablate",
        }
    }
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    subcommand: &'a str,
    stage: Vec<&'a str>,
    message: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let name = cli.command.name();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = ErrorLine {
                error: e.kind(),
                subcommand: name,
                stage: e.stages(),
                message: e.to_string().trim_end().to_string(),
            };
            eprintln!("{}", serde_json::to_string(&line).expect("error line serializes"));
            ExitCode::FAILURE
        }
    }
}

/// Built-in defaults, then the config file, then `--set` overrides.
fn load_config(file: Option<&Path>, overrides: &[String]) -> jointscope::Result<ExperimentConfig> {
    let mut value = toml::Value::try_from(ExperimentConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file_value: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, toml::Value::Table(file_value));
    }
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut patch = parsed;
        for part in key.trim().split('.').rev() {
            let mut t = toml::Table::new();
            t.insert(part.to_string(), patch);
            patch = toml::Value::Table(t);
        }
        merge(&mut value, patch);
    }
    let cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

struct Run {
    cfg: ExperimentConfig,
    dir: PathBuf,
    subcommand: &'static str,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Run {
    fn new(cfg: ExperimentConfig, run_root: &Path, subcommand: &'static str) -> jointscope::Result<Run> {
        let dir = run_root.join(&cfg.run_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Run {
            cfg,
            dir,
            subcommand,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.dir).unwrap_or(path).display().to_string()
    }

    fn input(&mut self, path: &Path) -> jointscope::Result<()> {
        self.inputs.insert(self.rel(path), sha256_file(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> jointscope::Result<()> {
        self.outputs.insert(self.rel(path), sha256_file(path)?);
        Ok(())
    }

    fn write_text(&mut self, rel: &str, text: &str) -> jointscope::Result<PathBuf> {
        let path = self.dir.join(rel);
        write_text(&path, text)?;
        self.output(&path)?;
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> jointscope::Result<PathBuf> {
        self.write_text(rel, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    /// Resolved config and input/output hashes for this subcommand.
    fn finish(self) -> jointscope::Result<()> {
        let resolved = toml::to_string(&self.cfg.resolved()).map_err(|e| Error::Config(e.to_string()))?;
        let cfg_path = self.dir.join("config.resolved.toml");
        write_text(&cfg_path, &resolved)?;
        write_text(&self.dir.join(format!("provenance/{}.config.toml", self.subcommand)), &resolved)?;
        let record = serde_json::json!({
            "subcommand": self.subcommand,
            "run_id": self.cfg.run_id,
            "seed": self.cfg.seed,
            "config_sha256": sha256_file(&cfg_path)?,
            "inputs": self.inputs,
            "outputs": self.outputs,
        });
        write_text(
            &self.dir.join(format!("provenance/{}.json", self.subcommand)),
            &(serde_json::to_string_pretty(&record)? + "\n"),
        )
    }

    /// The configured manifest, or this run's synthetic dataset (generated
    /// when missing or produced with different settings).
    fn dataset(&mut self) -> jointscope::Result<DatasetManifest> {
        let manifest = if let Some(path) = &self.cfg.data.manifest {
            let m = load_manifest(path)?;
            let path = path.clone();
            self.input(&path)?;
            m
        } else {
            let data_dir = self.dir.join("data");
            let manifest_path = data_dir.join("manifest.jsonl");
            let stamp = data_dir.join("fingerprint");
            let want = pipeline::dataset_fingerprint(&self.cfg)?;
            let fresh = fs::read_to_string(&stamp).is_ok_and(|s| s.trim() == want) && manifest_path.exists();
            if fresh {
                let m = load_manifest(&manifest_path)?;
                self.input(&manifest_path)?;
                m
            } else {
                let m = pipeline::load_or_generate_dataset(&self.cfg, &data_dir).map_err(|e| e.in_stage("synth"))?;
                write_text(&stamp, &want)?;
                self.output(&manifest_path)?;
                self.output(&data_dir.join("ledger.jsonl"))?;
                m
            }
        };
        Ok(manifest)
    }

    /// This run's pretrained backbone, trained when missing or stale.
    fn backbone(&mut self) -> jointscope::Result<PathBuf> {
        let path = self.dir.join("backbone/backbone.safetensors");
        let stamp = self.dir.join("backbone/fingerprint");
        let want = pipeline::backbone_fingerprint(&self.cfg)?;
        if fs::read_to_string(&stamp).is_ok_and(|s| s.trim() == want) && path.exists() {
            self.input(&path)?;
        } else {
            pipeline::pretrain_backbone(&self.cfg, &path)?;
            write_text(&stamp, &want)?;
            self.output(&path)?;
            self.output(&path.with_file_name("pretrain_log.jsonl"))?;
        }
        Ok(path)
    }
}

fn run(cli: &Cli) -> jointscope::Result<()> {
    let name = cli.command.name();
    let cfg = load_config(cli.config.as_deref(), &cli.overrides).map_err(|e| e.in_stage("config"))?;
    let mut run = Run::new(cfg, &cli.run_root, name)?;
    match &cli.command {
        Command::Synth => {
            run.dataset()?;
        }
        Command::Pretrain => {
            run.backbone()?;
        }
        Command::Finetune {
            checkpoint,
            random_init,
            fold,
        } => finetune(&mut run, checkpoint.as_deref(), *random_init, *fold)?,
        Command::Evaluate { model, fold } => evaluate(&mut run, model, *fold)?,
        Command::Crossval => crossval(&mut run)?,
        Command::Ablate => ablate(&mut run)?,
    }
    run.finish()
}

/// Record indices for training and testing: a fold split, or every record.
fn split(run: &mut Run, manifest: &DatasetManifest, fold: Option<usize>) -> jointscope::Result<(Vec<usize>, Vec<usize>)> {
    match fold {
        Some(k) => {
            let plan = pipeline::fold_plan(&run.cfg, manifest)?;
            if k >= plan.n_folds {
                return Err(Error::Config(format!("fold {k} out of range (n_folds = {})", plan.n_folds)));
            }
            run.write_json("folds.json", &plan)?;
            plan.split(manifest, k)
        }
        None => {
            let all: Vec<usize> = (0..manifest.records.len()).collect();
            Ok((all.clone(), all))
        }
    }
}

fn finetune(run: &mut Run, checkpoint: Option<&Path>, random_init: bool, fold: Option<usize>) -> jointscope::Result<()> {
    let manifest = run.dataset()?;
    let (train_idx, _) = split(run, &manifest, fold)?;
    let raw = jointscope::preprocess::prepare_records(&manifest, &train_idx, &run.cfg.preprocess)?;
    let init_seed = seed::derive_indexed(run.cfg.stage_seed("init"), "fold", fold.unwrap_or(0) as u64);
    let net = GlobalLocalNet::new(&run.cfg.model.spec(), run.cfg.model.architecture, init_seed, candle_dtype())?;
    let (net, norm) = if random_init {
        (net, Normalizer::fit(&raw))
    } else {
        let path = match checkpoint {
            Some(p) => {
                run.input(p)?;
                p.to_path_buf()
            }
            None => run.backbone()?,
        };
        let net = net.load_backbone(&WeightsSource::PretrainedCheckpoint(path.clone()), init_seed)?;
        (net, pipeline::backbone_normalizer(&path)?)
    };
    let train: Vec<_> = raw
        .into_iter()
        .map(|mut s| {
            norm.apply(&mut s);
            s
        })
        .collect();
    let mut tc = run.cfg.resolved().finetune;
    tc.seed = seed::derive_indexed(run.cfg.stage_seed("finetune"), "fold", fold.unwrap_or(0) as u64);
    let (net, log) = finetune_loop(net, &train, &tc).map_err(|e| e.in_stage("finetune"))?;
    let tag = fold.map_or("all".to_string(), |k| format!("fold{k}"));
    let model_path = run.dir.join(format!("models/model_{tag}.safetensors"));
    net.save(&model_path, &norm, run.cfg.preprocess.model_input_px)?;
    run.output(&model_path)?;
    run.write_json(&format!("logs/finetune_{tag}.json"), &log)?;
    println!("{}", model_path.display());
    Ok(())
}

fn evaluate(run: &mut Run, model: &Path, fold: Option<usize>) -> jointscope::Result<()> {
    let manifest = run.dataset()?;
    let (_, test_idx) = split(run, &manifest, fold)?;
    run.input(model)?;
    let (net, norm) = GlobalLocalNet::load(model, candle_dtype())?;
    let test: Vec<_> = jointscope::preprocess::prepare_records(&manifest, &test_idx, &run.cfg.preprocess)?
        .into_iter()
        .map(|mut s| {
            norm.apply(&mut s);
            s
        })
        .collect();
    let preds = predict_all(&net, &test, run.cfg.eval.predict_batch)?;
    let flat_p: Vec<f64> = preds.iter().flatten().copied().collect();
    let flat_y: Vec<Option<u8>> = test.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let result = FoldResult::new(fold.unwrap_or(0), &flat_p, &flat_y, run.cfg.eval.threshold, run.cfg.eval.auc);
    let stem = model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let mut report = EvalReport::from_folds(stem, run.cfg.eval.threshold, vec![result]);
    report
        .metadata
        .insert("records".into(), fold.map_or("all".into(), |k| format!("fold {k} test patients")));
    let path = run.write_json(&format!("reports/evaluate_{stem}.json"), &report)?;
    println!("{}", path.display());
    Ok(())
}

fn needs_backbone(variants: &[Variant]) -> bool {
    variants.iter().any(|v| v.uses_pretraining())
}

fn crossval(run: &mut Run) -> jointscope::Result<()> {
    let manifest = run.dataset()?;
    let raw = pipeline::prepare_all(&run.cfg, &manifest)?;
    let plan = pipeline::fold_plan(&run.cfg, &manifest)?;
    run.write_json("folds.json", &plan)?;
    let variant = run.cfg.eval.variant;
    let backbone = if needs_backbone(&[variant]) { Some(run.backbone()?) } else { None };
    let (report, folds) = pipeline::crossval_evaluate(&run.cfg, variant, &manifest, &raw, &plan, backbone.as_deref())
        .map_err(|e| e.in_stage("crossval"))?;
    for f in &folds {
        let k = f.result.fold;
        run.write_json(&format!("crossval/fold_{k}.json"), &f.result)?;
        run.write_json(&format!("crossval/logs/fold_{k}_finetune.json"), &f.log)?;
    }
    let path = run.write_json("crossval/aggregate.json", &report)?;
    println!("{}", path.display());
    Ok(())
}

fn ablate(run: &mut Run) -> jointscope::Result<()> {
    let manifest = run.dataset()?;
    let raw = pipeline::prepare_all(&run.cfg, &manifest)?;
    let plan = pipeline::fold_plan(&run.cfg, &manifest)?;
    run.write_json("folds.json", &plan)?;
    let variants = run.cfg.eval.variants.clone();
    let backbone = if needs_backbone(&variants) { Some(run.backbone()?) } else { None };
    let reports = pipeline::run_ablation(&run.cfg, &variants, &manifest, &raw, &plan, backbone.as_deref())
        .map_err(|e| e.in_stage("ablate"))?;
    let csv = run.write_text("ablation/ablation.csv", &ablation_csv(&reports))?;
    run.write_json("ablation/summary.json", &reports)?;
    if run.cfg.eval.plot {
        let png = run.dir.join("ablation/ablation.png");
        bar_chart(&reports).save(&png)?;
        run.output(&png)?;
    }
    println!("{}", csv.display());
    Ok(())
}

fn candle_dtype() -> DType {
    DType::F32
}
