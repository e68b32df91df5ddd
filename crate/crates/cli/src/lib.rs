//! Command-line front end: dataset synthesis, training, finetuning,
//! evaluation, keypoint export and visual dumps.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use wskd::checkpoint::Checkpoint;
use wskd::data::{load_manifest, Dataset, Manifest, Split};
use wskd::evaluation::{
    annotated_points, dump_visuals, flip_consistency, posture_classifier, probe_report, BboxNorm, PckAccumulator,
    PostureConfig, VisualMode,
};
use wskd::geometry::KeypointSet;
use wskd::networks::{Model, ScaleProfile};
use wskd::toy::{synth_toy_dataset, ToyParams};
use wskd::training::{
    evaluate_pck, finetune_keypoints, train, EpochLog, FinetuneConfig, KeypointRegressor, TrainConfig, LAST_CHECKPOINT,
    REGRESSOR_PARTS_KEY,
};

pub type CliResult<T> = std::result::Result<T, Box<dyn std::error::Error>>;

/// File name of the finetuned regressor inside the output directory.
pub const REGRESSOR_FILE: &str = "regressor.safetensors";

/// Config-file keys that are not training settings.
const COMMAND_KEYS: [&str; 5] = ["checkpoint", "fraction", "metric", "alpha", "mode"];

#[derive(Debug, Parser)]
#[command(name = "wskd", version, about = "Weakly-supervised keypoint discovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic creature dataset with ground truth.
    SynthData(SynthArgs),
    /// Train the discovery model on a manifest.
    Train(TrainArgs),
    /// Finetune the keypoint network on a labeled fraction and report PCK.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Export discovered keypoints for every image of a manifest.
    Discover(DiscoverArgs),
    /// Write keypoint, reconstruction or manipulation images.
    Visualize(VisualizeArgs),
}

/// Settings shared by every verb that builds a training configuration.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat TOML file; keys mirror the flag names.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    #[arg(long, default_value_t = 3)]
    classes: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Continue from the last checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Discovery checkpoint; without it the keypoint network starts from random weights.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Held-out manifest; without it the test split of `--manifest` is used.
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    metric: Option<Metric>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Manifest the probe or posture classifier is fitted on; without it the
    /// train split of `--manifest` is used and the test split is scored.
    #[arg(long)]
    fit_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiscoverArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VisualizeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Number of images to render.
    #[arg(long, default_value_t = 8)]
    limit: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Metric {
    /// PCK of a finetuned checkpoint, or of discovered keypoints when their count matches the annotation.
    Pck,
    /// Linear probe from discovered to annotated keypoints.
    Probe,
    /// Weak-head classification accuracy.
    Accuracy,
    /// Distance between keypoints of mirrored images and mirrored keypoints.
    Flip,
    /// Posture classifier on discovered keypoints.
    Posture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Keypoints,
    Reconstruction,
    Manipulation,
}

impl From<ModeArg> for VisualMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Keypoints => VisualMode::Keypoints,
            ModeArg::Reconstruction => VisualMode::Reconstruction,
            ModeArg::Manipulation => VisualMode::Manipulation,
        }
    }
}

/// Parses `argv` (including the program name), runs the verb and returns the
/// process exit code: 0 on success, 1 on a runtime failure, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> CliResult<Value> {
    match command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Discover(a) => discover_cmd(a),
        Command::Visualize(a) => visualize_cmd(a),
    }
}

/// Training configuration plus the command-level keys of the config file.
struct Resolved {
    train: TrainConfig,
    extra: toml::Table,
}

impl Resolved {
    fn load(a: &ConfigArgs) -> CliResult<Self> {
        let mut table = match &a.config {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?
                .parse::<toml::Table>()
                .map_err(|e| format!("config parse error: {e}"))?,
            None => toml::Table::new(),
        };
        let mut extra = toml::Table::new();
        for key in COMMAND_KEYS {
            if let Some(v) = table.remove(key) {
                extra.insert(key.to_string(), v);
            }
        }
        if let Some(p) = &a.preset {
            table.insert("preset".into(), toml::Value::String(p.clone()));
        }
        let mut train = TrainConfig::from_toml_str(&table.to_string())?;
        if let Some(s) = a.seed {
            train.seed = s;
        }
        if a.deterministic {
            train.deterministic = true;
        }
        if let Some(e) = a.epochs {
            train.epochs = e;
        }
        if let Some(b) = a.batch {
            train.batch = b;
        }
        if let Some(o) = &a.out {
            train.out = o.to_string_lossy().into_owned();
        }
        if let Some(m) = &a.manifest {
            train.manifest = m.to_string_lossy().into_owned();
        }
        if train.deterministic {
            // Fixes the thread count of every rayon pool created afterwards.
            std::env::set_var("RAYON_NUM_THREADS", "1");
        }
        Ok(Self { train, extra })
    }

    fn manifest(&self) -> CliResult<(Manifest, PathBuf)> {
        if self.train.manifest.is_empty() {
            return Err("a manifest is required (--manifest or the config key `manifest`)".into());
        }
        let path = PathBuf::from(&self.train.manifest);
        Ok((load_manifest(&path)?, path))
    }

    fn path(&self, flag: &Option<PathBuf>, key: &str) -> Option<PathBuf> {
        flag.clone().or_else(|| self.extra.get(key).and_then(|v| v.as_str()).map(PathBuf::from))
    }

    fn float(&self, flag: Option<f64>, key: &str, default: f64) -> CliResult<f64> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.extra.get(key) {
            None => Ok(default),
            Some(toml::Value::Float(f)) => Ok(*f),
            Some(toml::Value::Integer(i)) => Ok(*i as f64),
            Some(other) => Err(format!("config key `{key}` must be a number, got {other}").into()),
        }
    }

    fn string(&self, key: &str) -> Option<String> {
        self.extra.get(key).and_then(|v| v.as_str()).map(str::to_string)
    }

    fn image_size(&self) -> usize {
        ScaleProfile::by_name(self.train.profile).image_size
    }
}

fn require(path: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    path.ok_or_else(|| format!("--{what} is required").into())
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn synth_data(a: SynthArgs) -> CliResult<Value> {
    let params = ToyParams {
        classes: a.classes,
        ..ToyParams::default()
    };
    let ds = synth_toy_dataset(&a.out, a.n, a.seed, a.split.into(), &params)?;
    Ok(json!({
        "images": ds.records.len(),
        "classes": ds.header.classes,
        "manifest": a.out.join(wskd::toy::MANIFEST_FILE),
        "ground_truth": a.out.join(wskd::toy::GROUND_TRUTH_FILE),
    }))
}

/// Per-epoch numbers without wall-clock timings, so reruns compare equal.
fn epoch_metrics(e: &EpochLog) -> Value {
    json!({
        "epoch": e.epoch,
        "perceptual": e.perceptual,
        "weak": e.weak,
        "equivariance": e.equivariance,
        "total": e.total,
        "accuracy": e.accuracy,
        "val_total": e.val_total,
    })
}

fn train_cmd(a: TrainArgs) -> CliResult<Value> {
    let r = Resolved::load(&a.cfg)?;
    let (manifest, _) = r.manifest()?;
    let data = Dataset::load(&manifest, r.image_size(), None)?;
    let out = PathBuf::from(&r.train.out);
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.toml"), r.train.to_toml_string()?)?;
    let mut hook = |_: &Model, e: &EpochLog| {
        eprintln!(
            "epoch {} total {:.4} accuracy {} ({:.1}s)",
            e.epoch,
            e.total,
            e.accuracy.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
            e.seconds
        );
        Ok(())
    };
    let (_, log) = train(&r.train, &data, a.resume, Some(&mut hook))?;
    let last = out.join("checkpoints").join(LAST_CHECKPOINT);
    let report = json!({
        "config_hash": log.config_hash,
        "epochs": log.epochs.iter().map(epoch_metrics).collect::<Vec<_>>(),
        "checkpoint": format!("checkpoints/{LAST_CHECKPOINT}"),
        "checkpoint_sha256": sha256_file(&last)?,
    });
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

/// Splits a manifest into fit and evaluation sets: an explicit second manifest
/// is used whole, otherwise the train and test splits of the first.
fn fit_and_test(r: &Resolved, manifest: &Manifest, other: Option<&Path>, other_is_fit: bool) -> CliResult<(Dataset, Dataset)> {
    let size = r.image_size();
    match other {
        Some(p) => {
            let second = Dataset::load(&load_manifest(p)?, size, None)?;
            let first = Dataset::load(manifest, size, None)?;
            Ok(if other_is_fit { (second, first) } else { (first, second) })
        }
        None => {
            let fit = Dataset::load(manifest, size, Some(Split::Train))?;
            let test = Dataset::load(manifest, size, Some(Split::Test))?;
            if fit.is_empty() || test.is_empty() {
                return Err("the manifest needs both train and test records, or pass a second manifest".into());
            }
            Ok((fit, test))
        }
    }
}

fn finetune_cmd(a: FinetuneArgs) -> CliResult<Value> {
    let r = Resolved::load(&a.cfg)?;
    let (manifest, _) = r.manifest()?;
    let eval_manifest = a.eval_manifest.clone();
    let (fit, test) = fit_and_test(&r, &manifest, eval_manifest.as_deref(), false)?;
    let defaults = FinetuneConfig::default();
    let fcfg = FinetuneConfig {
        fraction: r.float(a.fraction, "fraction", defaults.fraction)?,
        alpha: r.float(a.alpha, "alpha", defaults.alpha)?,
        epochs: a.cfg.epochs.unwrap_or(defaults.epochs),
        batch: a.cfg.batch.unwrap_or(defaults.batch),
        seed: r.train.seed,
        ..defaults
    };
    let model = match r.path(&a.checkpoint, "checkpoint") {
        Some(p) => Model::from_checkpoint(&Checkpoint::load(&p)?)?,
        None => Model::new(r.train.model_config(manifest.classes()), r.train.seed)?,
    };
    let (reg, report) = finetune_keypoints(model, &fit, &test, &fcfg)?;
    let out = PathBuf::from(&r.train.out);
    let mut ck = Checkpoint::new();
    reg.write_state(&mut ck)?;
    std::fs::create_dir_all(&out)?;
    let ck_path = out.join(REGRESSOR_FILE);
    ck.save(&ck_path)?;
    let value = json!({
        "report": report,
        "checkpoint": REGRESSOR_FILE,
        "checkpoint_sha256": sha256_file(&ck_path)?,
    });
    write_json(&out.join("finetune_report.json"), &value)?;
    Ok(value)
}

fn images(ds: &Dataset) -> Vec<&wskd::raster::Image> {
    ds.samples.iter().map(|s| &s.image).collect()
}

fn eval_cmd(a: EvalArgs) -> CliResult<Value> {
    let r = Resolved::load(&a.cfg)?;
    let ck_path = require(r.path(&a.checkpoint, "checkpoint"), "checkpoint")?;
    let metric = match (a.metric, r.string("metric")) {
        (Some(m), _) => m,
        (None, Some(s)) => Metric::from_str(&s, true).map_err(|_| format!("unknown metric {s:?}"))?,
        (None, None) => return Err("--metric is required".into()),
    };
    let alpha = r.float(a.alpha, "alpha", 0.1)?;
    let (manifest, _) = r.manifest()?;
    let ck = Checkpoint::load(&ck_path)?;
    let size = r.image_size();
    let report = match metric {
        Metric::Pck => {
            let data = Dataset::load(&manifest, size, None)?;
            let pck = if ck.metadata.contains_key(REGRESSOR_PARTS_KEY) {
                evaluate_pck(&KeypointRegressor::from_checkpoint(&ck)?, &data, alpha, BboxNorm::Max)?
            } else {
                let model = Model::from_checkpoint(&ck)?;
                if model.config().parts != data.arity {
                    return Err(format!(
                        "checkpoint predicts {} keypoints but the manifest annotates {}; finetune first or use --metric probe",
                        model.config().parts,
                        data.arity
                    )
                    .into());
                }
                let kps = model.predict_keypoints(&images(&data), 32)?;
                let mut acc = PckAccumulator::new(data.arity, alpha, BboxNorm::Max)?;
                for (s, k) in data.samples.iter().zip(&kps) {
                    if let Some(gt) = &s.keypoints {
                        acc.add(k.coords(), gt, s.bbox.unwrap_or([0.0, 0.0, 1.0, 1.0]))?;
                    }
                }
                acc.result()
            };
            json!({ "metric": metric, "alpha": alpha, "mean": pck.mean, "per_keypoint": pck.per_keypoint, "correct": pck.correct, "visible": pck.visible })
        }
        Metric::Probe => {
            let model = Model::from_checkpoint(&ck)?;
            let (fit, test) = fit_and_test(&r, &manifest, a.fit_manifest.as_deref(), true)?;
            let fit_kps = model.predict_keypoints(&images(&fit), 32)?;
            let test_kps = model.predict_keypoints(&images(&test), 32)?;
            let p = probe_report(&fit_kps, &annotated_points(&fit.samples)?, &test_kps, &annotated_points(&test.samples)?)?;
            json!({ "metric": metric, "mean_error_percent": p.mean_error, "images": p.per_image.len(), "ridge_fallback": p.ridge_fallback })
        }
        Metric::Accuracy => {
            let model = Model::from_checkpoint(&ck)?;
            let data = Dataset::load(&manifest, size, None)?;
            let labels: Vec<usize> = data.samples.iter().map(|s| s.label).collect();
            let acc = wskd::evaluation::weak_accuracy(&model, &images(&data), &labels)?;
            json!({ "metric": metric, "accuracy": acc, "images": labels.len() })
        }
        Metric::Flip => {
            let model = Model::from_checkpoint(&ck)?;
            let data = Dataset::load(&manifest, size, None)?;
            json!({ "metric": metric, "mean_distance": flip_consistency(&model, &images(&data))?, "images": data.len() })
        }
        Metric::Posture => {
            let model = Model::from_checkpoint(&ck)?;
            let (fit, test) = fit_and_test(&r, &manifest, a.fit_manifest.as_deref(), true)?;
            let labels = |d: &Dataset| -> CliResult<Vec<usize>> {
                d.samples
                    .iter()
                    .enumerate()
                    .map(|(i, s)| s.posture.ok_or_else(|| format!("record {i} has no posture label").into()))
                    .collect()
            };
            let cfg = PostureConfig {
                seed: r.train.seed,
                ..PostureConfig::default()
            };
            let rep = posture_classifier(
                &model.predict_keypoints(&images(&fit), 32)?,
                &labels(&fit)?,
                &model.predict_keypoints(&images(&test), 32)?,
                &labels(&test)?,
                &cfg,
            )?;
            json!({ "metric": metric, "accuracy": rep.accuracy, "confusion": rep.confusion, "epochs_run": rep.epochs_run })
        }
    };
    if let Some(out) = &a.cfg.out {
        write_json(&out.join(format!("eval_{}.json", report["metric"].as_str().unwrap_or("report"))), &report)?;
    }
    Ok(report)
}

fn discover_cmd(a: DiscoverArgs) -> CliResult<Value> {
    let r = Resolved::load(&a.cfg)?;
    let ck_path = require(r.path(&a.checkpoint, "checkpoint"), "checkpoint")?;
    let (manifest, _) = r.manifest()?;
    let model = Model::from_checkpoint(&Checkpoint::load(&ck_path)?)?;
    let data = Dataset::load(&manifest, r.image_size(), None)?;
    let kps: Vec<KeypointSet> = model.predict_keypoints(&images(&data), 32)?;
    let entries: Vec<Value> = manifest
        .records
        .iter()
        .zip(&kps)
        .map(|(rec, k)| json!({ "image": rec.image, "keypoints": k.coords() }))
        .collect();
    let path = PathBuf::from(&r.train.out).join("keypoints.json");
    write_json(&path, &Value::Array(entries))?;
    Ok(json!({ "images": kps.len(), "keypoints": model.config().parts, "output": path }))
}

fn visualize_cmd(a: VisualizeArgs) -> CliResult<Value> {
    let r = Resolved::load(&a.cfg)?;
    let ck_path = require(r.path(&a.checkpoint, "checkpoint"), "checkpoint")?;
    let mode: VisualMode = match (a.mode, r.string("mode")) {
        (Some(m), _) => m.into(),
        (None, Some(s)) => ModeArg::from_str(&s, true).map_err(|_| format!("unknown mode {s:?}"))?.into(),
        (None, None) => VisualMode::Keypoints,
    };
    let (manifest, _) = r.manifest()?;
    let model = Model::from_checkpoint(&Checkpoint::load(&ck_path)?)?;
    let data = Dataset::load(&manifest, r.image_size(), None)?;
    let n = a.limit.min(data.len());
    let imgs: Vec<_> = data.samples[..n].iter().map(|s| s.image.clone()).collect();
    let names: Vec<String> = manifest.records[..n]
        .iter()
        .map(|rec| {
            Path::new(&rec.image)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| rec.image.clone())
        })
        .collect();
    let out = PathBuf::from(&r.train.out);
    let files = dump_visuals(&model, &imgs, &names, mode, &out)?;
    Ok(json!({ "files": files }))
}
