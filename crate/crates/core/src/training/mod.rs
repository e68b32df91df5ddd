//! Joint training of the keypoint, reconstruction and weak-supervision
//! streams, plus supervised keypoint finetuning.

mod config;
mod finetune;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

pub use config::{TrainConfig, PRESETS};
pub use finetune::{
    decode_heatmaps, evaluate_pck, finetune_keypoints, heatmap_regression_loss, nested_subset, regression_targets, FinetuneConfig,
    FinetuneReport, KeypointRegressor, REGRESSOR_PARTS_KEY,
};

use crate::checkpoint::Checkpoint;
use crate::data::{make_pair, record_rng, Dataset, Split, TrainPair};
use crate::error::{Error, Result};
use crate::losses::{equivariance_loss, perceptual_loss, total_loss, weak_loss, LossComponents};
use crate::networks::{images_to_tensor, keypoints_from_tensor, keypoints_to_tensor, Mode, Model, MultiScaleFeatures, ParamStore};
use crate::sampler;
use crate::tensor_ops;

const STREAM_SHUFFLE: u64 = 1;
const STREAM_PAIR: u64 = 2;
const STREAM_VAL: u64 = 3;

/// SGD with classical momentum: `v ← μv + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter that received a gradient; the rest
    /// (and their momentum) are left untouched.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        for (name, var) in params.trainable() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let v = match self.velocity.get(name) {
                Some(prev) if self.momentum > 0.0 => ((prev * self.momentum)? + g)?,
                _ => g.clone(),
            };
            var.set(&(var.as_tensor() - (&v * self.lr)?)?)?;
            self.velocity.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn write_state(&self, ck: &mut Checkpoint) -> Result<()> {
        for (name, v) in &self.velocity {
            ck.insert(format!("optim.{name}"), v.dims().to_vec(), v.flatten_all()?.to_vec1::<f32>()?)?;
        }
        Ok(())
    }

    pub fn load_state(&mut self, ck: &Checkpoint, device: &Device) -> Result<()> {
        self.velocity.clear();
        for (name, t) in &ck.tensors {
            if let Some(param) = name.strip_prefix("optim.") {
                self.velocity.insert(
                    param.to_string(),
                    Tensor::from_vec(t.data.clone(), t.shape.as_slice(), device)?,
                );
            }
        }
        Ok(())
    }
}

/// Scalars from one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub perceptual: Option<f64>,
    pub weak: Option<f64>,
    pub equivariance: Option<f64>,
    pub total: f64,
    pub correct: usize,
    pub count: usize,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_scalar::<f32>()? as f64)
}

fn split_features(feats: &MultiScaleFeatures, at: usize) -> Result<(MultiScaleFeatures, MultiScaleFeatures)> {
    let n = feats.blocks[0].dim(0)?;
    let part = |start: usize, len: usize| -> Result<MultiScaleFeatures> {
        let b: Vec<Tensor> = feats
            .blocks
            .iter()
            .map(|t| t.narrow(0, start, len))
            .collect::<std::result::Result<_, _>>()?;
        Ok(MultiScaleFeatures {
            blocks: b.try_into().expect("four blocks"),
        })
    };
    Ok((part(0, at)?, part(at, n - at)?))
}

fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    Ok(logits.argmax(1)?.to_vec1::<u32>()?.into_iter().map(|v| v as usize).collect())
}

/// Loss terms for one batch. Source and target share one encoder pass.
fn forward_losses(model: &Model, pairs: &[TrainPair], cfg: &TrainConfig, epoch: usize, mode: Mode) -> Result<(LossComponents, usize)> {
    let weights = cfg.loss_weights();
    let size = model.config().profile.image_size;
    let dev = model.device();
    let b = pairs.len();
    let sources: Vec<_> = pairs.iter().map(|p| &p.source).collect();
    let targets: Vec<_> = pairs.iter().map(|p| &p.target).collect();
    let src = images_to_tensor(&sources, size, dev)?;
    let tgt = images_to_tensor(&targets, size, dev)?;
    let feats = model.encode(&Tensor::cat(&[&src, &tgt], 0)?, mode)?;
    let (src_feats, tgt_feats) = split_features(&feats, b)?;
    let det = model.detect(&tgt_feats, mode)?;

    let mut c = LossComponents::default();
    let mut correct = 0;
    if weights.perceptual > 0.0 {
        let recon = model.reconstruct(src_feats.deepest(), &det.keypoints, mode)?;
        c.perceptual = Some(perceptual_loss(model.perceptual(), &tgt, &recon)?);
    }
    if weights.weak > 0.0 {
        let labels: Vec<usize> = pairs.iter().map(|p| p.label).collect();
        let logits = model.classify(&tgt_feats, &det.heatmaps, mode)?;
        correct = argmax_rows(&logits)?.iter().zip(&labels).filter(|(a, b)| a == b).count();
        c.weak = Some(weak_loss(&logits, &labels)?);
    }
    if weights.equivariance > 0.0 && weights.equivariance_active(epoch) {
        let sc = cfg.sampler_config();
        if b >= sc.n_s {
            // Pseudo-labels come from detached current predictions.
            let predicted = keypoints_from_tensor(&det.keypoints.detach())?;
            let sel = sampler::select(&predicted, &sc)?;
            let idx = Tensor::from_vec(sel.indices.iter().map(|&i| i as u32).collect::<Vec<_>>(), sel.indices.len(), dev)?;
            let flipped = tensor_ops::flip_width(&tgt.index_select(&idx, 0)?)?;
            let det_v = model.detect(&model.encode(&flipped, mode)?, mode)?;
            let labels = keypoints_to_tensor(&sel.labels.iter().collect::<Vec<_>>(), dev)?;
            c.equivariance = Some(equivariance_loss(&det_v.keypoints, &labels, cfg.equivariance_reduction)?);
        }
    }
    Ok((c, correct))
}

/// One optimizer update on the weighted loss.
pub fn train_step(model: &Model, opt: &mut Sgd, pairs: &[TrainPair], cfg: &TrainConfig, epoch: usize) -> Result<StepStats> {
    let (c, correct) = forward_losses(model, pairs, cfg, epoch, Mode::Train)?;
    let total = total_loss(&c, &cfg.loss_weights(), epoch)?;
    let total_value = scalar(&total)?;
    if !total_value.is_finite() {
        return Err(Error::NonFiniteLoss { component: "total" });
    }
    let grads = total.backward()?;
    opt.step(model.params(), &grads)?;
    Ok(StepStats {
        perceptual: c.perceptual.as_ref().map(scalar).transpose()?,
        weak: c.weak.as_ref().map(scalar).transpose()?,
        equivariance: c.equivariance.as_ref().map(scalar).transpose()?,
        total: total_value,
        correct,
        count: pairs.len(),
    })
}

/// Per-epoch means. `equivariance` is `None` while the term is inactive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub perceptual: Option<f64>,
    pub weak: Option<f64>,
    pub equivariance: Option<f64>,
    pub total: f64,
    pub accuracy: Option<f64>,
    pub val_total: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config_hash: String,
    pub epochs: Vec<EpochLog>,
    pub checkpoints: Vec<String>,
    pub best_checkpoint: Option<String>,
    pub final_checkpoint: Option<String>,
    pub wall_clock_seconds: f64,
}

impl RunLog {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("run_log.json"), serde_json::to_string_pretty(self)?)?;
        let mut w = csv::Writer::from_path(dir.join("run_log.csv"))?;
        w.write_record(["epoch", "L_perc", "L_w", "L_v", "total", "acc"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "inactive".into());
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                opt(e.perceptual),
                opt(e.weak),
                opt(e.equivariance),
                format!("{:.6}", e.total),
                opt(e.accuracy),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.safetensors")
}

fn training_checkpoint(model: &Model, opt: &Sgd, cfg: &TrainConfig, epoch: usize) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    model.write_state(&mut ck)?;
    opt.write_state(&mut ck)?;
    // The output location is left out so that relocated runs stay byte-identical.
    let stored = TrainConfig {
        out: String::new(),
        ..cfg.clone()
    };
    ck.metadata.insert("train_config".into(), serde_json::to_string(&stored)?);
    ck.metadata.insert("config_hash".into(), cfg.hash());
    ck.metadata.insert("epoch".into(), epoch.to_string());
    ck.metadata.insert("lr".into(), opt.lr.to_string());
    Ok(ck)
}

/// Pairs for the given dataset indices; each pair's randomness depends only on
/// `(seed, stream, epoch, index)`.
pub fn build_pairs(data: &Dataset, indices: &[usize], cfg: &TrainConfig, stream: u64, epoch: usize) -> Result<Vec<TrainPair>> {
    let pc = cfg.pair_config();
    indices
        .iter()
        .map(|&i| {
            let mut rng = record_rng(cfg.seed, stream << 32 | epoch as u64, i as u64);
            let s = &data.samples[i];
            make_pair(&s.image, s.label, &pc, &mut rng)
        })
        .collect()
}

fn shuffled(indices: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut v = indices.to_vec();
    v.shuffle(&mut record_rng(seed, STREAM_SHUFFLE, epoch as u64));
    v
}

fn validation_total(model: &Model, data: &Dataset, val: &[usize], cfg: &TrainConfig, epoch: usize) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for chunk in val.chunks(cfg.batch) {
        let pairs = build_pairs(data, chunk, cfg, STREAM_VAL, 0)?;
        let (c, _) = forward_losses(model, &pairs, cfg, epoch, Mode::Eval)?;
        sum += scalar(&total_loss(&c, &cfg.loss_weights(), epoch)?)? * chunk.len() as f64;
    }
    Ok(Some(sum / val.len() as f64))
}

/// Optional hook called after every epoch with the model and that epoch's log.
pub type EpochHook<'a> = dyn FnMut(&Model, &EpochLog) -> Result<()> + 'a;

/// Full training run writing checkpoints and logs under `cfg.out`.
///
/// With `resume`, continues from `last.safetensors` in the output directory
/// after checking that it was written by the same configuration.
pub fn train(cfg: &TrainConfig, data: &Dataset, resume: bool, hook: Option<&mut EpochHook>) -> Result<(Model, RunLog)> {
    cfg.validate()?;
    let out = PathBuf::from(&cfg.out);
    let ck_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ck_dir)?;
    let classes = if cfg.classes > 0 { cfg.classes } else { data.classes };
    if classes < 2 {
        return Err(Error::Config("training needs at least two classes".into()));
    }
    let train_idx: Vec<usize> = (0..data.len()).filter(|&i| data.samples[i].split == Split::Train).collect();
    let val_idx: Vec<usize> = (0..data.len()).filter(|&i| data.samples[i].split == Split::Val).collect();
    if train_idx.len() < cfg.sampler_config().n_s {
        return Err(Error::Config(format!(
            "{} training samples are fewer than n_s = {}",
            train_idx.len(),
            cfg.sampler_config().n_s
        )));
    }

    let mut model = Model::new(cfg.model_config(classes), cfg.seed)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut log = RunLog {
        config_hash: cfg.hash(),
        ..RunLog::default()
    };
    let mut start = 1;
    let mut best = f64::INFINITY;
    let last_path = ck_dir.join(LAST_CHECKPOINT);
    if resume && last_path.exists() {
        let ck = Checkpoint::load(&last_path)?;
        let hash = ck.meta("config_hash")?;
        if hash != log.config_hash {
            return Err(Error::Config(format!(
                "cannot resume: checkpoint config hash {hash} differs from {}",
                log.config_hash
            )));
        }
        model = Model::from_checkpoint(&ck)?;
        opt.load_state(&ck, model.device())?;
        opt.lr = ck.meta("lr")?.parse().map_err(|_| Error::Checkpoint("bad lr".into()))?;
        start = ck.meta("epoch")?.parse::<usize>().map_err(|_| Error::Checkpoint("bad epoch".into()))? + 1;
        if let Ok(text) = std::fs::read_to_string(out.join("run_log.json")) {
            let prev: RunLog = serde_json::from_str(&text)?;
            log.epochs = prev.epochs.into_iter().filter(|e| e.epoch < start).collect();
            log.checkpoints = prev.checkpoints;
            log.best_checkpoint = prev.best_checkpoint;
        }
        best = log
            .epochs
            .iter()
            .map(|e| e.val_total.unwrap_or(e.total))
            .fold(f64::INFINITY, f64::min);
        log::info!("resuming at epoch {start}");
    }

    let clock = Instant::now();
    let mut hook = hook;
    for epoch in start..=cfg.epochs {
        let t0 = Instant::now();
        let order = shuffled(&train_idx, cfg.seed, epoch);
        let (mut perc, mut weak, mut equiv, mut total) = (0.0, 0.0, 0.0, 0.0);
        let (mut n_perc, mut n_weak, mut n_equiv, mut seen, mut correct) = (0usize, 0usize, 0usize, 0usize, 0usize);
        // A trailing partial batch smaller than n_s is dropped.
        for chunk in order.chunks(cfg.batch).filter(|c| c.len() >= cfg.sampler_config().n_s) {
            let pairs = build_pairs(data, chunk, cfg, STREAM_PAIR, epoch)?;
            let s = train_step(&model, &mut opt, &pairs, cfg, epoch)?;
            let n = s.count;
            if let Some(v) = s.perceptual {
                perc += v * n as f64;
                n_perc += n;
            }
            if let Some(v) = s.weak {
                weak += v * n as f64;
                n_weak += n;
                correct += s.correct;
            }
            if let Some(v) = s.equivariance {
                equiv += v * n as f64;
                n_equiv += n;
            }
            total += s.total * n as f64;
            seen += n;
        }
        let mean = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
        let val_total = validation_total(&model, data, &val_idx, cfg, epoch)?;
        let entry = EpochLog {
            epoch,
            perceptual: mean(perc, n_perc),
            weak: mean(weak, n_weak),
            equivariance: mean(equiv, n_equiv),
            total: total / seen.max(1) as f64,
            accuracy: (n_weak > 0).then(|| correct as f64 / n_weak as f64),
            val_total,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: total {:.4} perc {:?} weak {:?} equiv {:?} acc {:?} ({:.1}s)",
            entry.total,
            entry.perceptual,
            entry.weak,
            entry.equivariance,
            entry.accuracy,
            entry.seconds
        );

        // Decay before saving so a resumed run continues with the same rate.
        opt.lr *= cfg.lr_decay;
        let ck = training_checkpoint(&model, &opt, cfg, epoch)?;
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.curriculum_epoch || epoch == cfg.epochs {
            let name = epoch_checkpoint_name(epoch);
            ck.save(&ck_dir.join(&name))?;
            log.checkpoints.push(format!("checkpoints/{name}"));
        }
        let score = entry.val_total.unwrap_or(entry.total);
        if score < best {
            best = score;
            ck.save(&ck_dir.join(BEST_CHECKPOINT))?;
            log.best_checkpoint = Some(format!("checkpoints/{BEST_CHECKPOINT}"));
        }
        ck.save(&last_path)?;
        log.final_checkpoint = Some(format!("checkpoints/{LAST_CHECKPOINT}"));
        if let Some(h) = hook.as_deref_mut() {
            h(&model, &entry)?;
        }
        log.epochs.push(entry);
        log.wall_clock_seconds += t0.elapsed().as_secs_f64();
        log.write(&out)?;
    }
    log::debug!("training finished in {:.1}s", clock.elapsed().as_secs_f64());
    Ok((model, log))
}
