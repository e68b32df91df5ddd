use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{Annotation, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{BboxNorm, PckAccumulator, PckResult};
use crate::networks::layers::{BatchNorm, Builder, Conv2d};
use crate::networks::{images_to_tensor, Mode, Model, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub fraction: f64,
    pub epochs: usize,
    /// Lower bound on optimizer steps so tiny label fractions still train.
    pub min_steps: usize,
    pub batch: usize,
    /// AdamW step size.
    pub lr: f64,
    pub weight_decay: f64,
    /// Width of the Gaussian regression targets.
    pub sigma: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            fraction: 1.0,
            epochs: 20,
            min_steps: 200,
            batch: 16,
            lr: 0.001,
            weight_decay: 0.0,
            sigma: 0.04,
            alpha: 0.1,
            seed: 0,
        }
    }
}

/// Indices of the labeled subset: the `⌈fraction·n⌉` records with the smallest
/// seeded hash, so smaller fractions are always contained in larger ones.
pub fn nested_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let take = (fraction * n as f64).ceil() as usize;
    if take == 0 {
        return Err(Error::invalid(format!("fraction {fraction} of {n} records selects no samples")));
    }
    let mut keyed: Vec<([u8; 32], usize)> = (0..n)
        .map(|i| {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update((i as u64).to_le_bytes());
            (h.finalize().into(), i)
        })
        .collect();
    keyed.sort_unstable();
    let mut out: Vec<usize> = keyed.into_iter().take(take).map(|(_, i)| i).collect();
    out.sort_unstable();
    Ok(out)
}

/// Checkpoint metadata key marking a regressor and holding its part count.
pub const REGRESSOR_PARTS_KEY: &str = "regressor_parts";
const ADAPTER_PREFIX: &str = "adapter.";

/// Encoder and keypoint head followed by batch normalization and a 1×1
/// convolution from the `K` discovered maps to `M` annotated parts.
#[derive(Debug)]
pub struct KeypointRegressor {
    pub model: Model,
    adapter_params: ParamStore,
    norm: BatchNorm,
    adapter: Conv2d,
}

impl KeypointRegressor {
    pub fn new(model: Model, annotated_parts: usize, seed: u64) -> Result<Self> {
        let mut adapter_params = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (norm, adapter) = {
            let mut b = Builder::new(&mut adapter_params, &mut rng, model.device());
            let mut b = b.pp("adapter");
            (
                BatchNorm::new(&mut b.pp("norm"), model.config().parts)?,
                Conv2d::new(&mut b, model.config().parts, annotated_parts, 1, 1, true)?,
            )
        };
        // A zero adapter starts from empty heatmaps, so the first updates are
        // bounded by the target energy rather than by random background noise.
        if let Some(w) = adapter_params.get("adapter.weight") {
            w.var.set(&w.var.zeros_like()?)?;
        }
        Ok(Self {
            model,
            adapter_params,
            norm,
            adapter,
        })
    }

    /// Restores a regressor written by [`KeypointRegressor::write_state`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let parts: usize = ck
            .meta(REGRESSOR_PARTS_KEY)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("{REGRESSOR_PARTS_KEY} is not an integer")))?;
        let reg = Self::new(Model::from_checkpoint(ck)?, parts, 0)?;
        for (name, p) in reg.adapter_params.iter() {
            let stored = ck.tensor(&format!("{ADAPTER_PREFIX}{name}"))?;
            if stored.shape != p.var.dims() {
                return Err(Error::Checkpoint(format!("{name}: stored shape {:?}, expected {:?}", stored.shape, p.var.dims())));
            }
            p.var.set(&Tensor::from_vec(stored.data.clone(), stored.shape.as_slice(), reg.model.device())?)?;
        }
        Ok(reg)
    }

    pub fn write_state(&self, ck: &mut Checkpoint) -> Result<()> {
        self.model.write_state(ck)?;
        ck.metadata.insert(REGRESSOR_PARTS_KEY.into(), self.parts().to_string());
        for (name, p) in self.adapter_params.iter() {
            let t = p.var.as_tensor();
            ck.insert(format!("{ADAPTER_PREFIX}{name}"), t.dims().to_vec(), t.flatten_all()?.to_vec1::<f32>()?)?;
        }
        Ok(())
    }

    /// Number of annotated parts the adapter predicts.
    pub fn parts(&self) -> usize {
        self.adapter.out_channels()
    }

    pub fn heatmaps(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        let feats = self.model.encode(images, mode)?;
        // Discovered logits have an arbitrary scale; normalizing them keeps the
        // regression step size independent of the starting checkpoint.
        let logits = self.model.keypoint_logits(&feats, mode)?;
        self.adapter.forward(&self.norm.forward(&logits, mode)?)
    }

    pub fn predict(&self, images: &[&crate::raster::Image]) -> Result<Vec<Vec<[f64; 2]>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let x = self.model.images_to_tensor(chunk)?;
            let maps = self.heatmaps(&x, Mode::Eval)?;
            out.extend(decode_heatmaps(&maps)?);
        }
        Ok(out)
    }
}

/// Peak location of each map, refined by the centroid of the positive values
/// in its 3×3 neighbourhood.
pub fn decode_heatmaps(maps: &Tensor) -> Result<Vec<Vec<[f64; 2]>>> {
    let (b, m, h, w) = maps.dims4()?;
    let data = maps.flatten_all()?.to_vec1::<f32>()?;
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut parts = Vec::with_capacity(m);
        for k in 0..m {
            let map = &data[(bi * m + k) * h * w..(bi * m + k + 1) * h * w];
            let (best, _) = map
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            let (bi_, bj) = (best / w, best % w);
            let (mut su, mut sv, mut sw) = (0.0f64, 0.0f64, 0.0f64);
            for i in bi_.saturating_sub(1)..(bi_ + 2).min(h) {
                for j in bj.saturating_sub(1)..(bj + 2).min(w) {
                    let v = map[i * w + j].max(0.0) as f64;
                    su += v * (j as f64 + 0.5) / w as f64;
                    sv += v * (i as f64 + 0.5) / h as f64;
                    sw += v;
                }
            }
            parts.push(if sw > 0.0 {
                [su / sw, sv / sw]
            } else {
                [(bj as f64 + 0.5) / w as f64, (bi_ as f64 + 0.5) / h as f64]
            });
        }
        out.push(parts);
    }
    Ok(out)
}

/// Peak-one Gaussian targets and visibility mask, shapes `(B, M, S, S)` and `(B, M, 1, 1)`.
pub fn regression_targets(annotations: &[&[Annotation]], size: usize, sigma: f64, device: &Device) -> Result<(Tensor, Tensor)> {
    let b = annotations.len();
    let m = annotations.first().map(|a| a.len()).unwrap_or(0);
    let mut maps = vec![0f32; b * m * size * size];
    let mut mask = vec![0f32; b * m];
    for (bi, anns) in annotations.iter().enumerate() {
        for (k, a) in anns.iter().enumerate() {
            if !a.visible {
                continue;
            }
            mask[bi * m + k] = 1.0;
            let base = (bi * m + k) * size * size;
            for i in 0..size {
                let dv = (i as f64 + 0.5) / size as f64 - a.point[1];
                for j in 0..size {
                    let du = (j as f64 + 0.5) / size as f64 - a.point[0];
                    maps[base + i * size + j] = (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp() as f32;
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(maps, (b, m, size, size), device)?,
        Tensor::from_vec(mask, (b, m, 1, 1), device)?,
    ))
}

/// Squared error summed over each visible map, averaged over visible maps.
pub fn heatmap_regression_loss(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let visible = mask.sum_all()?.to_scalar::<f32>()?;
    if visible == 0.0 {
        return Err(Error::invalid("no visible keypoints in batch"));
    }
    let sq = (pred - target)?.sqr()?.broadcast_mul(mask)?;
    Ok((sq.sum_all()? / visible as f64)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub fraction: f64,
    pub labeled: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub pck: PckResult,
}

/// Trains `model` plus a fresh adapter on the labeled fraction of `train`
/// and reports PCK on `test`.
pub fn finetune_keypoints(model: Model, train: &Dataset, test: &Dataset, cfg: &FinetuneConfig) -> Result<(KeypointRegressor, FinetuneReport)> {
    let labeled: Vec<usize> = (0..train.len()).filter(|&i| train.samples[i].keypoints.is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::invalid("finetuning needs records with keypoints"));
    }
    let subset: Vec<usize> = nested_subset(labeled.len(), cfg.fraction, cfg.seed)?
        .into_iter()
        .map(|i| labeled[i])
        .collect();
    let parts = train.samples[subset[0]].keypoints.as_ref().map(|k| k.len()).unwrap_or(0);
    let reg = KeypointRegressor::new(model, parts, cfg.seed)?;
    let size = reg.model.config().profile.image_size;
    let hsize = reg.model.config().profile.heatmap_size;
    let dev = reg.model.device().clone();
    let per_epoch = subset.len().div_ceil(cfg.batch);
    let steps = (cfg.epochs * per_epoch).max(cfg.min_steps);
    let vars: Vec<_> = reg
        .model
        .params()
        .trainable()
        .chain(reg.adapter_params.trainable())
        .map(|(_, v)| v.clone())
        .collect();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF1E7);
    let mut order = subset.clone();
    let mut cursor = order.len();
    let mut final_loss = f64::NAN;
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        // Cycle through reshuffled passes; a batch never repeats a sample
        // unless the subset is smaller than the batch.
        while batch.len() < cfg.batch.min(subset.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let images: Vec<_> = batch.iter().map(|&i| &train.samples[i].image).collect();
        let anns: Vec<&[Annotation]> = batch
            .iter()
            .map(|&i| train.samples[i].keypoints.as_deref().unwrap_or(&[]))
            .collect();
        let x = images_to_tensor(&images, size, &dev)?;
        let (target, mask) = regression_targets(&anns, hsize, cfg.sigma, &dev)?;
        let pred = reg.heatmaps(&x, Mode::Train)?;
        let loss = heatmap_regression_loss(&pred, &target, &mask)?;
        final_loss = loss.to_scalar::<f32>()? as f64;
        if !final_loss.is_finite() {
            return Err(Error::NonFiniteLoss { component: "finetune" });
        }
        let grads = loss.backward()?;
        opt.step(&grads)?;
    }
    let pck = evaluate_pck(&reg, test, cfg.alpha, BboxNorm::Max)?;
    Ok((
        reg,
        FinetuneReport {
            fraction: cfg.fraction,
            labeled: subset.len(),
            steps,
            final_loss,
            pck,
        },
    ))
}

pub fn evaluate_pck(reg: &KeypointRegressor, test: &Dataset, alpha: f64, norm: BboxNorm) -> Result<PckResult> {
    let items: Vec<_> = test
        .samples
        .iter()
        .filter(|s| s.keypoints.is_some())
        .collect();
    let parts = items.first().and_then(|s| s.keypoints.as_ref()).map(|k| k.len()).unwrap_or(0);
    let mut acc = PckAccumulator::new(parts, alpha, norm)?;
    let images: Vec<_> = items.iter().map(|s| &s.image).collect();
    let preds = reg.predict(&images)?;
    for (s, p) in items.iter().zip(&preds) {
        let bbox = s.bbox.unwrap_or([0.0, 0.0, 1.0, 1.0]);
        acc.add(p, s.keypoints.as_deref().unwrap_or(&[]), bbox)?;
    }
    Ok(acc.result())
}
