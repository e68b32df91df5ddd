//! Linear probe, normalized error, PCK, posture classification and visual dumps.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Annotation;
use crate::error::{Error, Result};
use crate::geometry::{flip_keypoints, KeypointSet};
use crate::losses::weak_loss;
use crate::networks::layers::{Builder, Linear};
use crate::networks::{keypoints_from_tensor, keypoints_to_tensor, tensor_to_images, Mode, Model, ParamStore};
use crate::raster::Image;
use crate::training::Sgd;

/// Ridge added to the normal equations when the design is rank deficient.
pub const RIDGE_EPS: f64 = 1e-6;

/// Least-squares map from `2K` discovered coordinates (plus bias) to `2M`
/// annotated coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorProbe {
    /// `(2K + 1) × 2M`; the last row is the intercept.
    pub weights: DMatrix<f64>,
    pub ridge_fallback: bool,
}

fn design_row(kps: &KeypointSet) -> Vec<f64> {
    let mut row = kps.flatten();
    row.push(1.0);
    row
}

pub fn fit_probe(discovered: &[KeypointSet], annotated: &[Vec<[f64; 2]>]) -> Result<RegressorProbe> {
    let n = discovered.len();
    if n == 0 || annotated.len() != n {
        return Err(Error::shape(format!("{n} discovered sets for {} annotations", annotated.len())));
    }
    let k = discovered[0].len();
    let m = annotated[0].len();
    if discovered.iter().any(|d| d.len() != k) || annotated.iter().any(|a| a.len() != m) {
        return Err(Error::shape("inconsistent keypoint counts"));
    }
    if n < 2 * k + 1 {
        return Err(Error::invalid(format!("probe needs at least {} samples, got {n}", 2 * k + 1)));
    }
    let x = DMatrix::from_row_iterator(n, 2 * k + 1, discovered.iter().flat_map(design_row));
    let y = DMatrix::from_row_iterator(n, 2 * m, annotated.iter().flat_map(|a| a.iter().flat_map(|p| [p[0], p[1]])));
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let sv = xtx.clone().singular_values();
    let max_sv = sv.max();
    let rank_deficient = sv.iter().any(|&s| s <= max_sv * 1e-12);
    let (system, ridge_fallback) = if rank_deficient {
        (xtx + DMatrix::identity(2 * k + 1, 2 * k + 1) * RIDGE_EPS, true)
    } else {
        (xtx, false)
    };
    let weights = system
        .lu()
        .solve(&xty)
        .ok_or_else(|| Error::Singular("probe normal equations".into()))?;
    Ok(RegressorProbe { weights, ridge_fallback })
}

impl RegressorProbe {
    pub fn predict(&self, kps: &KeypointSet) -> Result<Vec<[f64; 2]>> {
        let row = design_row(kps);
        if row.len() != self.weights.nrows() {
            return Err(Error::shape(format!(
                "probe expects {} keypoints, got {}",
                (self.weights.nrows() - 1) / 2,
                kps.len()
            )));
        }
        let out = self.weights.transpose() * DVector::from_vec(row);
        Ok(out.as_slice().chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }
}

/// Mean euclidean error divided by `normalizer`, in percent.
pub fn normalized_error(pred: &[[f64; 2]], gt: &[[f64; 2]], normalizer: f64) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape(format!("{} predictions for {} targets", pred.len(), gt.len())));
    }
    if !(normalizer > 0.0) {
        return Err(Error::invalid(format!("normalizer must be positive, got {normalizer}")));
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
        .sum();
    Ok(100.0 * sum / (pred.len() as f64 * normalizer))
}

/// Probe fitted on one split and scored on another, in percent of the image edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mean_error: f64,
    pub per_image: Vec<f64>,
    pub ridge_fallback: bool,
}

/// Fits the probe on `(fit_kps, fit_gt)` and reports its error on `(test_kps, test_gt)`.
pub fn probe_report(
    fit_kps: &[KeypointSet],
    fit_gt: &[Vec<[f64; 2]>],
    test_kps: &[KeypointSet],
    test_gt: &[Vec<[f64; 2]>],
) -> Result<ProbeReport> {
    if test_kps.len() != test_gt.len() || test_kps.is_empty() {
        return Err(Error::shape("probe test set needs one annotation per keypoint set"));
    }
    let probe = fit_probe(fit_kps, fit_gt)?;
    let per_image = test_kps
        .iter()
        .zip(test_gt)
        .map(|(k, g)| normalized_error(&probe.predict(k)?, g, 1.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeReport {
        mean_error: per_image.iter().sum::<f64>() / per_image.len() as f64,
        per_image,
        ridge_fallback: probe.ridge_fallback,
    })
}

/// Seeded keypoints independent of any image, the control for [`probe_report`].
pub fn random_keypoints(n: usize, parts: usize, seed: u64) -> Vec<KeypointSet> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| KeypointSet::new((0..parts).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect()).expect("non-empty"))
        .collect()
}

/// Annotated coordinates of every sample, failing on unannotated records.
pub fn annotated_points(samples: &[crate::data::Sample]) -> Result<Vec<Vec<[f64; 2]>>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.keypoints
                .as_ref()
                .map(|k| k.iter().map(|a| a.point).collect())
                .ok_or_else(|| Error::invalid(format!("sample {i} has no keypoints")))
        })
        .collect()
}

/// Fraction of images whose weak-head prediction matches the label.
pub fn weak_accuracy(model: &Model, images: &[&Image], labels: &[usize]) -> Result<f64> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(Error::shape("weak accuracy needs one label per image"));
    }
    let mut correct = 0;
    for (chunk, ys) in images.chunks(32).zip(labels.chunks(32)) {
        let x = model.images_to_tensor(chunk)?;
        let feats = model.encode(&x, Mode::Eval)?;
        let det = model.detect(&feats, Mode::Eval)?;
        let pred = model.classify(&feats, &det.heatmaps, Mode::Eval)?.argmax(1)?.to_vec1::<u32>()?;
        correct += pred.iter().zip(ys).filter(|(p, y)| **p as usize == **y).count();
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Distance between two annotated points, e.g. the eye corners for IOD.
pub fn inter_ocular(gt: &[[f64; 2]], left: usize, right: usize) -> f64 {
    let (a, b) = (gt[left], gt[right]);
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Mean per-keypoint distance between the keypoints of mirrored images and
/// the mirrored keypoints of the originals.
pub fn flip_consistency(model: &Model, images: &[&Image]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("flip consistency needs at least one image"));
    }
    let flipped: Vec<Image> = images.iter().map(|im| im.flip_horizontal()).collect();
    let flipped_refs: Vec<&Image> = flipped.iter().collect();
    let direct = model.predict_keypoints(images, 32)?;
    let mirrored = model.predict_keypoints(&flipped_refs, 32)?;
    flip_consistency_error(&direct, &mirrored)
}

/// The reduction used by [`flip_consistency`] on precomputed predictions.
pub fn flip_consistency_error(direct: &[KeypointSet], mirrored: &[KeypointSet]) -> Result<f64> {
    if direct.len() != mirrored.len() || direct.is_empty() {
        return Err(Error::shape("prediction lists must be non-empty and of equal length"));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (d, m) in direct.iter().zip(mirrored) {
        if d.len() != m.len() {
            return Err(Error::shape(format!("keypoint counts {} and {} differ", d.len(), m.len())));
        }
        for (a, b) in flip_keypoints(d).coords().iter().zip(m.coords()) {
            total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BboxNorm {
    #[default]
    Max,
    Diagonal,
}

impl BboxNorm {
    pub fn size(self, bbox: [f64; 4]) -> f64 {
        match self {
            BboxNorm::Max => bbox[2].max(bbox[3]),
            BboxNorm::Diagonal => (bbox[2] * bbox[2] + bbox[3] * bbox[3]).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckResult {
    pub alpha: f64,
    /// `None` where a keypoint was never visible.
    pub per_keypoint: Vec<Option<f64>>,
    /// `None` when no keypoint was visible at all.
    pub mean: Option<f64>,
    pub correct: usize,
    pub visible: usize,
}

/// Accumulates PCK counts over images.
#[derive(Debug, Clone)]
pub struct PckAccumulator {
    alpha: f64,
    norm: BboxNorm,
    correct: Vec<usize>,
    visible: Vec<usize>,
}

impl PckAccumulator {
    pub fn new(parts: usize, alpha: f64, norm: BboxNorm) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            alpha,
            norm,
            correct: vec![0; parts],
            visible: vec![0; parts],
        })
    }

    pub fn add(&mut self, pred: &[[f64; 2]], gt: &[Annotation], bbox: [f64; 4]) -> Result<()> {
        if pred.len() != gt.len() || gt.len() != self.correct.len() {
            return Err(Error::shape(format!(
                "PCK expects {} keypoints, got {} predictions and {} targets",
                self.correct.len(),
                pred.len(),
                gt.len()
            )));
        }
        let threshold = self.alpha * self.norm.size(bbox);
        for (k, (p, g)) in pred.iter().zip(gt).enumerate() {
            if !g.visible {
                continue;
            }
            self.visible[k] += 1;
            let d = ((p[0] - g.point[0]).powi(2) + (p[1] - g.point[1]).powi(2)).sqrt();
            if d <= threshold {
                self.correct[k] += 1;
            }
        }
        Ok(())
    }

    pub fn result(&self) -> PckResult {
        let correct: usize = self.correct.iter().sum();
        let visible: usize = self.visible.iter().sum();
        PckResult {
            alpha: self.alpha,
            per_keypoint: self
                .correct
                .iter()
                .zip(&self.visible)
                .map(|(&c, &v)| (v > 0).then(|| c as f64 / v as f64))
                .collect(),
            mean: (visible > 0).then(|| correct as f64 / visible as f64),
            correct,
            visible,
        }
    }
}

/// PCK of a single image.
pub fn pck(pred: &[[f64; 2]], gt: &[Annotation], bbox: [f64; 4], alpha: f64, norm: BboxNorm) -> Result<PckResult> {
    let mut acc = PckAccumulator::new(gt.len(), alpha, norm)?;
    acc.add(pred, gt, bbox)?;
    Ok(acc.result())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostureConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Subtract the keypoint centroid before classification.
    pub centroid: bool,
    /// Stop once the training loss has not improved for this many epochs.
    pub patience: usize,
}

impl Default for PostureConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 200,
            batch: 32,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
            centroid: true,
            patience: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostureReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub epochs_run: usize,
}

/// Two fully connected layers on (optionally centroid-normalized) keypoints.
#[derive(Debug)]
pub struct PostureClassifier {
    params: ParamStore,
    hidden: Linear,
    out: Linear,
    centroid: bool,
    mean: Vec<f32>,
    scale: Vec<f32>,
    classes: usize,
}

impl PostureClassifier {
    fn features(&self, sets: &[KeypointSet]) -> Vec<Vec<f32>> {
        sets.iter()
            .map(|s| {
                let n = s.len() as f64;
                let (cu, cv) = if self.centroid {
                    (s.coords().iter().map(|p| p[0]).sum::<f64>() / n, s.coords().iter().map(|p| p[1]).sum::<f64>() / n)
                } else {
                    (0.0, 0.0)
                };
                s.coords().iter().flat_map(|p| [(p[0] - cu) as f32, (p[1] - cv) as f32]).collect()
            })
            .collect()
    }

    fn tensor(&self, sets: &[KeypointSet]) -> Result<Tensor> {
        let feats = self.features(sets);
        let d = self.mean.len();
        let data: Vec<f32> = feats
            .iter()
            .flat_map(|f| f.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.scale[j]))
            .collect();
        Ok(Tensor::from_vec(data, (sets.len(), d), &Device::Cpu)?)
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(x)?.relu()?)
    }

    pub fn train(sets: &[KeypointSet], labels: &[usize], cfg: &PostureConfig) -> Result<(Self, usize)> {
        if sets.len() != labels.len() || sets.is_empty() {
            return Err(Error::shape("posture training needs one label per keypoint set"));
        }
        let classes = labels.iter().max().map(|m| m + 1).unwrap_or(0);
        let distinct = {
            let mut l = labels.to_vec();
            l.sort_unstable();
            l.dedup();
            l.len()
        };
        if distinct < 2 {
            return Err(Error::invalid("posture training set contains a single class"));
        }
        let d = 2 * sets[0].len();
        let mut params = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (hidden, out) = {
            let mut b = Builder::new(&mut params, &mut rng, &Device::Cpu);
            (
                Linear::new(&mut b.pp("hidden"), d, cfg.hidden)?,
                Linear::new(&mut b.pp("out"), cfg.hidden, classes)?,
            )
        };
        let mut model = Self {
            params,
            hidden,
            out,
            centroid: cfg.centroid,
            mean: vec![0.0; d],
            scale: vec![1.0; d],
            classes,
        };
        // Per-feature standardization from training statistics.
        let feats = model.features(sets);
        let n = feats.len() as f32;
        for j in 0..d {
            let mean = feats.iter().map(|f| f[j]).sum::<f32>() / n;
            let var = feats.iter().map(|f| (f[j] - mean).powi(2)).sum::<f32>() / n;
            model.mean[j] = mean;
            model.scale[j] = var.sqrt().max(1e-6);
        }
        let x = model.tensor(sets)?;
        let mut opt = Sgd::new(cfg.lr, cfg.momentum);
        let mut order: Vec<usize> = (0..sets.len()).collect();
        let mut best = f64::INFINITY;
        let mut stale = 0;
        let mut epochs_run = 0;
        for _ in 0..cfg.epochs {
            epochs_run += 1;
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for chunk in order.chunks(cfg.batch.max(1)) {
                let idx = Tensor::from_vec(chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(), chunk.len(), &Device::Cpu)?;
                let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let loss = weak_loss(&model.logits(&x.index_select(&idx, 0)?)?, &y)?;
                sum += loss.to_scalar::<f32>()? as f64 * chunk.len() as f64;
                opt.step(&model.params, &loss.backward()?)?;
            }
            let mean = sum / sets.len() as f64;
            if mean < best - 1e-4 {
                best = mean;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
        Ok((model, epochs_run))
    }

    pub fn predict(&self, sets: &[KeypointSet]) -> Result<Vec<usize>> {
        if sets.is_empty() {
            return Ok(Vec::new());
        }
        let logits = self.logits(&self.tensor(sets)?)?;
        Ok(logits.argmax(1)?.to_vec1::<u32>()?.into_iter().map(|v| v as usize).collect())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

pub fn posture_classifier(
    train: &[KeypointSet],
    train_labels: &[usize],
    test: &[KeypointSet],
    test_labels: &[usize],
    cfg: &PostureConfig,
) -> Result<PostureReport> {
    if test.len() != test_labels.len() || test.is_empty() {
        return Err(Error::shape("posture test set needs one label per keypoint set"));
    }
    let (clf, epochs_run) = PostureClassifier::train(train, train_labels, cfg)?;
    let pred = clf.predict(test)?;
    let classes = clf.classes().max(test_labels.iter().max().map(|m| m + 1).unwrap_or(0));
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&t, &p) in test_labels.iter().zip(&pred) {
        confusion[t][p] += 1;
    }
    let correct = test_labels.iter().zip(&pred).filter(|(a, b)| a == b).count();
    Ok(PostureReport {
        accuracy: correct as f64 / test.len() as f64,
        confusion,
        epochs_run,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualMode {
    Keypoints,
    Reconstruction,
    Manipulation,
}

/// Geometry edits applied to the keypoint bottleneck.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Manipulation {
    Identity,
    Flip,
    /// Scale about the keypoint centroid.
    Scale(f64),
    Translate([f64; 2]),
}

impl Manipulation {
    pub fn apply(self, kps: &KeypointSet) -> KeypointSet {
        match self {
            Manipulation::Identity => kps.clone(),
            Manipulation::Flip => flip_keypoints(kps),
            Manipulation::Scale(s) => {
                let n = kps.len() as f64;
                let cu = kps.coords().iter().map(|p| p[0]).sum::<f64>() / n;
                let cv = kps.coords().iter().map(|p| p[1]).sum::<f64>() / n;
                kps.map(|[u, v]| [cu + s * (u - cu), cv + s * (v - cv)])
            }
            Manipulation::Translate([du, dv]) => kps.map(|[u, v]| [u + du, v + dv]),
        }
    }
}

pub const MARKER_COLORS: [[f32; 3]; 8] = [
    [1.0, 0.9, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
    [0.0, 0.0, 0.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
    [0.0, 0.6, 0.3],
];

pub fn draw_keypoints(image: &Image, kps: &KeypointSet) -> Image {
    let mut out = image.clone();
    let radius = (image.width() as f64 / 40.0).max(1.0);
    for (k, p) in kps.coords().iter().enumerate() {
        let x = p[0] * image.width() as f64 - 0.5;
        let y = p[1] * image.height() as f64 - 0.5;
        out.draw_disc(x, y, radius + 0.7, [0.0, 0.0, 0.0]);
        out.draw_disc(x, y, radius, MARKER_COLORS[k % MARKER_COLORS.len()]);
    }
    out
}

/// Images side by side, left to right.
pub fn hstack(images: &[Image]) -> Image {
    let h = images.iter().map(Image::height).max().unwrap_or(0);
    let w: usize = images.iter().map(Image::width).sum();
    let mut out = Image::filled(w, h, [1.0, 1.0, 1.0]);
    let mut x0 = 0;
    for img in images {
        for y in 0..img.height() {
            for x in 0..img.width() {
                out.set_pixel(x0 + x, y, img.pixel(x, y));
            }
        }
        x0 += img.width();
    }
    out
}

/// Decoder output for `appearance_from`'s appearance and the given keypoints.
pub fn render_with(model: &Model, appearance_from: &Image, kps: &KeypointSet) -> Result<Image> {
    let x = model.images_to_tensor(&[appearance_from])?;
    let feats = model.encode(&x, Mode::Eval)?;
    let k = keypoints_to_tensor(&[kps], model.device())?;
    let recon = model.reconstruct(feats.deepest(), &k, Mode::Eval)?;
    Ok(tensor_to_images(&recon)?.remove(0))
}

fn predict_one(model: &Model, image: &Image) -> Result<KeypointSet> {
    let x = model.images_to_tensor(&[image])?;
    let det = model.detect(&model.encode(&x, Mode::Eval)?, Mode::Eval)?;
    Ok(keypoints_from_tensor(&det.keypoints)?.remove(0))
}

/// Writes one PNG per input image into `out` and returns their paths.
///
/// Manipulation strips show: input, reconstruction, flipped, scaled and
/// translated bottlenecks, then the same keypoints with the next image's
/// appearance.
pub fn dump_visuals(model: &Model, images: &[Image], names: &[String], mode: VisualMode, out: &Path) -> Result<Vec<PathBuf>> {
    if images.len() != names.len() {
        return Err(Error::shape("one name per image required"));
    }
    std::fs::create_dir_all(out)?;
    let mut written = Vec::with_capacity(images.len());
    for (i, (image, name)) in images.iter().zip(names).enumerate() {
        let kps = predict_one(model, image)?;
        let picture = match mode {
            VisualMode::Keypoints => draw_keypoints(image, &kps),
            VisualMode::Reconstruction => hstack(&[image.clone(), render_with(model, image, &kps)?]),
            VisualMode::Manipulation => {
                let mut tiles = vec![image.clone()];
                for m in [
                    Manipulation::Identity,
                    Manipulation::Flip,
                    Manipulation::Scale(1.25),
                    Manipulation::Translate([0.1, 0.0]),
                ] {
                    tiles.push(render_with(model, image, &m.apply(&kps))?);
                }
                let other = &images[(i + 1) % images.len()];
                tiles.push(render_with(model, other, &kps)?);
                hstack(&tiles)
            }
        };
        let path = out.join(format!("{name}_{}.png", format!("{mode:?}").to_lowercase()));
        picture.save_png(&path)?;
        written.push(path);
    }
    Ok(written)
}
