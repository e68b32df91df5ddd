//! In-batch mining of same-facing samples and flipped pseudo-labels for the
//! viewpoint equivariance loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{flip_keypoints, KeypointSet};
use crate::raster::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FacingPolicy {
    /// Mean `u` of the discriminative keypoints minus mean `u` of all keypoints.
    #[default]
    Relative,
    /// Mean `u` of the discriminative keypoints minus the image center.
    MeanU,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_s: usize,
    pub n_v: usize,
    pub weak_parts: usize,
    pub policy: FacingPolicy,
}

impl SamplerConfig {
    /// `N_s = ⌈batch/2⌉`, `N_v = ⌈batch/4⌉`.
    pub fn for_batch(batch: usize, weak_parts: usize) -> Self {
        Self {
            n_s: batch.div_ceil(2),
            n_v: batch.div_ceil(4),
            weak_parts,
            policy: FacingPolicy::Relative,
        }
    }
}

/// Selected indices with their flipped predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub labels: Vec<KeypointSet>,
}

#[derive(Debug, Clone)]
pub struct EquivarianceBatch {
    pub indices: Vec<usize>,
    pub images_v: Vec<Image>,
    pub labels: Vec<KeypointSet>,
}

/// Population variance of the `u` coordinates.
pub fn x_variance(kps: &KeypointSet) -> Result<f64> {
    if kps.len() < 2 {
        return Err(Error::invalid("x variance needs at least two keypoints"));
    }
    let n = kps.len() as f64;
    let mean = kps.us().sum::<f64>() / n;
    Ok(kps.us().map(|u| (u - mean) * (u - mean)).sum::<f64>() / n)
}

pub fn facing_score(kps: &KeypointSet, weak_parts: usize, policy: FacingPolicy) -> f64 {
    let lead = kps.us().take(weak_parts).sum::<f64>() / weak_parts as f64;
    match policy {
        FacingPolicy::Relative => lead - kps.us().sum::<f64>() / kps.len() as f64,
        FacingPolicy::MeanU => lead - 0.5,
    }
}

/// Indices and pseudo-labels chosen from one batch of predictions.
///
/// The `N_s` widest samples by x-variance are kept; among them the majority
/// facing sign (ties count as positive) decides the direction, and the `N_v`
/// samples furthest in that direction are returned. Equal scores are ordered
/// by batch index.
pub fn select(batch: &[KeypointSet], cfg: &SamplerConfig) -> Result<Selection> {
    if cfg.n_v == 0 || cfg.n_v > cfg.n_s || cfg.n_s > batch.len() {
        return Err(Error::invalid(format!(
            "sampler needs 0 < N_v ≤ N_s ≤ batch (N_v = {}, N_s = {}, batch = {})",
            cfg.n_v,
            cfg.n_s,
            batch.len()
        )));
    }
    let k = batch[0].len();
    if batch.iter().any(|s| s.len() != k) {
        return Err(Error::shape("keypoint sets in a batch must share K"));
    }
    if cfg.weak_parts == 0 || cfg.weak_parts > k {
        return Err(Error::invalid(format!("K_w = {} outside 1..={k}", cfg.weak_parts)));
    }
    let spread = batch.iter().map(x_variance).collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&a, &b| spread[b].total_cmp(&spread[a]));
    order.truncate(cfg.n_s);

    let score: Vec<f64> = order
        .iter()
        .map(|&i| facing_score(&batch[i], cfg.weak_parts, cfg.policy))
        .collect();
    let positive = score.iter().filter(|&&f| f >= 0.0).count();
    let toward_positive = 2 * positive >= score.len();
    let mut ranked: Vec<usize> = (0..order.len()).collect();
    // Equal scores fall back to batch index.
    if toward_positive {
        ranked.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(order[a].cmp(&order[b])));
    } else {
        ranked.sort_by(|&a, &b| score[a].total_cmp(&score[b]).then(order[a].cmp(&order[b])));
    }
    let indices: Vec<usize> = ranked.iter().take(cfg.n_v).map(|&r| order[r]).collect();
    let labels = indices.iter().map(|&i| flip_keypoints(&batch[i])).collect();
    Ok(Selection { indices, labels })
}

/// [`select`] plus the horizontally flipped images.
pub fn sample_equivariance_batch(
    batch: &[KeypointSet],
    images: &[Image],
    cfg: &SamplerConfig,
) -> Result<EquivarianceBatch> {
    if images.len() != batch.len() {
        return Err(Error::shape(format!(
            "{} images for {} keypoint sets",
            images.len(),
            batch.len()
        )));
    }
    let Selection { indices, labels } = select(batch, cfg)?;
    let images_v = indices.iter().map(|&i| images[i].flip_horizontal()).collect();
    Ok(EquivarianceBatch {
        indices,
        images_v,
        labels,
    })
}
