use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::PairConfig;
use crate::error::{Error, Result};
use crate::losses::{EquivarianceReduction, LossWeights};
use crate::networks::{ModelConfig, ProfileName, ScaleProfile, DEFAULT_DECODER_SIGMAS};
use crate::sampler::{FacingPolicy, SamplerConfig};

pub const PRESETS: [&str; 5] = ["celeba", "cub", "animalpose", "stanforddogs", "toy"];

/// Every training setting as one flat record. Config files use the same keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: String,
    pub profile: ProfileName,
    pub parts: usize,
    pub weak_parts: usize,
    /// Class count; 0 takes it from the manifest header.
    pub classes: usize,
    pub w_p: f64,
    pub w_w: f64,
    pub w_v: f64,
    pub curriculum_epoch: usize,
    pub equivariance_reduction: EquivarianceReduction,
    pub lr: f64,
    pub momentum: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Sampler sizes; 0 selects `⌈batch/2⌉` and `⌈batch/4⌉`.
    pub n_s: usize,
    pub n_v: usize,
    pub facing_policy: FacingPolicy,
    pub tps_grid: usize,
    pub tps_scale: f64,
    pub jitter: f32,
    pub bottleneck_sigma: f64,
    pub softmax_temperature: f64,
    pub decoder_sigmas: [f64; 5],
    pub perceptual_layers: Vec<usize>,
    #[serde(default)]
    pub perceptual_pixels: bool,
    pub seed: u64,
    pub manifest: String,
    pub out: String,
    pub checkpoint_every: usize,
    pub deterministic: bool,
}

impl TrainConfig {
    fn base(preset: &str, profile: ProfileName, parts: usize) -> Self {
        Self {
            preset: preset.to_string(),
            profile,
            parts,
            weak_parts: 5,
            classes: 0,
            w_p: 1.0,
            w_w: 1.0,
            w_v: 1.0,
            curriculum_epoch: 0,
            equivariance_reduction: EquivarianceReduction::Squared,
            lr: 0.001,
            momentum: 0.9,
            lr_decay: 1.0,
            epochs: 100,
            batch: 32,
            n_s: 0,
            n_v: 0,
            facing_policy: FacingPolicy::Relative,
            tps_grid: 5,
            tps_scale: 0.05,
            jitter: 0.1,
            bottleneck_sigma: 0.02,
            softmax_temperature: 1.0,
            decoder_sigmas: DEFAULT_DECODER_SIGMAS,
            perceptual_layers: vec![0, 1, 2, 3],
            perceptual_pixels: false,
            seed: 0,
            manifest: String::new(),
            out: "runs/train".to_string(),
            checkpoint_every: 1,
            deterministic: false,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let full = ProfileName::Full;
        Ok(match name {
            // Reconstruction only.
            "celeba" => Self {
                w_w: 0.0,
                w_v: 0.0,
                ..Self::base(name, full, 10)
            },
            "cub" => Self {
                curriculum_epoch: 30,
                ..Self::base(name, full, 15)
            },
            "animalpose" => Self {
                curriculum_epoch: 40,
                ..Self::base(name, full, 20)
            },
            "stanforddogs" => Self {
                curriculum_epoch: 30,
                ..Self::base(name, full, 24)
            },
            "toy" => Self {
                weak_parts: 3,
                lr: 0.01,
                epochs: 24,
                curriculum_epoch: 10,
                batch: 32,
                w_p: 0.05,
                w_v: 100.0,
                // The full-scale widths fall below one heatmap cell at 64 pixels.
                decoder_sigmas: [0.316, 0.316, 0.1, 0.1, 0.0316],
                perceptual_pixels: true,
                ..Self::base(name, ProfileName::Desk, 8)
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    /// Flat TOML: an optional `preset` key selects the base, every other key
    /// overrides it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        let preset = match table.get("preset") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::Config("preset must be a string".into())),
            None => "toy".to_string(),
        };
        let mut cfg = Self::preset(&preset)?;
        cfg.apply_table(table)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Overrides fields from key/value pairs; unknown keys are rejected.
    pub fn apply_table(&mut self, overrides: toml::Table) -> Result<()> {
        let mut merged = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            if !merged.contains_key(&k) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
            merged.insert(k, v);
        }
        *self = merged.try_into().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return err(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if self.weak_parts == 0 || self.weak_parts >= self.parts {
            return err(format!(
                "need 0 < weak_parts < parts, got {} and {}",
                self.weak_parts, self.parts
            ));
        }
        if self.epochs == 0 || self.batch == 0 {
            return err("epochs and batch must be positive".into());
        }
        let s = self.sampler_config();
        if s.n_v == 0 || s.n_v > s.n_s || s.n_s > self.batch {
            return err(format!(
                "need 0 < n_v ≤ n_s ≤ batch, got {}, {}, {}",
                s.n_v, s.n_s, self.batch
            ));
        }
        if self.checkpoint_every == 0 {
            return err("checkpoint_every must be positive".into());
        }
        self.loss_weights().validate()?;
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            perceptual: self.w_p,
            weak: self.w_w,
            equivariance: self.w_v,
            curriculum_epoch: self.curriculum_epoch,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let d = SamplerConfig::for_batch(self.batch, self.weak_parts);
        SamplerConfig {
            n_s: if self.n_s == 0 { d.n_s } else { self.n_s },
            n_v: if self.n_v == 0 { d.n_v } else { self.n_v },
            weak_parts: self.weak_parts,
            policy: self.facing_policy,
        }
    }

    pub fn pair_config(&self) -> PairConfig {
        PairConfig {
            tps_grid: self.tps_grid,
            tps_scale: self.tps_scale,
            jitter: self.jitter,
        }
    }

    pub fn model_config(&self, classes: usize) -> ModelConfig {
        let mut m = ModelConfig::new(
            ScaleProfile::by_name(self.profile),
            self.parts,
            self.weak_parts,
            classes.max(2),
        );
        m.decoder_sigmas = self.decoder_sigmas;
        m.bottleneck_sigma = self.bottleneck_sigma;
        m.softmax_temperature = self.softmax_temperature;
        m.perceptual_layers = self.perceptual_layers.clone();
        m.perceptual_pixels = self.perceptual_pixels;
        m
    }

    /// Digest of every setting that changes the optimization trajectory.
    /// The epoch count, output location and determinism flag are excluded so a
    /// run can be extended or relocated and still resume.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        c.out = String::new();
        c.deterministic = false;
        c.checkpoint_every = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
