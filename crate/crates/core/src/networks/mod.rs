//! The four trainable sub-networks (shared encoder, keypoint head,
//! reconstruction decoder, weak-supervision head) and the frozen perceptual
//! feature network, assembled into one [`Model`].

mod decoder;
mod encoder;
mod keypoint_head;
pub mod layers;
mod perceptual;
mod profile;
mod weak_head;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decoder::{Decoder, DEFAULT_DECODER_SIGMAS};
pub use encoder::{Encoder, MultiScaleFeatures};
pub use keypoint_head::KeypointHead;
pub use layers::{Mode, Param, ParamKind, ParamStore};
pub use perceptual::PerceptualNet;
pub use profile::{ProfileName, ScaleProfile};
pub use weak_head::{part_pool, WeakHead};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::geometry::KeypointSet;
use crate::raster::Image;
use crate::tensor_ops;
use layers::Builder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub profile: ScaleProfile,
    /// Number of discovered keypoints `K`.
    pub parts: usize,
    /// Keypoints pooled by the weak head, `K_w < K`.
    pub weak_parts: usize,
    pub classes: usize,
    pub decoder_sigmas: [f64; 5],
    /// Width used when rendering keypoints outside the decoder (visual dumps,
    /// supervised finetuning targets).
    pub bottleneck_sigma: f64,
    pub softmax_temperature: f64,
    pub perceptual_layers: Vec<usize>,
    /// Prepend the raw pixels to the perceptual features.
    #[serde(default)]
    pub perceptual_pixels: bool,
}

impl ModelConfig {
    pub fn new(profile: ScaleProfile, parts: usize, weak_parts: usize, classes: usize) -> Self {
        Self {
            profile,
            parts,
            weak_parts,
            classes,
            decoder_sigmas: DEFAULT_DECODER_SIGMAS,
            bottleneck_sigma: 0.02,
            softmax_temperature: 1.0,
            perceptual_layers: vec![0, 1, 2, 3],
            perceptual_pixels: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        if self.parts < 2 {
            return Err(Error::Config("need at least two keypoints".into()));
        }
        if self.weak_parts == 0 || self.weak_parts >= self.parts {
            return Err(Error::Config(format!(
                "weak parts must satisfy 0 < K_w < K (K_w = {}, K = {})",
                self.weak_parts, self.parts
            )));
        }
        if !(self.softmax_temperature > 0.0) || !(self.bottleneck_sigma > 0.0) {
            return Err(Error::Config("temperature and bottleneck sigma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubNetwork {
    Encoder,
    Keypoints,
    Decoder,
    Weak,
    Perceptual,
}

impl SubNetwork {
    pub const ALL: [SubNetwork; 5] = [
        SubNetwork::Encoder,
        SubNetwork::Keypoints,
        SubNetwork::Decoder,
        SubNetwork::Weak,
        SubNetwork::Perceptual,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            SubNetwork::Encoder => "encoder.",
            SubNetwork::Keypoints => "keypoints.",
            SubNetwork::Decoder => "decoder.",
            SubNetwork::Weak => "weak.",
            SubNetwork::Perceptual => "perceptual.",
        }
    }
}

/// Keypoint head outputs for a batch.
#[derive(Debug, Clone)]
pub struct Detection {
    pub logits: Tensor,
    /// Spatially normalized heatmaps `H_k`.
    pub heatmaps: Tensor,
    /// `(B, K, 2)` soft-argmax coordinates.
    pub keypoints: Tensor,
}

#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    keypoint_head: KeypointHead,
    decoder: Decoder,
    weak_head: WeakHead,
    perceptual: PerceptualNet,
    device: Device,
    seed: u64,
}

const MODEL_PREFIX: &str = "model.";

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let mut params = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut root = Builder::new(&mut params, &mut rng, &device);
        let p = &config.profile;
        let encoder = Encoder::new(&mut root.pp("encoder"), p)?;
        let keypoint_head = KeypointHead::new(&mut root.pp("keypoints"), p, config.parts)?;
        let decoder = Decoder::new(&mut root.pp("decoder"), p, config.parts, config.decoder_sigmas)?;
        let weak_head = WeakHead::new(
            &mut root.pp("weak"),
            p,
            config.parts,
            config.weak_parts,
            config.classes,
        )?;
        let perceptual = PerceptualNet::new(&mut root.pp("perceptual"), p, &config.perceptual_layers, config.perceptual_pixels)?;
        Ok(Self {
            config,
            params,
            encoder,
            keypoint_head,
            decoder,
            weak_head,
            perceptual,
            device,
            seed,
        })
    }

    /// Builds the model recorded in `ck` and restores every parameter.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(ck.meta("model_config")?)?;
        let seed = ck
            .meta("model_seed")?
            .parse()
            .map_err(|_| Error::Checkpoint("model_seed is not an integer".into()))?;
        let model = Self::new(config, seed)?;
        model.load_state(ck)?;
        Ok(model)
    }

    /// Adds the configuration and all parameters (including running statistics
    /// and frozen weights) to `ck`.
    pub fn write_state(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.metadata.insert("model_config".into(), serde_json::to_string(&self.config)?);
        ck.metadata.insert("model_seed".into(), self.seed.to_string());
        ck.metadata.insert("profile".into(), format!("{:?}", self.config.profile.name).to_lowercase());
        for (name, p) in self.params.iter() {
            let t = p.var.as_tensor();
            ck.insert(
                format!("{MODEL_PREFIX}{name}"),
                t.dims().to_vec(),
                t.flatten_all()?.to_vec1::<f32>()?,
            )?;
        }
        Ok(())
    }

    pub fn load_state(&self, ck: &Checkpoint) -> Result<()> {
        for (name, p) in self.params.iter() {
            let stored = ck.tensor(&format!("{MODEL_PREFIX}{name}"))?;
            if stored.shape != p.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    stored.shape,
                    p.var.dims()
                )));
            }
            p.var.set(&Tensor::from_vec(stored.data.clone(), stored.shape.as_slice(), &self.device)?)?;
        }
        Ok(())
    }

    /// Copies every parameter value from `other`, which must share the architecture.
    pub fn copy_from(&self, other: &Model) -> Result<()> {
        let mut ck = Checkpoint::new();
        other.write_state(&mut ck)?;
        self.load_state(&ck)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn keypoint_head(&self) -> &KeypointHead {
        &self.keypoint_head
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn weak_head(&self) -> &WeakHead {
        &self.weak_head
    }

    pub fn perceptual(&self) -> &PerceptualNet {
        &self.perceptual
    }

    pub fn subnetwork_params(&self, net: SubNetwork) -> impl Iterator<Item = (&String, &Param)> {
        self.params.group(net.prefix())
    }

    pub fn encode(&self, images: &Tensor, mode: Mode) -> Result<MultiScaleFeatures> {
        self.encoder.forward(images, mode)
    }

    pub fn keypoint_logits(&self, features: &MultiScaleFeatures, mode: Mode) -> Result<Tensor> {
        self.keypoint_head.forward(features, mode)
    }

    pub fn normalize(&self, logits: &Tensor) -> Result<Tensor> {
        let t = self.config.softmax_temperature;
        if t == 1.0 {
            tensor_ops::spatial_softmax(logits)
        } else {
            tensor_ops::spatial_softmax(&(logits / t)?)
        }
    }

    pub fn detect(&self, features: &MultiScaleFeatures, mode: Mode) -> Result<Detection> {
        let logits = self.keypoint_logits(features, mode)?;
        let heatmaps = self.normalize(&logits)?;
        let keypoints = tensor_ops::soft_argmax(&heatmaps)?;
        Ok(Detection {
            logits,
            heatmaps,
            keypoints,
        })
    }

    /// Reconstruction from source appearance (deepest source block) and keypoints.
    pub fn reconstruct(&self, appearance: &Tensor, keypoints: &Tensor, mode: Mode) -> Result<Tensor> {
        self.decoder.forward(appearance, keypoints, mode)
    }

    pub fn classify(&self, features: &MultiScaleFeatures, heatmaps: &Tensor, mode: Mode) -> Result<Tensor> {
        self.weak_head.forward(features, heatmaps, mode)
    }

    pub fn perceptual_features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        self.perceptual.forward(images)
    }

    pub fn images_to_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        images_to_tensor(images, self.config.profile.image_size, &self.device)
    }

    /// Eval-mode keypoints for a list of images, processed in chunks.
    pub fn predict_keypoints(&self, images: &[&Image], chunk: usize) -> Result<Vec<KeypointSet>> {
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let x = self.images_to_tensor(part)?;
            let det = self.detect(&self.encode(&x, Mode::Eval)?, Mode::Eval)?;
            out.extend(keypoints_from_tensor(&det.keypoints)?);
        }
        Ok(out)
    }
}

pub fn images_to_tensor(images: &[&Image], size: usize, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        if img.width() != size || img.height() != size {
            return Err(Error::shape(format!(
                "image is {}×{}, model expects {size}×{size}",
                img.width(),
                img.height()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, size, size), device)?)
}

pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let flat = t.flatten_all()?.to_vec1::<f32>()?;
    flat.chunks_exact(3 * h * w)
        .take(b)
        .map(|chunk| Image::from_data(w, h, chunk.iter().map(|v| v.clamp(0.0, 1.0)).collect()))
        .collect()
}

pub fn keypoints_from_tensor(t: &Tensor) -> Result<Vec<KeypointSet>> {
    let (_, k, two) = t.dims3()?;
    if two != 2 {
        return Err(Error::shape("keypoint tensor must end in 2"));
    }
    let flat = t.flatten_all()?.to_vec1::<f32>()?;
    flat.chunks_exact(2 * k)
        .map(|c| KeypointSet::from_flat(&c.iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .collect()
}

pub fn keypoints_to_tensor(sets: &[&KeypointSet], device: &Device) -> Result<Tensor> {
    let k = sets.first().map(|s| s.len()).unwrap_or(0);
    if sets.iter().any(|s| s.len() != k) {
        return Err(Error::shape("keypoint sets differ in length"));
    }
    let data: Vec<f32> = sets.iter().flat_map(|s| s.flatten()).map(|v| v as f32).collect();
    Ok(Tensor::from_vec(data, (sets.len(), k, 2), device)?)
}
