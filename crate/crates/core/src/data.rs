//! Manifests, in-memory datasets and source/target pair construction.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_warp, make_tps, TpsWarp};
use crate::raster::Image;

const MANIFEST_TAG: &str = "wskd-manifest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest line. Coordinates are in pixels of the stored image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<[f64; 3]>>,
    /// `(x, y, w, h)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default = "default_split")]
    pub split: Split,
    /// Optional posture class used by the posture probe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posture: Option<usize>,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub manifest: String,
    pub keypoint_arity: usize,
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub part_names: Vec<String>,
}

impl ManifestHeader {
    pub fn new(keypoint_arity: usize, classes: usize) -> Self {
        Self {
            manifest: MANIFEST_TAG.to_string(),
            keypoint_arity,
            classes,
            part_names: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: Option<ManifestHeader>,
    pub records: Vec<SampleRecord>,
    /// Directory that relative image paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn classes(&self) -> usize {
        self.header.as_ref().map(|h| h.classes).unwrap_or(0)
    }

    pub fn arity(&self) -> usize {
        self.header.as_ref().map(|h| h.keypoint_arity).unwrap_or(0)
    }

    pub fn image_path(&self, record: &SampleRecord) -> PathBuf {
        let p = Path::new(&record.image);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = std::fs::File::open(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut header: Option<ManifestHeader> = None;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Manifest { line: n, message };
        match &header {
            None => {
                let h: ManifestHeader = serde_json::from_str(&line)
                    .map_err(|e| bad(format!("expected header line: {e}")))?;
                if h.manifest != MANIFEST_TAG {
                    return Err(bad(format!("unknown manifest tag {:?}", h.manifest)));
                }
                header = Some(h);
            }
            Some(h) => {
                let r: SampleRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
                if h.classes > 0 && r.label >= h.classes {
                    return Err(bad(format!("label {} outside {} declared classes", r.label, h.classes)));
                }
                if let Some(k) = &r.keypoints {
                    if k.len() != h.keypoint_arity {
                        return Err(bad(format!(
                            "keypoint arity mismatch: header declares {}, record has {}",
                            h.keypoint_arity,
                            k.len()
                        )));
                    }
                }
                records.push(r);
            }
        }
    }
    Ok(Manifest { header, records, root })
}

pub fn write_manifest(path: &Path, header: &ManifestHeader, records: &[SampleRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", serde_json::to_string(header)?)?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()?;
    Ok(())
}

/// Annotated keypoint in normalized coordinates of the resized image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub point: [f64; 2],
    pub visible: bool,
}

/// A manifest record loaded and resized to the model input.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub keypoints: Option<Vec<Annotation>>,
    /// Normalized `(x, y, w, h)`.
    pub bbox: Option<[f64; 4]>,
    pub split: Split,
    pub posture: Option<usize>,
}

/// Maps pixel coordinates of a `width × height` image into the normalized
/// frame of its centered pad-to-square resize.
pub fn pad_square_coords(width: usize, height: usize, x: f64, y: f64) -> [f64; 2] {
    let side = width.max(height) as f64;
    let off_x = (side - width as f64) / 2.0;
    let off_y = (side - height as f64) / 2.0;
    [(x + off_x) / side, (y + off_y) / side]
}

pub fn load_sample(manifest: &Manifest, record: &SampleRecord, size: usize) -> Result<Sample> {
    let raw = Image::load_png(&manifest.image_path(record))?;
    let (w, h) = (raw.width(), raw.height());
    let keypoints = record.keypoints.as_ref().map(|kps| {
        kps.iter()
            .map(|&[x, y, v]| Annotation {
                point: pad_square_coords(w, h, x, y),
                visible: v > 0.0,
            })
            .collect()
    });
    let bbox = record.bbox.map(|[x, y, bw, bh]| {
        let [u, v] = pad_square_coords(w, h, x, y);
        let side = w.max(h) as f64;
        [u, v, bw / side, bh / side]
    });
    Ok(Sample {
        image: raw.pad_resize_square(size),
        label: record.label,
        keypoints,
        bbox,
        split: record.split,
        posture: record.posture,
    })
}

/// All samples of a manifest, optionally restricted to one split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: usize,
    pub arity: usize,
}

impl Dataset {
    pub fn load(manifest: &Manifest, size: usize, split: Option<Split>) -> Result<Self> {
        let samples = manifest
            .records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(|r| load_sample(manifest, r, size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            classes: manifest.classes(),
            arity: manifest.arity(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut m = BTreeMap::new();
        for s in &self.samples {
            *m.entry(s.split).or_insert(0) += 1;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub tps_grid: usize,
    pub tps_scale: f64,
    /// Maximum brightness offset and relative contrast change on the source.
    pub jitter: f32,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            tps_grid: 5,
            tps_scale: 0.05,
            jitter: 0.1,
        }
    }
}

/// Source and TPS-warped target. Carries no keypoint annotation.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub source: Image,
    pub target: Image,
    pub warp: TpsWarp,
    pub label: usize,
}

/// Independent generator for `(seed, stream, index)`, so results do not depend
/// on iteration order.
pub fn record_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    rng
}

pub fn make_pair<R: Rng + ?Sized>(image: &Image, label: usize, cfg: &PairConfig, rng: &mut R) -> Result<TrainPair> {
    let warp = make_tps(cfg.tps_grid, cfg.tps_scale, rng, image.height(), image.width())?;
    let target = apply_warp(image, &warp)?;
    let source = if cfg.jitter > 0.0 {
        let j = cfg.jitter;
        let brightness = rng.random_range(-j..=j);
        let contrast = 1.0 + rng.random_range(-j..=j);
        image.adjust(brightness, contrast)
    } else {
        image.clone()
    };
    Ok(TrainPair {
        source,
        target,
        warp,
        label,
    })
}
