//! Synthetic creatures with known part locations.
//!
//! Each creature has a body ellipse, a head disc with an eye on the facing
//! side and four legs. The class sets the head color; facing is mirrored at
//! random; position, size and leg angles vary per image.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{record_rng, write_manifest, ManifestHeader, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::raster::Image;

pub const PART_NAMES: [&str; 6] = [
    "head",
    "body",
    "front_outer_leg",
    "front_inner_leg",
    "back_inner_leg",
    "back_outer_leg",
];

pub const CLASS_COLORS: [[f32; 3]; 3] = [[0.85, 0.15, 0.1], [0.15, 0.7, 0.2], [0.15, 0.3, 0.9]];

const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Facing {
    Left,
    Right,
}

impl Facing {
    pub fn sign(self) -> f64 {
        match self {
            Facing::Left => -1.0,
            Facing::Right => 1.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Facing::Left => 0,
            Facing::Right => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub size: usize,
    pub classes: usize,
    pub center_range: [f64; 2],
    pub scale_range: [f64; 2],
    pub max_leg_angle: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            size: 64,
            classes: 3,
            center_range: [0.22, 0.78],
            scale_range: [0.8, 1.2],
            max_leg_angle: 0.35,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Creature {
    pub image: Image,
    pub label: usize,
    pub facing: Facing,
    /// Normalized part coordinates in [`PART_NAMES`] order.
    pub parts: [[f64; 2]; 6],
    /// Normalized `(x, y, w, h)` around every drawn shape.
    pub bbox: [f64; 4],
}

enum Shape {
    Ellipse { c: [f64; 2], a: f64, b: f64 },
    Disc { c: [f64; 2], r: f64 },
    Segment { p: [f64; 2], q: [f64; 2], r: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { c, a, b } => {
                let dx = (x - c[0]) / a;
                let dy = (y - c[1]) / b;
                dx * dx + dy * dy <= 1.0
            }
            Shape::Disc { c, r } => (x - c[0]).powi(2) + (y - c[1]).powi(2) <= r * r,
            Shape::Segment { p, q, r } => {
                let d = [q[0] - p[0], q[1] - p[1]];
                let len2 = d[0] * d[0] + d[1] * d[1];
                let t = (((x - p[0]) * d[0] + (y - p[1]) * d[1]) / len2).clamp(0.0, 1.0);
                let ex = x - (p[0] + t * d[0]);
                let ey = y - (p[1] + t * d[1]);
                ex * ex + ey * ey <= r * r
            }
        }
    }

    fn extent(&self) -> [f64; 4] {
        match *self {
            Shape::Ellipse { c, a, b } => [c[0] - a, c[1] - b, c[0] + a, c[1] + b],
            Shape::Disc { c, r } => [c[0] - r, c[1] - r, c[0] + r, c[1] + r],
            Shape::Segment { p, q, r } => [
                p[0].min(q[0]) - r,
                p[1].min(q[1]) - r,
                p[0].max(q[0]) + r,
                p[1].max(q[1]) + r,
            ],
        }
    }
}

/// Renders creature `index` of the dataset generated from `seed`.
pub fn render_creature(params: &ToyParams, seed: u64, index: u64) -> Creature {
    let mut rng = record_rng(seed, 0x70, index);
    let label = (index % params.classes as u64) as usize;
    let facing = if rng.random_bool(0.5) { Facing::Right } else { Facing::Left };
    let dir = facing.sign();
    let [lo, hi] = params.center_range;
    let cx = rng.random_range(lo..=hi);
    let cy = rng.random_range(lo..=hi);
    let s = rng.random_range(params.scale_range[0]..=params.scale_range[1]) * 0.85;
    let background = {
        let g = rng.random_range(0.78..=0.92f32);
        [g + rng.random_range(-0.04..=0.04f32), g, g + rng.random_range(-0.04..=0.04f32)]
    };
    let shade = rng.random_range(0.25..=0.4f32);
    let body_color = [shade + 0.1, shade, shade * 0.8];
    let leg_color = [shade * 0.7, shade * 0.6, shade * 0.5];
    let head_color = CLASS_COLORS[label % CLASS_COLORS.len()];

    let body_c = [cx, cy];
    let head_c = [cx + dir * 0.19 * s, cy - 0.08 * s];
    let eye_c = [head_c[0] + dir * 0.03 * s, head_c[1] - 0.01 * s];
    let hip_y = cy + 0.04 * s;
    let leg_len = 0.14 * s;
    // Front legs sit on the head side.
    let hips = [0.11, 0.045, -0.045, -0.11].map(|o| [cx + dir * o * s, hip_y]);
    let tips = hips.map(|h| {
        let a = rng.random_range(-params.max_leg_angle..=params.max_leg_angle);
        [h[0] + leg_len * a.sin(), h[1] + leg_len * a.cos()]
    });

    let mut shapes: Vec<(Shape, [f32; 3])> = Vec::new();
    for (h, t) in hips.iter().zip(&tips) {
        shapes.push((Shape::Segment { p: *h, q: *t, r: 0.022 * s }, leg_color));
    }
    shapes.push((Shape::Ellipse { c: body_c, a: 0.15 * s, b: 0.075 * s }, body_color));
    shapes.push((Shape::Disc { c: head_c, r: 0.07 * s }, head_color));
    shapes.push((Shape::Disc { c: eye_c, r: 0.018 * s }, [0.05, 0.05, 0.05]));

    let n = params.size;
    let mut image = Image::filled(n, n, background);
    let inv = 1.0 / (n * SUPERSAMPLE) as f64;
    for py in 0..n {
        for px in 0..n {
            let mut acc = [0.0f32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = ((px * SUPERSAMPLE + sx) as f64 + 0.5) * inv;
                    let y = ((py * SUPERSAMPLE + sy) as f64 + 0.5) * inv;
                    let color = shapes
                        .iter()
                        .rev()
                        .find(|(shape, _)| shape.contains(x, y))
                        .map(|(_, c)| *c)
                        .unwrap_or(background);
                    for c in 0..3 {
                        acc[c] += color[c];
                    }
                }
            }
            let k = (SUPERSAMPLE * SUPERSAMPLE) as f32;
            image.set_pixel(px, py, acc.map(|a| a / k));
        }
    }

    let mut ext = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for (shape, _) in &shapes {
        let e = shape.extent();
        ext = [ext[0].min(e[0]), ext[1].min(e[1]), ext[2].max(e[2]), ext[3].max(e[3])];
    }
    let ext = [ext[0].max(0.0), ext[1].max(0.0), ext[2].min(1.0), ext[3].min(1.0)];

    Creature {
        image,
        label,
        facing,
        parts: [head_c, body_c, tips[0], tips[1], tips[2], tips[3]],
        bbox: [ext[0], ext[1], ext[2] - ext[0], ext[3] - ext[1]],
    }
}

/// Per-image ground truth written next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub part_names: Vec<String>,
    pub images: Vec<String>,
    pub labels: Vec<usize>,
    pub facing: Vec<Facing>,
    /// Pixel coordinates, `[image][part][x, y]`.
    pub keypoints: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub header: ManifestHeader,
    pub records: Vec<SampleRecord>,
    pub truth: GroundTruth,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// Writes `n` PNG images, a manifest and a ground-truth JSON under `out`.
pub fn synth_toy_dataset(out: &Path, n: usize, seed: u64, split: Split, params: &ToyParams) -> Result<ToyDataset> {
    if n == 0 {
        return Err(Error::invalid("toy dataset needs at least one image"));
    }
    if params.classes < 2 || params.classes > CLASS_COLORS.len() {
        return Err(Error::invalid(format!(
            "toy classes must be within 2..={}",
            CLASS_COLORS.len()
        )));
    }
    std::fs::create_dir_all(out.join("images"))?;
    let size = params.size as f64;
    let mut header = ManifestHeader::new(PART_NAMES.len(), params.classes);
    header.part_names = PART_NAMES.iter().map(|s| s.to_string()).collect();
    let mut records = Vec::with_capacity(n);
    let mut truth = GroundTruth {
        part_names: header.part_names.clone(),
        images: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        facing: Vec::with_capacity(n),
        keypoints: Vec::with_capacity(n),
    };
    for i in 0..n {
        let c = render_creature(params, seed, i as u64);
        let rel = format!("images/{i:05}.png");
        c.image.save_png(&out.join(&rel))?;
        let px: Vec<[f64; 2]> = c.parts.iter().map(|p| [p[0] * size, p[1] * size]).collect();
        let visible = |p: &[f64; 2]| (0.0..=size).contains(&p[0]) && (0.0..=size).contains(&p[1]);
        records.push(SampleRecord {
            image: rel.clone(),
            label: c.label,
            keypoints: Some(px.iter().map(|p| [p[0], p[1], if visible(p) { 1.0 } else { 0.0 }]).collect()),
            bbox: Some(c.bbox.map(|v| v * size)),
            split,
            posture: Some(c.facing.index()),
        });
        truth.images.push(rel);
        truth.labels.push(c.label);
        truth.facing.push(c.facing);
        truth.keypoints.push(px);
    }
    write_manifest(&out.join(MANIFEST_FILE), &header, &records)?;
    std::fs::write(out.join(GROUND_TRUTH_FILE), serde_json::to_string(&truth)?)?;
    Ok(ToyDataset { header, records, truth })
}
