//! Geometric kernels on normalized coordinates.
//!
//! Every coordinate lives in `[0,1]²` with `u` horizontal and `v` vertical.
//! A grid of `H × W` cells places cell `(i, j)` at its center
//! `((j + 0.5) / W, (i + 0.5) / H)`, so a horizontal flip is exactly `u → 1 − u`.
//!
//! These are the scalar reference implementations. The batched tensor
//! versions used during training live in [`crate::tensor_ops`] and are
//! checked against the functions here.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Image, CHANNELS};

/// Center of cell `index` along an axis with `extent` cells.
#[inline]
pub fn cell_center(index: usize, extent: usize) -> f64 {
    (index as f64 + 0.5) / extent as f64
}

/// `K` keypoints `(u, v)` in normalized image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    coords: Vec<[f64; 2]>,
}

impl KeypointSet {
    pub fn new(coords: Vec<[f64; 2]>) -> Result<Self> {
        if let Some(k) = coords.iter().position(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(Error::invalid(format!("keypoint {k} is not finite")));
        }
        Ok(Self { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn get(&self, k: usize) -> [f64; 2] {
        self.coords[k]
    }

    pub fn us(&self) -> impl Iterator<Item = f64> + '_ {
        self.coords.iter().map(|c| c[0])
    }

    /// Flattened `[u0, v0, u1, v1, ...]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.coords.iter().flat_map(|c| [c[0], c[1]]).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::shape("flattened keypoints must have even length"));
        }
        Self::new(flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn in_unit_square(&self) -> bool {
        self.coords
            .iter()
            .all(|c| (0.0..=1.0).contains(&c[0]) && (0.0..=1.0).contains(&c[1]))
    }

    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        Self {
            coords: self.coords.iter().map(|&c| f(c)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeatmapKind {
    Logits,
    Normalized,
}

/// `K × H × W` maps, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    parts: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
    kind: HeatmapKind,
}

impl HeatmapStack {
    pub fn logits(parts: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::with_kind(parts, height, width, values, HeatmapKind::Logits)
    }

    /// Wraps already-normalized maps, checking the per-channel simplex constraint.
    pub fn normalized(
        parts: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let stack = Self::with_kind(parts, height, width, values, HeatmapKind::Normalized)?;
        for k in 0..parts {
            let ch = stack.channel(k);
            let sum: f64 = ch.iter().sum();
            if ch.iter().any(|&p| p < 0.0 || !p.is_finite()) || (sum - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(format!(
                    "channel {k} is not a probability map (sum {sum})"
                )));
            }
        }
        Ok(stack)
    }

    fn with_kind(
        parts: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
        kind: HeatmapKind,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("heatmap grid must be non-empty"));
        }
        if values.len() != parts * height * width {
            return Err(Error::shape(format!(
                "heatmap has {} values, expected {parts}×{height}×{width}",
                values.len()
            )));
        }
        Ok(Self {
            parts,
            height,
            width,
            values,
            kind,
        })
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kind(&self) -> HeatmapKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[k * n..(k + 1) * n]
    }

    /// Mirror every channel left-to-right.
    pub fn flip_horizontal(&self) -> Self {
        let mut values = vec![0.0; self.values.len()];
        let (h, w) = (self.height, self.width);
        for k in 0..self.parts {
            for i in 0..h {
                for j in 0..w {
                    values[(k * h + i) * w + (w - 1 - j)] = self.values[(k * h + i) * w + j];
                }
            }
        }
        Self {
            values,
            ..self.clone()
        }
    }
}

/// Per-channel softmax over the spatial grid (temperature 1).
pub fn spatial_softmax(logits: &HeatmapStack) -> Result<HeatmapStack> {
    spatial_softmax_with_temperature(logits, 1.0)
}

pub fn spatial_softmax_with_temperature(
    logits: &HeatmapStack,
    temperature: f64,
) -> Result<HeatmapStack> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("softmax temperature must be positive"));
    }
    let n = logits.height * logits.width;
    let mut values = Vec::with_capacity(logits.values.len());
    for k in 0..logits.parts {
        let ch = logits.channel(k);
        if ch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteChannel { channel: k });
        }
        let max = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = values.len();
        values.extend(ch.iter().map(|&z| ((z - max) / temperature).exp()));
        let sum: f64 = values[start..start + n].iter().sum();
        for p in &mut values[start..start + n] {
            *p /= sum;
        }
    }
    Ok(HeatmapStack {
        values,
        kind: HeatmapKind::Normalized,
        ..logits.clone()
    })
}

/// Expected cell-center coordinate under each normalized channel.
pub fn soft_argmax(normalized: &HeatmapStack) -> Result<KeypointSet> {
    if normalized.kind != HeatmapKind::Normalized {
        return Err(Error::NotNormalized);
    }
    let (h, w) = (normalized.height, normalized.width);
    let coords = (0..normalized.parts)
        .map(|k| {
            let ch = normalized.channel(k);
            let mut u = 0.0;
            let mut v = 0.0;
            for i in 0..h {
                let vi = cell_center(i, h);
                for j in 0..w {
                    let p = ch[i * w + j];
                    u += p * cell_center(j, w);
                    v += p * vi;
                }
            }
            [u, v]
        })
        .collect();
    KeypointSet::new(coords)
}

/// Gradient of `Σ_k g_k · soft_argmax(spatial_softmax(logits))_k` with respect
/// to the logits. `grad_coords[k] = (∂L/∂u_k, ∂L/∂v_k)`.
pub fn soft_argmax_logits_vjp(logits: &HeatmapStack, grad_coords: &[[f64; 2]]) -> Result<Vec<f64>> {
    if grad_coords.len() != logits.parts {
        return Err(Error::shape("one coordinate gradient per channel required"));
    }
    let probs = spatial_softmax(logits)?;
    let kps = soft_argmax(&probs)?;
    let (h, w) = (logits.height, logits.width);
    let mut grad = vec![0.0; logits.values.len()];
    for k in 0..logits.parts {
        let [pu, pv] = kps.get(k);
        let [gu, gv] = grad_coords[k];
        let ch = probs.channel(k);
        for i in 0..h {
            let dv = cell_center(i, h) - pv;
            for j in 0..w {
                let du = cell_center(j, w) - pu;
                grad[(k * h + i) * w + j] = ch[i * w + j] * (du * gu + dv * gv);
            }
        }
    }
    Ok(grad)
}

/// Rendered Gaussian keypoint maps.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBottleneck {
    maps: HeatmapStack,
    sigma: f64,
    centers: KeypointSet,
}

impl GaussianBottleneck {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn maps(&self) -> &HeatmapStack {
        &self.maps
    }

    /// Natural log of the maps, computed in closed form so that far cells
    /// stay finite even when the density underflows.
    pub fn log_maps(&self) -> HeatmapStack {
        let (h, w) = (self.maps.height, self.maps.width);
        let log_norm = -0.5 * (2.0 * std::f64::consts::PI * self.sigma * self.sigma).ln();
        let two_var = 2.0 * self.sigma * self.sigma;
        let mut values = Vec::with_capacity(self.maps.values.len());
        for &[pu, pv] in self.centers.coords() {
            for i in 0..h {
                let dv = cell_center(i, h) - pv;
                for j in 0..w {
                    let du = cell_center(j, w) - pu;
                    values.push(log_norm - (du * du + dv * dv) / two_var);
                }
            }
        }
        HeatmapStack {
            values,
            kind: HeatmapKind::Logits,
            ..self.maps.clone()
        }
    }
}

/// `B_k(x) = (2πσ²)^(-1/2) · exp(-‖x − p_k‖² / 2σ²)` sampled at cell centers.
pub fn render_gaussian(
    kps: &KeypointSet,
    sigma: f64,
    height: usize,
    width: usize,
) -> Result<GaussianBottleneck> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::shape("render target must be non-empty"));
    }
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt();
    let two_var = 2.0 * sigma * sigma;
    let mut values = Vec::with_capacity(kps.len() * height * width);
    for &[pu, pv] in kps.coords() {
        for i in 0..height {
            let dv = cell_center(i, height) - pv;
            for j in 0..width {
                let du = cell_center(j, width) - pu;
                values.push(norm * (-(du * du + dv * dv) / two_var).exp());
            }
        }
    }
    Ok(GaussianBottleneck {
        maps: HeatmapStack::with_kind(kps.len(), height, width, values, HeatmapKind::Logits)?,
        sigma,
        centers: kps.clone(),
    })
}

/// Horizontal mirror `u → 1 − u`. Channel order is kept as is.
pub fn flip_keypoints(kps: &KeypointSet) -> KeypointSet {
    kps.map(|[u, v]| [1.0 - u, v])
}

/// Thin-plate-spline radial basis `r² log r`, written in terms of `r²`.
#[inline]
fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// A thin-plate-spline map `T` with `T(control_src[i]) = control_dst[i]`.
///
/// [`apply_warp`] produces `out(x) = src(T(x))`, so a feature at `c` in the
/// source shows up at `T⁻¹(c)` in the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsWarp {
    control_src: Vec<[f64; 2]>,
    control_dst: Vec<[f64; 2]>,
    /// Radial weights, one `(wu, wv)` per control point.
    weights: Vec<[f64; 2]>,
    /// Rows `[a0, a_u, a_v]` for the `u` and `v` outputs.
    affine: [[f64; 3]; 2],
    height: usize,
    width: usize,
    /// `H × W × 2` displacement `T(x) − x` at pixel centers.
    field: Vec<[f64; 2]>,
}

impl TpsWarp {
    /// Solves the interpolation system for the given correspondences and
    /// materializes the displacement field on an `height × width` grid.
    pub fn from_control_points(
        control_src: Vec<[f64; 2]>,
        control_dst: Vec<[f64; 2]>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let n = control_src.len();
        if n != control_dst.len() {
            return Err(Error::shape("control point lists differ in length"));
        }
        if n < 3 {
            return Err(Error::invalid("thin-plate spline needs at least 3 control points"));
        }
        let size = n + 3;
        let mut system = DMatrix::<f64>::zeros(size, size);
        for a in 0..n {
            for b in 0..n {
                let du = control_src[a][0] - control_src[b][0];
                let dv = control_src[a][1] - control_src[b][1];
                system[(a, b)] = tps_kernel(du * du + dv * dv);
            }
            let row = [1.0, control_src[a][0], control_src[a][1]];
            for (c, value) in row.iter().enumerate() {
                system[(a, n + c)] = *value;
                system[(n + c, a)] = *value;
            }
        }
        let lu = system.lu();
        let mut solutions = [DVector::zeros(size), DVector::zeros(size)];
        for (axis, solution) in solutions.iter_mut().enumerate() {
            let mut rhs = DVector::<f64>::zeros(size);
            for i in 0..n {
                rhs[i] = control_dst[i][axis];
            }
            *solution = lu
                .solve(&rhs)
                .ok_or_else(|| Error::Singular("degenerate thin-plate-spline control grid".into()))?;
        }
        if solutions.iter().any(|s| s.iter().any(|x| !x.is_finite())) {
            return Err(Error::Singular("degenerate thin-plate-spline control grid".into()));
        }
        let weights = (0..n).map(|i| [solutions[0][i], solutions[1][i]]).collect();
        let affine = [
            [solutions[0][n], solutions[0][n + 1], solutions[0][n + 2]],
            [solutions[1][n], solutions[1][n + 1], solutions[1][n + 2]],
        ];
        let mut warp = Self {
            control_src,
            control_dst,
            weights,
            affine,
            height,
            width,
            field: Vec::new(),
        };
        warp.field = (0..height)
            .flat_map(|i| (0..width).map(move |j| (i, j)))
            .map(|(i, j)| {
                let x = [cell_center(j, width), cell_center(i, height)];
                let t = warp.map_point(x);
                [t[0] - x[0], t[1] - x[1]]
            })
            .collect();
        Ok(warp)
    }

    /// Evaluates `T(p)`.
    pub fn map_point(&self, p: [f64; 2]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (axis, o) in out.iter_mut().enumerate() {
            let a = self.affine[axis];
            *o = a[0] + a[1] * p[0] + a[2] * p[1];
        }
        for (c, w) in self.control_src.iter().zip(&self.weights) {
            let du = p[0] - c[0];
            let dv = p[1] - c[1];
            let k = tps_kernel(du * du + dv * dv);
            out[0] += w[0] * k;
            out[1] += w[1] * k;
        }
        out
    }

    /// Jacobian `∂T/∂p` as rows `[∂T_u/∂u, ∂T_u/∂v]`, `[∂T_v/∂u, ∂T_v/∂v]`.
    fn jacobian(&self, p: [f64; 2]) -> [[f64; 2]; 2] {
        let mut jac = [[self.affine[0][1], self.affine[0][2]], [self.affine[1][1], self.affine[1][2]]];
        for (c, w) in self.control_src.iter().zip(&self.weights) {
            let du = p[0] - c[0];
            let dv = p[1] - c[1];
            let r2 = du * du + dv * dv;
            if r2 <= 0.0 {
                continue;
            }
            // d/dp of ½ r² ln r² is (ln r² + 1)(p − c).
            let f = r2.ln() + 1.0;
            for axis in 0..2 {
                jac[axis][0] += w[axis] * f * du;
                jac[axis][1] += w[axis] * f * dv;
            }
        }
        jac
    }

    /// Solves `T(x) = q` for `x` by damped Newton iteration.
    pub fn inverse_point(&self, q: [f64; 2]) -> [f64; 2] {
        let residual = |x: [f64; 2]| {
            let t = self.map_point(x);
            [q[0] - t[0], q[1] - t[1]]
        };
        let norm = |r: [f64; 2]| r[0].abs() + r[1].abs();
        let mut x = q;
        let mut r = residual(x);
        for _ in 0..100 {
            if norm(r) < 1e-13 {
                break;
            }
            let j = self.jacobian(x);
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            let step = if det.abs() > 1e-12 {
                [
                    (j[1][1] * r[0] - j[0][1] * r[1]) / det,
                    (j[0][0] * r[1] - j[1][0] * r[0]) / det,
                ]
            } else {
                r
            };
            let mut scale = 1.0;
            loop {
                let cand = [x[0] + scale * step[0], x[1] + scale * step[1]];
                let rc = residual(cand);
                if norm(rc) < norm(r) || scale < 1e-6 {
                    x = cand;
                    r = rc;
                    break;
                }
                scale *= 0.5;
            }
        }
        x
    }

    pub fn control_src(&self) -> &[[f64; 2]] {
        &self.control_src
    }

    pub fn control_dst(&self) -> &[[f64; 2]] {
        &self.control_dst
    }

    /// Affine part as a `2 × 3` matrix acting on `[1, u, v]`.
    pub fn affine(&self) -> [[f64; 3]; 2] {
        self.affine
    }

    pub fn field(&self) -> &[[f64; 2]] {
        &self.field
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn max_displacement(&self) -> f64 {
        self.field
            .iter()
            .map(|d| d[0].abs().max(d[1].abs()))
            .fold(0.0, f64::max)
    }
}

/// Regular `grid_size × grid_size` lattice spanning `[0,1]²`.
pub fn control_grid(grid_size: usize) -> Vec<[f64; 2]> {
    let step = 1.0 / (grid_size - 1) as f64;
    (0..grid_size)
        .flat_map(|i| (0..grid_size).map(move |j| [j as f64 * step, i as f64 * step]))
        .collect()
}

/// Random thin-plate-spline warp: each control point of a regular grid is
/// displaced by independent uniform offsets in `[-scale, scale]²`.
pub fn make_tps<R: Rng + ?Sized>(
    grid_size: usize,
    scale: f64,
    rng: &mut R,
    height: usize,
    width: usize,
) -> Result<TpsWarp> {
    if grid_size < 2 {
        return Err(Error::invalid("TPS grid size must be at least 2"));
    }
    let spacing = 1.0 / (grid_size - 1) as f64;
    if !(0.0..0.5 * spacing).contains(&scale) {
        return Err(Error::invalid(format!(
            "TPS scale {scale} outside [0, {})",
            0.5 * spacing
        )));
    }
    let src = control_grid(grid_size);
    let dst = src
        .iter()
        .map(|&[u, v]| {
            if scale == 0.0 {
                [u, v]
            } else {
                [
                    u + rng.random_range(-scale..=scale),
                    v + rng.random_range(-scale..=scale),
                ]
            }
        })
        .collect();
    TpsWarp::from_control_points(src, dst, height, width)
}

/// `out(x) = image(T(x))` with bilinear sampling and border clamping.
pub fn apply_warp(image: &Image, warp: &TpsWarp) -> Result<Image> {
    if image.width() != warp.width || image.height() != warp.height {
        return Err(Error::shape(format!(
            "image {}×{} does not match warp field {}×{}",
            image.width(),
            image.height(),
            warp.width,
            warp.height
        )));
    }
    let (w, h) = (warp.width, warp.height);
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let d = warp.field[y * w + x];
            // Pixel-space source position: displacement scaled by the grid extent.
            let sx = x as f64 + d[0] * w as f64;
            let sy = y as f64 + d[1] * h as f64;
            for c in 0..CHANNELS {
                out.set(c, x, y, image.sample_bilinear(c, sx, sy));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stack(parts: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> HeatmapStack {
        let mut values = Vec::new();
        for k in 0..parts {
            for i in 0..h {
                for j in 0..w {
                    values.push(f(k, i, j));
                }
            }
        }
        HeatmapStack::logits(parts, h, w, values).unwrap()
    }

    #[test]
    fn uniform_softmax() {
        let probs = spatial_softmax(&stack(3, 4, 4, |_, _, _| 0.0)).unwrap();
        assert_eq!(probs.kind(), HeatmapKind::Normalized);
        assert!(probs.values().iter().all(|&p| (p - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_shift_invariance() {
        let base = stack(2, 5, 3, |k, i, j| (k * 7 + i * 3 + j) as f64 * 0.37 - 2.0);
        let shifted = stack(2, 5, 3, |k, i, j| {
            (k * 7 + i * 3 + j) as f64 * 0.37 - 2.0 + if k == 0 { 11.0 } else { -4.5 }
        });
        let a = spatial_softmax(&base).unwrap();
        let b = spatial_softmax(&shifted).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn saturated_softmax() {
        let probs = spatial_softmax(&stack(1, 8, 8, |_, i, j| if (i, j) == (3, 5) { 50.0 } else { 0.0 })).unwrap();
        assert!(probs.channel(0)[3 * 8 + 5] >= 1.0 - 1e-6);
    }

    #[test]
    fn softmax_rejects_non_finite_and_names_channel() {
        let bad = stack(3, 2, 2, |k, i, _| if k == 2 && i == 1 { f64::NAN } else { 0.0 });
        match spatial_softmax(&bad) {
            Err(Error::NonFiniteChannel { channel }) => assert_eq!(channel, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn soft_argmax_cases() {
        let uniform = spatial_softmax(&stack(1, 6, 6, |_, _, _| 0.0)).unwrap();
        let kp = soft_argmax(&uniform).unwrap().get(0);
        assert!((kp[0] - 0.5).abs() < 1e-12 && (kp[1] - 0.5).abs() < 1e-12);

        let one_hot = HeatmapStack::normalized(1, 4, 8, {
            let mut v = vec![0.0; 32];
            v[2 * 8 + 5] = 1.0;
            v
        })
        .unwrap();
        assert_eq!(soft_argmax(&one_hot).unwrap().get(0), [5.5 / 8.0, 2.5 / 4.0]);

        assert!(matches!(
            soft_argmax(&stack(1, 2, 2, |_, _, _| 0.25)),
            Err(Error::NotNormalized)
        ));
    }

    #[test]
    fn symmetric_peaks_give_midpoint() {
        // A 1×2 grid has its cell centers exactly at (0.25, 0.5) and (0.75, 0.5).
        let hm = HeatmapStack::normalized(1, 1, 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(soft_argmax(&hm).unwrap().get(0), [0.5, 0.5]);
    }

    #[test]
    fn gaussian_values() {
        let sigma = 0.05;
        let kps = KeypointSet::new(vec![[cell_center(3, 10), cell_center(6, 10)]]).unwrap();
        let g = render_gaussian(&kps, sigma, 10, 10).unwrap();
        let peak = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt();
        assert!((g.maps().channel(0)[6 * 10 + 3] - peak).abs() < 1e-12);

        // A cell exactly σ away: put σ equal to one cell spacing.
        let sigma = 0.1;
        let g = render_gaussian(&kps, sigma, 10, 10).unwrap();
        let peak = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt();
        let one_away = g.maps().channel(0)[6 * 10 + 4];
        assert!((one_away - peak * (-0.5f64).exp()).abs() < 1e-12);
        assert!(g.maps().values().iter().all(|&b| b > 0.0));

        assert!(render_gaussian(&kps, 0.0, 4, 4).is_err());
        assert!(render_gaussian(&kps, -1.0, 4, 4).is_err());
    }

    #[test]
    fn gaussian_log_maps_match_log_of_maps() {
        let kps = KeypointSet::new(vec![[0.3, 0.6], [0.9, 0.1]]).unwrap();
        let g = render_gaussian(&kps, 0.2, 7, 5).unwrap();
        for (b, l) in g.maps().values().iter().zip(g.log_maps().values()) {
            assert!((b.ln() - l).abs() < 1e-12);
        }
    }

    #[test]
    fn flip_cases() {
        let kps = KeypointSet::new(vec![[0.5, 0.3], [0.2, 0.7]]).unwrap();
        let flipped = flip_keypoints(&kps);
        assert_eq!(flipped.get(0), [0.5, 0.3]);
        assert!((flipped.get(1)[0] - 0.8).abs() < 1e-15);
        assert_eq!(flipped.get(1)[1], 0.7);
        for (a, b) in flip_keypoints(&flipped).coords().iter().zip(kps.coords()) {
            assert!((a[0] - b[0]).abs() < 1e-15 && a[1] == b[1]);
        }
    }

    #[test]
    fn tps_zero_scale_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let warp = make_tps(5, 0.0, &mut rng, 16, 16).unwrap();
        assert!(warp.max_displacement() < 1e-6);
    }

    #[test]
    fn tps_translation_is_constant_field() {
        let src = control_grid(4);
        let dst = src.iter().map(|&[u, v]| [u + 0.03, v - 0.02]).collect();
        let warp = TpsWarp::from_control_points(src, dst, 9, 7).unwrap();
        for d in warp.field() {
            assert!((d[0] - 0.03).abs() < 1e-9 && (d[1] + 0.02).abs() < 1e-9);
        }
    }

    #[test]
    fn tps_rejects_bad_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(make_tps(1, 0.0, &mut rng, 4, 4).is_err());
        assert!(make_tps(5, 0.2, &mut rng, 4, 4).is_err());
        let collinear: Vec<[f64; 2]> = (0..4).map(|i| [i as f64 / 3.0, 0.5]).collect();
        let err = TpsWarp::from_control_points(collinear.clone(), collinear, 4, 4);
        assert!(matches!(err, Err(Error::Singular(_))));
    }

    #[test]
    fn inverse_point_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let warp = make_tps(5, 0.05, &mut rng, 8, 8).unwrap();
        for q in [[0.3, 0.4], [0.7, 0.2], [0.5, 0.5]] {
            let x = warp.inverse_point(q);
            let t = warp.map_point(x);
            assert!((t[0] - q[0]).abs() < 1e-10 && (t[1] - q[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn apply_warp_identity_and_shape_check() {
        let data: Vec<f32> = (0..3 * 6 * 6).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        let img = Image::from_data(6, 6, data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let identity = make_tps(3, 0.0, &mut rng, 6, 6).unwrap();
        let out = apply_warp(&img, &identity).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let wrong = make_tps(3, 0.0, &mut rng, 5, 6).unwrap();
        assert!(matches!(apply_warp(&img, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn apply_warp_translates_by_one_pixel() {
        let (w, h) = (10, 8);
        let data: Vec<f32> = (0..3 * w * h).map(|i| ((i * 13) % 29) as f32 / 28.0).collect();
        let img = Image::from_data(w, h, data).unwrap();
        let src = control_grid(3);
        let dst = src.iter().map(|&[u, v]| [u + 1.0 / w as f64, v]).collect();
        let warp = TpsWarp::from_control_points(src, dst, h, w).unwrap();
        let out = apply_warp(&img, &warp).unwrap();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w - 1 {
                    assert!((out.get(c, x, y) - img.get(c, x + 1, y)).abs() < 1e-5);
                }
            }
        }
    }
}
