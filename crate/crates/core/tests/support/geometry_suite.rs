//! Property checks on the geometric primitives. Each check returns a short
//! summary on success and a description of the first violation otherwise.

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wskd::geometry::{
    flip_keypoints, make_tps, render_gaussian, soft_argmax, soft_argmax_logits_vjp, spatial_softmax, HeatmapStack,
    KeypointSet, TpsWarp,
};
use wskd::tensor_ops;

pub type Check = Result<String, String>;

fn random_logits(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize, scale: f64) -> HeatmapStack {
    let values = (0..k * h * w).map(|_| rng.random_range(-scale..scale)).collect();
    HeatmapStack::logits(k, h, w, values).unwrap()
}

/// Every softmax channel is non-negative and sums to one within `tol`.
pub fn softmax_sums(trials: usize, tol: f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let (k, h, w) = (rng.random_range(1..=4), rng.random_range(1..=12), rng.random_range(1..=12));
        let logits = random_logits(&mut rng, k, h, w, 30.0);
        let p = spatial_softmax(&logits).map_err(|e| e.to_string())?;
        for c in 0..k {
            let ch = p.channel(c);
            if ch.iter().any(|&v| !(v >= 0.0)) {
                return Err(format!("trial {t}: negative probability"));
            }
            worst = worst.max((ch.iter().sum::<f64>() - 1.0).abs());
        }
        // The f32 tensor path obeys the same bound.
        let x = Tensor::from_vec(
            logits.values().iter().map(|&v| v as f32).collect::<Vec<_>>(),
            (1, k, h, w),
            &Device::Cpu,
        )
        .unwrap();
        let sums = tensor_ops::spatial_softmax(&x)
            .and_then(|p| Ok(p.sum((2, 3))?.flatten_all()?.to_vec1::<f32>()?))
            .map_err(|e| e.to_string())?;
        for s in sums {
            worst = worst.max((s as f64 - 1.0).abs());
        }
        if worst > tol {
            return Err(format!("trial {t}: sum deviates by {worst:e}"));
        }
    }
    Ok(format!("{trials} trials, max deviation {worst:.1e}"))
}

/// Soft-argmax of the mirrored maps equals the mirrored soft-argmax within half a cell.
pub fn soft_argmax_flip(trials: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let (k, h, w) = (rng.random_range(1..=4), rng.random_range(2..=16), rng.random_range(2..=16));
        let half = 0.5 / w as f64;
        let p = spatial_softmax(&random_logits(&mut rng, k, h, w, 5.0)).unwrap();
        let a = soft_argmax(&p.flip_horizontal()).unwrap();
        let b = flip_keypoints(&soft_argmax(&p).unwrap());
        let x = Tensor::from_vec(
            p.values().iter().map(|&v| v as f32).collect::<Vec<_>>(),
            (1, k, h, w),
            &Device::Cpu,
        )
        .unwrap();
        let c = tensor_ops::soft_argmax(&tensor_ops::flip_width(&x).unwrap())
            .and_then(|t| Ok(t.flatten_all()?.to_vec1::<f32>()?))
            .unwrap();
        for kk in 0..k {
            let (pa, pb) = (a.get(kk), b.get(kk));
            let du = (pa[0] - pb[0]).abs().max((c[2 * kk] as f64 - pb[0]).abs());
            let dv = (pa[1] - pb[1]).abs().max((c[2 * kk + 1] as f64 - pb[1]).abs());
            worst = worst.max(du / half).max(dv * h as f64 * 2.0);
            if du > half || dv > 0.5 / h as f64 {
                return Err(format!("trial {t}: flip mismatch ({du:e}, {dv:e}) on {h}x{w}"));
            }
        }
    }
    Ok(format!("{trials} trials, max error {worst:.1e} half-cells"))
}

/// Rendering a Gaussian, normalizing it and taking the soft-argmax returns the center.
pub fn gaussian_roundtrip(trials: usize, tol: f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let size = [32, 48, 64][t % 3];
        let sigma = rng.random_range(0.03..0.08);
        let p = [rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)];
        let g = render_gaussian(&KeypointSet::new(vec![p]).unwrap(), sigma, size, size).unwrap();
        let total: f64 = g.maps().values().iter().sum();
        let probs = g.maps().values().iter().map(|v| v / total).collect();
        let q = soft_argmax(&HeatmapStack::normalized(1, size, size, probs).unwrap())
            .unwrap()
            .get(0);
        let err = (q[0] - p[0]).abs().max((q[1] - p[1]).abs());
        worst = worst.max(err);
        if err >= tol {
            return Err(format!("trial {t}: center {p:?} recovered as {q:?}"));
        }
    }
    Ok(format!("{trials} trials, max error {worst:.1e}"))
}

/// Dense Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Independent thin-plate-spline evaluation from the textbook system.
fn reference_tps(warp: &TpsWarp, p: [f64; 2]) -> [f64; 2] {
    let src = warp.control_src();
    let dst = warp.control_dst();
    let n = src.len();
    let phi = |a: [f64; 2], b: [f64; 2]| {
        let r = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        if r == 0.0 {
            0.0
        } else {
            r * r * r.ln()
        }
    };
    let mut m = vec![vec![0.0; n + 3]; n + 3];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = phi(src[i], src[j]);
        }
        let row = [1.0, src[i][0], src[i][1]];
        for c in 0..3 {
            m[i][n + c] = row[c];
            m[n + c][i] = row[c];
        }
    }
    let mut out = [0.0; 2];
    for axis in 0..2 {
        let mut rhs = vec![0.0; n + 3];
        for i in 0..n {
            rhs[i] = dst[i][axis];
        }
        let sol = solve(m.clone(), rhs);
        let mut v = sol[n] + sol[n + 1] * p[0] + sol[n + 2] * p[1];
        for i in 0..n {
            v += sol[i] * phi(p, src[i]);
        }
        out[axis] = v;
    }
    out
}

/// Warps interpolate their control points, agree with an independent solve
/// and invert their own forward map.
pub fn tps_control_points(trials: usize, tol: f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let grid = rng.random_range(3..=5);
        let scale = rng.random_range(0.0..0.45 / (grid - 1) as f64);
        let warp = make_tps(grid, scale, &mut rng, 8, 8).map_err(|e| e.to_string())?;
        for (s, d) in warp.control_src().iter().zip(warp.control_dst()) {
            let m = warp.map_point(*s);
            let err = (m[0] - d[0]).abs().max((m[1] - d[1]).abs());
            worst = worst.max(err);
            if err >= tol {
                return Err(format!("trial {t}: control point {s:?} maps to {m:?}, expected {d:?}"));
            }
        }
        for _ in 0..5 {
            let p = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let (a, b) = (warp.map_point(p), reference_tps(&warp, p));
            if (a[0] - b[0]).abs().max((a[1] - b[1]).abs()) > 1e-8 {
                return Err(format!("trial {t}: T({p:?}) = {a:?}, reference {b:?}"));
            }
            let back = warp.inverse_point(a);
            if (back[0] - p[0]).abs().max((back[1] - p[1]).abs()) > 1e-8 {
                return Err(format!("trial {t}: inverse of T({p:?}) is {back:?}"));
            }
        }
    }
    Ok(format!("{trials} warps, max control error {worst:.1e}"))
}

fn objective(logits: &HeatmapStack, g: &[[f64; 2]]) -> f64 {
    let kps = soft_argmax(&spatial_softmax(logits).unwrap()).unwrap();
    kps.coords().iter().zip(g).map(|(p, g)| p[0] * g[0] + p[1] * g[1]).sum()
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

/// The analytic soft-argmax gradient matches central differences, and the
/// f32 autodiff path matches the analytic gradient.
pub fn finite_difference_gradient(trials: usize, tol: f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (k, h, w) = (3, 8, 8);
    let (mut worst_fd, mut worst_tensor) = (0.0f64, 0.0f64);
    for t in 0..trials {
        let logits = random_logits(&mut rng, k, h, w, 3.0);
        let g: Vec<[f64; 2]> = (0..k).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let analytic = soft_argmax_logits_vjp(&logits, &g).unwrap();
        let eps = 1e-6;
        let fd: Vec<f64> = (0..logits.values().len())
            .map(|i| {
                let mut plus = logits.values().to_vec();
                let mut minus = plus.clone();
                plus[i] += eps;
                minus[i] -= eps;
                let fp = objective(&HeatmapStack::logits(k, h, w, plus).unwrap(), &g);
                let fm = objective(&HeatmapStack::logits(k, h, w, minus).unwrap(), &g);
                (fp - fm) / (2.0 * eps)
            })
            .collect();
        let e = rel_error(&analytic, &fd);
        worst_fd = worst_fd.max(e);
        if e >= tol {
            return Err(format!("trial {t}: finite-difference relative error {e:e}"));
        }

        let x = Var::from_tensor(
            &Tensor::from_vec(
                logits.values().iter().map(|&v| v as f32).collect::<Vec<_>>(),
                (1, k, h, w),
                &Device::Cpu,
            )
            .unwrap(),
        )
        .unwrap();
        let gt = Tensor::from_vec(
            g.iter().flat_map(|p| [p[0] as f32, p[1] as f32]).collect::<Vec<_>>(),
            (1, k, 2),
            &Device::Cpu,
        )
        .unwrap();
        let out = tensor_ops::soft_argmax(&tensor_ops::spatial_softmax(x.as_tensor()).unwrap()).unwrap();
        let grads = (out * gt).unwrap().sum_all().unwrap().backward().unwrap();
        let auto: Vec<f64> = grads
            .get(x.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
            .into_iter()
            .map(f64::from)
            .collect();
        let e = rel_error(&auto, &analytic);
        worst_tensor = worst_tensor.max(e);
        // Single precision limits this comparison to about 1e-6.
        if e >= 1e-3 {
            return Err(format!("trial {t}: autodiff relative error {e:e}"));
        }
    }
    Ok(format!(
        "{trials} trials on {k}x{h}x{w}, max relative error {worst_fd:.1e} (autodiff {worst_tensor:.1e})"
    ))
}
