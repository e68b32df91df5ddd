//! Oracle checks on the loss terms. Each check returns a short summary on
//! success and a description of the first violation otherwise.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wskd::losses::{equivariance_loss, total_loss, total_loss_value, weak_loss, EquivarianceReduction, LossComponents, LossWeights};

pub type Check = Result<String, String>;

fn scalar(t: &Tensor) -> Result<f64, String> {
    t.to_dtype(DType::F64)
        .and_then(|t| t.to_scalar::<f64>())
        .map_err(|e| e.to_string())
}

fn kps(values: &[[f64; 2]], n: usize) -> Tensor {
    let k = values.len() / n;
    let flat: Vec<f64> = values.iter().flat_map(|p| [p[0], p[1]]).collect();
    Tensor::from_vec(flat, (n, k, 2), &Device::Cpu).unwrap()
}

/// Constant logit rows give a cross-entropy of `ln C` for every class count.
pub fn uniform_logits(tol: f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for c in 2..=12 {
        let b = rng.random_range(1..=8);
        let rows: Vec<f32> = (0..b).flat_map(|_| vec![rng.random_range(-5.0..5.0f32); c]).collect();
        let logits = Tensor::from_vec(rows, (b, c), &Device::Cpu).map_err(|e| e.to_string())?;
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let v = scalar(&weak_loss(&logits, &labels).map_err(|e| e.to_string())?)?;
        let err = (v - (c as f64).ln()).abs();
        if err > tol {
            return Err(format!("C = {c}: loss {v}, expected ln C = {}", (c as f64).ln()));
        }
        worst = worst.max(err);
    }
    Ok(format!("C = 2..12, max |L - ln C| = {worst:.2e}"))
}

/// One keypoint off by 0.1 along u: squared errors (0.01, 0) averaged over
/// the two coordinates give 0.005, in f64 and in f32.
pub fn equivariance_hand_case(tol: f64) -> Check {
    let oracle = ((0.6f64 - 0.5).powi(2) + 0.0) / 2.0;
    let v64 = scalar(
        &equivariance_loss(&kps(&[[0.6, 0.5]], 1), &kps(&[[0.5, 0.5]], 1), EquivarianceReduction::Squared)
            .map_err(|e| e.to_string())?,
    )?;
    let f32_kps = |p: [f64; 2]| kps(&[p], 1).to_dtype(DType::F32).unwrap();
    let v32 = scalar(
        &equivariance_loss(&f32_kps([0.1, 0.3]), &f32_kps([0.0, 0.3]), EquivarianceReduction::Squared)
            .map_err(|e| e.to_string())?,
    )?;
    for (name, v) in [("f64", v64), ("f32", v32)] {
        if (v - oracle).abs() > tol || (v - 0.005).abs() > tol {
            return Err(format!("{name}: {v}, oracle {oracle}"));
        }
    }
    Ok(format!("f64 {v64:.12}, f32 {v32:.12}, oracle {oracle}"))
}

fn components(p: f32, w: f32, v: f32) -> (LossComponents, [Var; 3]) {
    let vars = [p, w, v].map(|x| Var::from_tensor(&Tensor::new(x, &Device::Cpu).unwrap()).unwrap());
    let c = LossComponents {
        perceptual: Some(vars[0].as_tensor().clone()),
        weak: Some(vars[1].as_tensor().clone()),
        equivariance: Some(vars[2].as_tensor().clone()),
    };
    (c, vars)
}

/// The equivariance term contributes exactly when `epoch > n`; when inactive
/// the total is bit-identical to the total without the term and the term
/// receives no gradient.
pub fn total_loss_indicator() -> Check {
    let e = |r: wskd::Result<Tensor>| r.map_err(|e| e.to_string());
    let bits = |t: &Tensor| t.to_scalar::<f32>().map(f32::to_bits).map_err(|e| e.to_string());
    let w = LossWeights {
        perceptual: 0.7,
        weak: 1.3,
        equivariance: 5.0,
        curriculum_epoch: 10,
    };
    let (with_v, vars) = components(1.234_567, 0.987_654_3, 42.0);
    let (mut without_v, _) = components(1.234_567, 0.987_654_3, 0.0);
    without_v.equivariance = None;
    for epoch in [0, 1, 9, 10] {
        let a = e(total_loss(&with_v, &w, epoch))?;
        let b = e(total_loss(&without_v, &w, epoch))?;
        if bits(&a)? != bits(&b)? {
            return Err(format!("epoch {epoch}: inactive term changed the total"));
        }
        if a.backward().map_err(|e| e.to_string())?.get(vars[2].as_tensor()).is_some() {
            return Err(format!("epoch {epoch}: inactive term received a gradient"));
        }
    }
    for epoch in [11, 12, 50] {
        let a = e(total_loss(&with_v, &w, epoch))?;
        let expected = 0.7f32 * 1.234_567 + 1.3f32 * 0.987_654_3 + 5.0f32 * 42.0;
        let got = a.to_scalar::<f32>().map_err(|e| e.to_string())?;
        if (got - expected).abs() > 1e-4 {
            return Err(format!("epoch {epoch}: active total {got}, expected {expected}"));
        }
        if a.backward().map_err(|e| e.to_string())?.get(vars[2].as_tensor()).is_none() {
            return Err(format!("epoch {epoch}: active term received no gradient"));
        }
    }
    let plain = LossWeights::default();
    let (c, _) = components(2.0, 3.0, 4.0);
    let w3 = LossWeights { curriculum_epoch: 3, ..plain };
    let pairs = [
        (scalar(&e(total_loss(&c, &w3, 4))?)?, 9.0),
        (total_loss_value(2.0, 3.0, 4.0, &w3, 4), 9.0),
        (scalar(&e(total_loss(&c, &w3, 3))?)?, 5.0),
        (total_loss_value(2.0, 3.0, 4.0, &w3, 3), 5.0),
    ];
    if let Some((got, want)) = pairs.iter().find(|(g, w)| g != w) {
        return Err(format!("unit-weight total {got}, expected {want}"));
    }
    Ok("inactive epochs 0..=10 bit-identical, active from 11".into())
}
