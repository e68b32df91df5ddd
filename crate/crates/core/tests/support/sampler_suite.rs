//! Agreement between the equivariance sampler and the straight-line oracle.
//! The including crate must declare the `oracles` module at its root.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wskd::geometry::{flip_keypoints, KeypointSet};
use wskd::sampler::{select, FacingPolicy, SamplerConfig};

use crate::oracles::oracle_sampler;

pub type Check = Result<String, String>;

pub fn sets(raw: &[Vec<[f64; 2]>]) -> Vec<KeypointSet> {
    raw.iter().map(|c| KeypointSet::new(c.clone()).unwrap()).collect()
}

pub fn cfg(n_s: usize, n_v: usize, weak_parts: usize, policy: FacingPolicy) -> SamplerConfig {
    SamplerConfig {
        n_s,
        n_v,
        weak_parts,
        policy,
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, b: usize, k: usize, quantized: bool) -> Vec<Vec<[f64; 2]>> {
    (0..b)
        .map(|_| {
            (0..k)
                .map(|_| {
                    let mut draw = || {
                        let x: f64 = rng.random();
                        // Coarse grids make ties in spread and score common.
                        if quantized {
                            (x * 4.0).floor() / 4.0 + 0.125
                        } else {
                            x
                        }
                    };
                    [draw(), draw()]
                })
                .collect()
        })
        .collect()
}

pub fn hand_built() -> Vec<Vec<[f64; 2]>> {
    vec![
        // Wide, facing right: discriminative parts lead on the right.
        vec![[0.85, 0.4], [0.75, 0.5], [0.2, 0.5], [0.3, 0.6]],
        // Collapsed.
        vec![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5]],
        // Wide, facing left.
        vec![[0.2, 0.4], [0.3, 0.5], [0.8, 0.5], [0.7, 0.6]],
        // Wide, facing right, slightly weaker lead.
        vec![[0.8, 0.4], [0.7, 0.5], [0.2, 0.5], [0.3, 0.6]],
    ]
}

fn compare(raw: &[Vec<[f64; 2]>], kw: usize, n_s: usize, n_v: usize, relative: bool) -> Result<Vec<usize>, String> {
    let policy = if relative { FacingPolicy::Relative } else { FacingPolicy::MeanU };
    let got = select(&sets(raw), &cfg(n_s, n_v, kw, policy)).map_err(|e| e.to_string())?;
    let (idx, labels) = oracle_sampler(raw, kw, n_s, n_v, relative);
    if got.indices != idx {
        return Err(format!("indices {:?}, oracle {:?}", got.indices, idx));
    }
    let got_labels: Vec<Vec<[f64; 2]>> = got.labels.iter().map(|l| l.coords().to_vec()).collect();
    if got_labels != labels {
        return Err("pseudo-labels differ from the oracle".into());
    }
    Ok(got.indices)
}

/// Exact agreement on `trials` random batches of size 1..=16 under both policies.
pub fn random_batches(trials: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..trials {
        let b = rng.random_range(1..=16);
        let k = rng.random_range(2..=8);
        let kw = rng.random_range(1..=k);
        let n_s = rng.random_range(1..=b);
        let n_v = rng.random_range(1..=n_s);
        let relative = rng.random_bool(0.5);
        let raw = random_batch(&mut rng, b, k, trial % 3 == 0);
        compare(&raw, kw, n_s, n_v, relative).map_err(|e| format!("trial {trial}: {e}"))?;
    }
    Ok(format!("{trials} batches identical"))
}

/// The hand-built batches: facing selection, no filtering and identical samples.
pub fn hand_cases() -> Check {
    let raw = hand_built();
    let picked = compare(&raw, 2, 3, 2, true)?;
    if picked != [0, 3] {
        return Err(format!("facing pair {picked:?}, expected [0, 3]"));
    }
    for relative in [true, false] {
        let mut all = compare(&raw, 2, 4, 4, relative)?;
        all.sort();
        if all != [0, 1, 2, 3] {
            return Err(format!("full selection {all:?}"));
        }
    }
    let one = vec![[0.1, 0.2], [0.6, 0.3], [0.9, 0.7]];
    let same = vec![one.clone(); 6];
    let picked = compare(&same, 1, 3, 2, true)?;
    let got = select(&sets(&same), &cfg(3, 2, 1, FacingPolicy::Relative)).map_err(|e| e.to_string())?;
    let expect = flip_keypoints(&KeypointSet::new(one).unwrap());
    if picked != [0, 1] || got.labels.iter().any(|l| *l != expect) {
        return Err(format!("identical samples: picked {picked:?}"));
    }
    Ok("facing pair, full selection and identical-sample cases identical".into())
}
