//! Independent reference implementations used only by tests.

#![allow(dead_code)]

/// Straight-line rendering of the equivariance sampler on raw coordinates.
///
/// Returns the selected batch indices and their mirrored keypoints. Selection
/// uses repeated arg-max scans instead of sorting; ties go to the lower index.
pub fn oracle_sampler(
    batch: &[Vec<[f64; 2]>],
    weak_parts: usize,
    n_s: usize,
    n_v: usize,
    relative: bool,
) -> (Vec<usize>, Vec<Vec<[f64; 2]>>) {
    assert!(batch.len() <= 64);
    // Step 1: x variance per sample.
    let mut spread = Vec::new();
    for kps in batch {
        let mut mean = 0.0;
        for p in kps {
            mean += p[0];
        }
        mean /= kps.len() as f64;
        let mut var = 0.0;
        for p in kps {
            var += (p[0] - mean) * (p[0] - mean);
        }
        spread.push(var / kps.len() as f64);
    }

    // Step 2: the n_s largest spreads.
    let mut taken = vec![false; batch.len()];
    let mut wide = Vec::new();
    for _ in 0..n_s {
        let mut best: Option<usize> = None;
        for i in 0..batch.len() {
            if taken[i] {
                continue;
            }
            match best {
                Some(b) if spread[i] <= spread[b] => {}
                _ => best = Some(i),
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        wide.push(b);
    }

    // Steps 3-4: facing score and majority direction.
    let mut score = vec![0.0; batch.len()];
    let mut positives = 0;
    for &i in &wide {
        let kps = &batch[i];
        let mut lead = 0.0;
        for p in &kps[..weak_parts] {
            lead += p[0];
        }
        lead /= weak_parts as f64;
        let reference = if relative {
            let mut all = 0.0;
            for p in kps {
                all += p[0];
            }
            all / kps.len() as f64
        } else {
            0.5
        };
        score[i] = lead - reference;
        if score[i] >= 0.0 {
            positives += 1;
        }
    }
    let sign = if 2 * positives >= wide.len() { 1.0 } else { -1.0 };

    let mut used = vec![false; batch.len()];
    let mut chosen = Vec::new();
    for _ in 0..n_v {
        let mut best: Option<usize> = None;
        for &i in &wide {
            if used[i] {
                continue;
            }
            match best {
                Some(b) if sign * score[i] < sign * score[b] => {}
                Some(b) if sign * score[i] == sign * score[b] && i > b => {}
                _ => best = Some(i),
            }
        }
        let b = best.unwrap();
        used[b] = true;
        chosen.push(b);
    }

    // Step 5: mirrored labels.
    let labels = chosen
        .iter()
        .map(|&i| batch[i].iter().map(|p| [1.0 - p[0], p[1]]).collect())
        .collect();
    (chosen, labels)
}
