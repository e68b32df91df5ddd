use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wskd::data::Annotation;
use wskd::evaluation::{
    dump_visuals, fit_probe, normalized_error, pck, posture_classifier, render_with, BboxNorm, Manipulation,
    PostureConfig, VisualMode,
};
use wskd::geometry::{flip_keypoints, KeypointSet};
use wskd::networks::Model;
use wskd::raster::Image;
use wskd::toy::{render_creature, ToyParams};
use wskd::training::TrainConfig;

fn random_sets(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<KeypointSet> {
    (0..n)
        .map(|_| KeypointSet::new((0..k).map(|_| [rng.random(), rng.random()]).collect()).unwrap())
        .collect()
}

fn mean_error(probe: &wskd::evaluation::RegressorProbe, sets: &[KeypointSet], gt: &[Vec<[f64; 2]>]) -> f64 {
    sets.iter()
        .zip(gt)
        .map(|(s, g)| normalized_error(&probe.predict(s).unwrap(), g, 1.0).unwrap())
        .sum::<f64>()
        / sets.len() as f64
}

/// Affine map of every point: `A p + b`.
fn affine(sets: &[KeypointSet], a: [[f64; 2]; 2], b: [f64; 2]) -> Vec<Vec<[f64; 2]>> {
    sets.iter()
        .map(|s| {
            s.coords()
                .iter()
                .map(|p| [a[0][0] * p[0] + a[0][1] * p[1] + b[0], a[1][0] * p[0] + a[1][1] * p[1] + b[1]])
                .collect()
        })
        .collect()
}

#[test]
fn probe_reproduces_identity_and_affine_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (train, test) = (random_sets(&mut rng, 60, 4), random_sets(&mut rng, 20, 4));
    let plain = |s: &[KeypointSet]| s.iter().map(|k| k.coords().to_vec()).collect::<Vec<_>>();
    let probe = fit_probe(&train, &plain(&train)).unwrap();
    assert!(!probe.ridge_fallback);
    assert!(mean_error(&probe, &test, &plain(&test)) < 1e-8);
    let (a, b) = ([[0.8, -0.3], [0.2, 1.1]], [0.05, -0.2]);
    let probe = fit_probe(&train, &affine(&train, a, b)).unwrap();
    assert!(mean_error(&probe, &test, &affine(&test, a, b)) < 1e-8);
}

/// Normal equations accumulated and solved without a matrix library.
fn oracle_least_squares(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let d = x[0].len();
    let mut a = vec![vec![0.0; d + 1]; d];
    for (row, &t) in x.iter().zip(y) {
        for i in 0..d {
            for j in 0..d {
                a[i][j] += row[i] * row[j];
            }
            a[i][d] += row[i] * t;
        }
    }
    for c in 0..d {
        let p = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        for r in 0..d {
            if r != c {
                let f = a[r][c] / a[c][c];
                for j in c..=d {
                    a[r][j] -= f * a[c][j];
                }
            }
        }
    }
    (0..d).map(|i| a[i][d] / a[i][i]).collect()
}

#[test]
fn probe_recovers_a_noisy_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (k, m, n) = (3, 2, 200);
    let truth: Vec<Vec<f64>> = (0..2 * m).map(|_| (0..=2 * k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let noise = Normal::new(0.0, 0.01).unwrap();
    let sets = random_sets(&mut rng, n, k);
    let rows: Vec<Vec<f64>> = sets
        .iter()
        .map(|s| {
            let mut r = s.flatten();
            r.push(1.0);
            r
        })
        .collect();
    let targets: Vec<Vec<[f64; 2]>> = rows
        .iter()
        .map(|r| {
            (0..m)
                .map(|p| {
                    let mut f = |o: usize| truth[o].iter().zip(r).map(|(w, x)| w * x).sum::<f64>() + noise.sample(&mut rng);
                    [f(2 * p), f(2 * p + 1)]
                })
                .collect()
        })
        .collect();
    let probe = fit_probe(&sets, &targets).unwrap();
    for out in 0..2 * m {
        let y: Vec<f64> = targets.iter().map(|t| t[out / 2][out % 2]).collect();
        let oracle = oracle_least_squares(&rows, &y);
        for (i, w) in oracle.iter().enumerate() {
            assert!((probe.weights[(i, out)] - w).abs() < 1e-8, "weight ({i}, {out})");
            // 200 samples of σ = 0.01 noise pin each coefficient well below 0.05.
            assert!((w - truth[out][i]).abs() < 0.05, "coefficient ({i}, {out}) = {w} vs {}", truth[out][i]);
        }
    }
}

#[test]
fn probe_error_is_invariant_to_affine_recoordinatization() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (train, test) = (random_sets(&mut rng, 80, 3), random_sets(&mut rng, 30, 3));
    let gt = |s: &[KeypointSet]| -> Vec<Vec<[f64; 2]>> {
        s.iter()
            .map(|k| k.coords().iter().map(|p| [p[0] * p[1], (p[0] + 0.3).sin()]).take(2).collect())
            .collect()
    };
    let base = mean_error(&fit_probe(&train, &gt(&train)).unwrap(), &test, &gt(&test));
    let (a, b) = ([[1.7, 0.4], [-0.6, 0.9]], [3.0, -1.5]);
    let moved = |s: &[KeypointSet]| -> Vec<KeypointSet> {
        affine(s, a, b).into_iter().map(|c| KeypointSet::new(c).unwrap()).collect()
    };
    let shifted = mean_error(&fit_probe(&moved(&train), &gt(&train)).unwrap(), &moved(&test), &gt(&test));
    assert!((base - shifted).abs() < 1e-6, "{base} vs {shifted}");
}

#[test]
fn probe_flags_rank_deficiency_and_small_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sets: Vec<KeypointSet> = random_sets(&mut rng, 30, 1)
        .into_iter()
        .map(|s| KeypointSet::new(vec![s.get(0), s.get(0)]).unwrap())
        .collect();
    let gt: Vec<Vec<[f64; 2]>> = sets.iter().map(|s| vec![s.get(0)]).collect();
    let probe = fit_probe(&sets, &gt).unwrap();
    assert!(probe.ridge_fallback);
    assert!(mean_error(&probe, &sets, &gt) < 1e-3);
    assert!(fit_probe(&sets[..4], &gt[..4]).is_err());
}

#[test]
fn normalized_error_definition() {
    let gt = [[0.2, 0.3], [0.5, 0.5], [0.9, 0.1], [0.4, 0.8]];
    assert_eq!(normalized_error(&gt, &gt, 0.25).unwrap(), 0.0);
    let mut pred = gt;
    pred[2][1] += 0.25;
    assert!((normalized_error(&pred, &gt, 0.25).unwrap() - 100.0 / 4.0).abs() < 1e-9);
    assert!(normalized_error(&pred, &gt, 0.0).is_err());
    assert!(normalized_error(&pred[..3], &gt, 1.0).is_err());
}

fn ann(point: [f64; 2], visible: bool) -> Annotation {
    Annotation { point, visible }
}

#[test]
fn pck_threshold_and_visibility() {
    let bbox = [0.1, 0.1, 0.5, 0.4];
    let g = [0.5, 0.5];
    let at = |d: f64| pck(&[[0.5 + d * 0.5, 0.5]], &[ann(g, true)], bbox, 0.1, BboxNorm::Max).unwrap();
    assert_eq!(at(0.09).mean, Some(1.0));
    assert_eq!(at(0.11).mean, Some(0.0));

    let gts = [ann([0.2, 0.2], true), ann([0.4, 0.4], false), ann([0.6, 0.6], true)];
    let preds = [[0.2, 0.2], [0.9, 0.9], [0.9, 0.9]];
    let r = pck(&preds, &gts, bbox, 0.1, BboxNorm::Max).unwrap();
    assert_eq!((r.correct, r.visible), (1, 2));
    assert_eq!(r.mean, Some(0.5));
    assert_eq!(r.per_keypoint, vec![Some(1.0), None, Some(0.0)]);
    let exact = pck(&[[0.2, 0.2], [0.4, 0.4], [0.6, 0.6]], &gts, bbox, 0.1, BboxNorm::Max).unwrap();
    assert_eq!(exact.mean, Some(1.0));

    let none = pck(&[[0.0, 0.0]], &[ann([0.5, 0.5], false)], bbox, 0.1, BboxNorm::Max).unwrap();
    assert_eq!(none.mean, None);
    assert!(pck(&[[0.0, 0.0]], &[ann(g, true)], bbox, 0.0, BboxNorm::Max).is_err());
    // The diagonal normalizer is the longer one.
    assert!((BboxNorm::Diagonal.size(bbox) - (0.25f64 + 0.16).sqrt()).abs() < 1e-12);
}

proptest! {
    #[test]
    fn pck_never_increases_as_alpha_shrinks(
        pts in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, any::<bool>()), 1..10),
        alpha in 0.01..0.5f64,
        shrink in 0.1..1.0f64,
    ) {
        let pred: Vec<[f64; 2]> = pts.iter().map(|p| [p.0, p.1]).collect();
        let gt: Vec<Annotation> = pts.iter().map(|p| ann([p.2, p.3], p.4)).collect();
        let bbox = [0.0, 0.0, 0.6, 0.8];
        let wide = pck(&pred, &gt, bbox, alpha, BboxNorm::Max).unwrap();
        let narrow = pck(&pred, &gt, bbox, alpha * shrink, BboxNorm::Max).unwrap();
        prop_assert!(narrow.correct <= wide.correct);
        if let Some(m) = wide.mean {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }
}

fn toy_keypoints(seed: u64, n: usize) -> (Vec<KeypointSet>, Vec<usize>) {
    let params = ToyParams::default();
    (0..n as u64)
        .map(|i| {
            let c = render_creature(&params, seed, i);
            (KeypointSet::new(c.parts.to_vec()).unwrap(), c.facing.index())
        })
        .unzip()
}

#[test]
fn posture_from_ground_truth_toy_keypoints() {
    let (train, train_y) = toy_keypoints(31, 400);
    let (test, test_y) = toy_keypoints(32, 200);
    let r = posture_classifier(&train, &train_y, &test, &test_y, &PostureConfig::default()).unwrap();
    assert!(r.accuracy >= 0.9, "{}", r.accuracy);
    assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 200);
}

#[test]
fn posture_with_shuffled_labels_is_at_chance() {
    let (train, _) = toy_keypoints(33, 400);
    let (test, _) = toy_keypoints(34, 400);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let labels = |n: usize, rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(0..2)).collect::<Vec<usize>>();
    let (train_y, test_y) = (labels(400, &mut rng), labels(400, &mut rng));
    let r = posture_classifier(&train, &train_y, &test, &test_y, &PostureConfig::default()).unwrap();
    // Three binomial standard deviations around 0.5 for 400 trials.
    let sigma = (0.25f64 / 400.0).sqrt();
    assert!((r.accuracy - 0.5).abs() <= 3.0 * sigma, "{}", r.accuracy);
}

#[test]
fn posture_on_separable_features_and_translation() {
    let a = KeypointSet::new(vec![[0.1, 0.5], [0.3, 0.5], [0.2, 0.7]]).unwrap();
    let b = KeypointSet::new(vec![[0.3, 0.5], [0.1, 0.5], [0.2, 0.3]]).unwrap();
    let train: Vec<KeypointSet> = (0..40).map(|i| if i % 2 == 0 { a.clone() } else { b.clone() }).collect();
    let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
    let r = posture_classifier(&train, &labels, &train, &labels, &PostureConfig::default()).unwrap();
    assert_eq!(r.accuracy, 1.0);

    let (train, train_y) = toy_keypoints(35, 200);
    let (test, _) = toy_keypoints(36, 50);
    let (clf, _) = wskd::evaluation::PostureClassifier::train(&train, &train_y, &PostureConfig::default()).unwrap();
    let moved: Vec<KeypointSet> = test.iter().map(|s| s.map(|[u, v]| [u + 0.13, v - 0.07])).collect();
    assert_eq!(clf.predict(&test).unwrap(), clf.predict(&moved).unwrap());

    assert!(posture_classifier(&train, &vec![1; 200], &test, &vec![1; 50], &PostureConfig::default()).is_err());
}

#[test]
fn manipulations_and_visual_dumps() {
    let kps = KeypointSet::new(vec![[0.2, 0.3], [0.6, 0.4]]).unwrap();
    assert_eq!(Manipulation::Identity.apply(&kps), kps);
    assert_eq!(Manipulation::Flip.apply(&kps), flip_keypoints(&kps));
    assert_eq!(Manipulation::Scale(1.0).apply(&kps), kps);

    let model = Model::new(TrainConfig::preset("toy").unwrap().model_config(3), 2).unwrap();
    let images: Vec<Image> = (0..2).map(|i| render_creature(&ToyParams::default(), 8, i).image).collect();
    let k8 = model.predict_keypoints(&[&images[0]], 1).unwrap().remove(0);
    assert_eq!(
        render_with(&model, &images[0], &Manipulation::Identity.apply(&k8)).unwrap(),
        render_with(&model, &images[0], &k8).unwrap()
    );

    let dir = tempfile::tempdir().unwrap();
    let names = vec!["a".to_string(), "b".to_string()];
    for mode in [VisualMode::Keypoints, VisualMode::Reconstruction, VisualMode::Manipulation] {
        let files = dump_visuals(&model, &images, &names, mode, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert!(files.iter().all(|f| f.exists()));
    }
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 6);
}
