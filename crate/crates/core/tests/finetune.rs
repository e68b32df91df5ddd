use candle_core::{Device, Tensor};
use proptest::prelude::*;
use wskd::checkpoint::Checkpoint;
use wskd::data::{load_manifest, Annotation, Dataset, Split};
use wskd::evaluation::{flip_consistency_error, probe_report, random_keypoints};
use wskd::geometry::{flip_keypoints, KeypointSet};
use wskd::networks::{Mode, Model};
use wskd::toy::{synth_toy_dataset, ToyParams, MANIFEST_FILE};
use wskd::training::{
    decode_heatmaps, finetune_keypoints, heatmap_regression_loss, nested_subset, regression_targets, FinetuneConfig, KeypointRegressor,
    TrainConfig,
};

fn toy_model(seed: u64) -> Model {
    Model::new(TrainConfig::preset("toy").unwrap().model_config(3), seed).unwrap()
}

fn ann(u: f64, v: f64, visible: bool) -> Annotation {
    Annotation { point: [u, v], visible }
}

proptest! {
    #[test]
    fn subsets_are_nested_and_sized(n in 1usize..400, a in 0.001f64..1.0, b in 0.001f64..1.0, seed in 0u64..50) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = nested_subset(n, lo, seed).unwrap();
        let large = nested_subset(n, hi, seed).unwrap();
        prop_assert_eq!(small.len(), (lo * n as f64).ceil() as usize);
        prop_assert!(small.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(small.iter().all(|i| large.binary_search(i).is_ok()));
        prop_assert!(large.iter().all(|&i| i < n));
    }
}

#[test]
fn subset_rejects_empty_fractions() {
    assert!(nested_subset(10, 0.0, 0).is_err());
    assert!(nested_subset(10, 1.5, 0).is_err());
    assert!(nested_subset(0, 0.5, 0).is_err());
    assert_eq!(nested_subset(10, 1.0, 3).unwrap(), (0..10).collect::<Vec<_>>());
    assert_ne!(nested_subset(100, 0.1, 1).unwrap(), nested_subset(100, 0.1, 2).unwrap());
}

#[test]
fn targets_peak_at_the_annotation_and_mask_invisible_parts() {
    let anns = [ann(0.3, 0.7, true), ann(0.5, 0.5, false)];
    let (maps, mask) = regression_targets(&[&anns[..]], 32, 0.04, &Device::Cpu).unwrap();
    assert_eq!(maps.dims(), &[1, 2, 32, 32]);
    assert_eq!(mask.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![1.0, 0.0]);
    let data = maps.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert!(data[1024..].iter().all(|&v| v == 0.0));
    // Cell (row 22, col 9) has center (9.5/32, 22.5/32), 0.003 from the annotation.
    let (best, _) = data[..1024].iter().enumerate().fold((0, 0.0f32), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
    assert_eq!((best / 32, best % 32), (22, 9));
    let du = 9.5 / 32.0 - 0.3;
    let dv = 22.5 / 32.0 - 0.7;
    let expected = (-(du * du + dv * dv) / (2.0 * 0.04f64 * 0.04)).exp();
    assert!((data[best] as f64 - expected).abs() < 1e-6);
}

#[test]
fn decoding_recovers_rendered_targets() {
    let points = [[0.21, 0.34], [0.5, 0.5], [0.83, 0.12], [0.05, 0.95]];
    let anns: Vec<Annotation> = points.iter().map(|p| ann(p[0], p[1], true)).collect();
    let (maps, _) = regression_targets(&[&anns[..]], 32, 0.04, &Device::Cpu).unwrap();
    let decoded = decode_heatmaps(&maps).unwrap();
    for (d, p) in decoded[0].iter().zip(points) {
        let err = ((d[0] - p[0]).powi(2) + (d[1] - p[1]).powi(2)).sqrt();
        assert!(err < 0.5 / 32.0, "decoded {d:?} for {p:?}");
    }
}

#[test]
fn decoding_falls_back_to_the_peak_cell() {
    let mut data = vec![-1f32; 16];
    data[6] = -0.5;
    let maps = Tensor::from_vec(data, (1, 1, 4, 4), &Device::Cpu).unwrap();
    assert_eq!(decode_heatmaps(&maps).unwrap()[0][0], [2.5 / 4.0, 1.5 / 4.0]);
}

#[test]
fn regression_loss_averages_over_visible_maps() {
    let pred = Tensor::from_vec(vec![1f32, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0], (1, 2, 2, 2), &Device::Cpu).unwrap();
    let target = pred.zeros_like().unwrap();
    let both = Tensor::from_vec(vec![1f32, 1.0], (1, 2, 1, 1), &Device::Cpu).unwrap();
    let first = Tensor::from_vec(vec![1f32, 0.0], (1, 2, 1, 1), &Device::Cpu).unwrap();
    let none = Tensor::zeros((1, 2, 1, 1), candle_core::DType::F32, &Device::Cpu).unwrap();
    let v = |m: &Tensor| heatmap_regression_loss(&pred, &target, m).unwrap().to_scalar::<f32>().unwrap();
    assert_eq!(v(&both), (4.0 + 16.0) / 2.0);
    assert_eq!(v(&first), 4.0);
    assert!(heatmap_regression_loss(&pred, &target, &none).is_err());
}

#[test]
fn fresh_regressor_predicts_empty_maps() {
    let reg = KeypointRegressor::new(toy_model(1), 6, 0).unwrap();
    assert_eq!(reg.parts(), 6);
    let x = Tensor::rand(0f32, 1.0, (2, 3, 64, 64), &Device::Cpu).unwrap();
    let maps = reg.heatmaps(&x, Mode::Eval).unwrap();
    assert_eq!(maps.dims()[..2], [2, 6]);
    let values = maps.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let first = values[0];
    assert!(values.iter().all(|&v| v == first), "a zero adapter outputs its bias everywhere");
}

#[test]
fn finetuning_runs_and_the_regressor_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let load = |sub: &str, n: usize, seed: u64, split: Split| {
        let d = dir.path().join(sub);
        synth_toy_dataset(&d, n, seed, split, &ToyParams::default()).unwrap();
        Dataset::load(&load_manifest(&d.join(MANIFEST_FILE)).unwrap(), 64, None).unwrap()
    };
    let train = load("train", 24, 1, Split::Train);
    let test = load("test", 8, 2, Split::Test);
    let cfg = FinetuneConfig {
        fraction: 0.5,
        epochs: 1,
        min_steps: 3,
        batch: 4,
        ..FinetuneConfig::default()
    };
    let (reg, report) = finetune_keypoints(toy_model(3), &train, &test, &cfg).unwrap();
    assert_eq!(report.labeled, 12);
    assert_eq!(report.steps, 3);
    assert!(report.final_loss.is_finite());
    let mean = report.pck.mean.unwrap();
    assert!((0.0..=1.0).contains(&mean));

    let mut ck = Checkpoint::new();
    reg.write_state(&mut ck).unwrap();
    let restored = KeypointRegressor::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
    let images: Vec<_> = test.samples.iter().map(|s| &s.image).collect();
    assert_eq!(reg.predict(&images).unwrap(), restored.predict(&images).unwrap());
}

#[test]
fn flip_consistency_of_an_equivariant_predictor_is_zero() {
    let sets = random_keypoints(5, 4, 9);
    let mirrored: Vec<KeypointSet> = sets.iter().map(flip_keypoints).collect();
    assert!(flip_consistency_error(&sets, &mirrored).unwrap() < 1e-12);
    // Ignoring the flip entirely gives |1 - 2u| per keypoint.
    let expected: f64 = sets.iter().flat_map(|s| s.coords().iter().map(|p| (1.0 - 2.0 * p[0]).abs())).sum::<f64>() / 20.0;
    assert!((flip_consistency_error(&sets, &sets).unwrap() - expected).abs() < 1e-12);
    assert!(flip_consistency_error(&sets, &sets[..4]).is_err());
}

#[test]
fn random_keypoints_are_seeded_and_in_range() {
    let a = random_keypoints(10, 8, 4);
    assert_eq!(a, random_keypoints(10, 8, 4));
    assert_ne!(a, random_keypoints(10, 8, 5));
    assert!(a.iter().all(|s| s.len() == 8 && s.coords().iter().all(|p| (0.0..1.0).contains(&p[0]) && (0.0..1.0).contains(&p[1]))));
}

#[test]
fn probe_report_separates_informative_from_random_keypoints() {
    let sets = random_keypoints(60, 4, 1);
    let gt: Vec<Vec<[f64; 2]>> = sets.iter().map(|s| s.coords()[..2].iter().map(|p| [0.5 * p[0] + 0.1, p[1]]).collect()).collect();
    let exact = probe_report(&sets[..40], &gt[..40], &sets[40..], &gt[40..]).unwrap();
    assert_eq!(exact.per_image.len(), 20);
    assert!(exact.mean_error < 1e-6, "{}", exact.mean_error);
    let noise = random_keypoints(60, 4, 2);
    let control = probe_report(&noise[..40], &gt[..40], &noise[40..], &gt[40..]).unwrap();
    assert!(control.mean_error > 5.0, "{}", control.mean_error);
}
