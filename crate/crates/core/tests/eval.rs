//! Probes, sparsity reports, feature-map export and Bayesian averaging.

use lwta_icp::data::ingest;
use lwta_icp::eval::{feature_map_export, linear_probe, probe_accuracy, sparsity_report, ProbeTarget};
use lwta_icp::gradcheck::random_tensor;
use lwta_icp::icp::Arch;
use lwta_icp::lwta::WinnerMode;
use lwta_icp::samplers::RngState;
use lwta_icp::tensor::Tensor;
use lwta_icp::train::{initialize, predict, prediction_rng, TrainConfig};
use lwta_icp::Error;

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut x = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        x[i * classes + l] = 1.0;
    }
    Tensor::new(&[labels.len(), classes], x).unwrap()
}

// ── Probes ─────────────────────────────────────────────────────────────────

#[test]
fn probe_on_one_hot_labels_is_perfect() {
    let tr: Vec<usize> = (0..200).map(|i| (i * 7) % 10).collect();
    let te: Vec<usize> = (0..50).map(|i| (i * 3) % 10).collect();
    assert_eq!(probe_accuracy(&one_hot(&tr, 10), &tr, &one_hot(&te, 10), &te, 10).unwrap(), 1.0);
}

#[test]
fn probe_on_pure_noise_is_at_chance() {
    let (n_tr, n_te) = (1000, 1000);
    let tr: Vec<usize> = (0..n_tr).map(|i| i % 2).collect();
    let te: Vec<usize> = (0..n_te).map(|i| i % 2).collect();
    let a = probe_accuracy(
        &random_tensor(&[n_tr, 8], -1.0, 1.0, 1),
        &tr,
        &random_tensor(&[n_te, 8], -1.0, 1.0, 2),
        &te,
        2,
    )
    .unwrap();
    let three_sigma = 3.0 * (0.25 / n_te as f64).sqrt();
    assert!((a - 0.5).abs() <= 0.05_f64.min(three_sigma), "accuracy {a}");
}

#[test]
fn probe_rejects_single_class() {
    let labels = vec![1; 10];
    let x = random_tensor(&[10, 3], -1.0, 1.0, 3);
    assert!(matches!(probe_accuracy(&x, &labels, &x, &labels, 2), Err(Error::Contract(_))));
}

#[test]
fn conv_probe_needs_a_conv_layer() {
    let data = ingest("blobs", 0, 0.2).unwrap();
    let ckpt = initialize(&TrainConfig::default(), &data).unwrap();
    let r = linear_probe(&ckpt.model, &data, ProbeTarget::Conv, 1, &mut RngState::seed(0));
    assert!(matches!(r, Err(Error::Config(_))));
}

// ── Sparsity ───────────────────────────────────────────────────────────────

#[test]
fn sparsity_report_is_exact_on_cnn() {
    let data = ingest("digits8x8", 0, 0.2).unwrap();
    let x = data.test.subset(&(0..100).collect::<Vec<_>>()).x;
    for u in [2, 4] {
        let cfg = TrainConfig { arch: Arch::CnnMini, competitors: u, ..TrainConfig::default() };
        let ckpt = initialize(&cfg, &data).unwrap();
        let rep = sparsity_report(&ckpt.model, &x, 2, &mut RngState::seed(1)).unwrap();
        assert_eq!(rep.layers.len(), 4);
        for l in &rep.layers {
            assert_eq!(l.min_active_fraction, 1.0 / u as f64);
            assert_eq!(l.max_active_fraction, 1.0 / u as f64);
            assert!(l.entropy.iter().all(|&h| h >= 0.0 && h <= (u as f64).ln() + 1e-12));
        }
    }
}

// ── Feature maps ───────────────────────────────────────────────────────────

#[test]
fn feature_maps_are_written_and_disjoint() {
    let data = ingest("digits8x8", 0, 0.2).unwrap();
    let cfg = TrainConfig { arch: Arch::CnnMini, ..TrainConfig::default() };
    let ckpt = initialize(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let img = data.test.x.select_rows(&[0]);
    let maps = feature_map_export(&ckpt.model, &img, 0, Some(dir.path()), &mut RngState::seed(2)).unwrap();
    assert_eq!(maps.overlap_count, 0);
    assert_eq!(maps.files.len(), maps.blocks * maps.competitors + 1);
    for f in &maps.files {
        let bytes = std::fs::read(f).unwrap();
        assert!(bytes.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(bytes.len(), 11 + 64);
    }
    assert!(feature_map_export(&ckpt.model, &img, 3, None, &mut RngState::seed(2)).is_err());
    assert!(feature_map_export(&ckpt.model, &img, 9, None, &mut RngState::seed(2)).is_err());
}

#[test]
fn relu_control_maps_overlap() {
    let data = ingest("digits8x8", 0, 0.2).unwrap();
    let cfg = TrainConfig { arch: Arch::CnnMini, winner: WinnerMode::Relu, ..TrainConfig::default() };
    let ckpt = initialize(&cfg, &data).unwrap();
    let maps = feature_map_export(&ckpt.model, &data.test.x.select_rows(&[0]), 0, None, &mut RngState::seed(3)).unwrap();
    assert!(maps.overlap_count > 0);
}

// ── Bayesian averaging ─────────────────────────────────────────────────────

/// Mean over inputs of the variance, across `reps` repeated predictions, of
/// the probability assigned to the true class.
fn prediction_variance(probs: &[Tensor], labels: &[usize]) -> f64 {
    let t = probs[0].shape()[1];
    let reps = probs.len() as f64;
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let v: Vec<f64> = probs.iter().map(|p| p.data()[i * t + l]).collect();
        let m = v.iter().sum::<f64>() / reps;
        total += v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (reps - 1.0);
    }
    total / labels.len() as f64
}

#[test]
fn averaging_reduces_prediction_variance() {
    let data = ingest("digits8x8", 0, 0.2).unwrap();
    let cfg = TrainConfig { arch: Arch::CnnMini, ..TrainConfig::default() };
    let ckpt = initialize(&cfg, &data).unwrap();
    let sub = data.test.subset(&(0..60).collect::<Vec<_>>());
    let mut rng = prediction_rng(0);
    let ones: Vec<Tensor> = (0..10).map(|_| predict(&ckpt.model, &sub.x, 1, &mut rng).unwrap()).collect();
    let fives: Vec<Tensor> = (0..10).map(|_| predict(&ckpt.model, &sub.x, 5, &mut rng).unwrap()).collect();
    let (v1, v5) = (prediction_variance(&ones, &sub.labels), prediction_variance(&fives, &sub.labels));
    assert!(v5 < v1, "{v5} >= {v1}");
    for p in &fives {
        assert!(p.rows().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-9));
    }
}
