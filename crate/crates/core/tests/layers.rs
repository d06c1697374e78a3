//! Competition semantics of dense and convolutional LWTA layers.

use lwta_icp::data::ingest;
use lwta_icp::eval::block_overlap;
use lwta_icp::gradcheck::random_tensor;
use lwta_icp::icp::{Arch, IcpModel, ModelSpec};
use lwta_icp::lwta::{DenseLwta, LayerOptions, LayerSample, Pass, SampleMode, WinnerMode};
use lwta_icp::samplers::{RngState, Temperature};
use lwta_icp::tensor::{ParamGroup, ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn spec(arch: Arch, competitors: usize, winner: WinnerMode) -> ModelSpec {
    let input_shape = match arch {
        Arch::MlpTiny => vec![2],
        Arch::CnnMini => vec![8, 8, 1],
    };
    ModelSpec {
        arch,
        input_shape,
        classes: 3,
        competitors,
        winner,
        gates: true,
        bias: false,
        zeta_dim: 4,
        y_dim: 4,
        aux_hidden: 8,
    }
}

fn tau() -> Temperature {
    Temperature::new(0.67).unwrap()
}

/// Per-sample slices of a layer tensor whose leading axis is the batch.
fn per_sample(t: &Tensor) -> std::slice::Chunks<'_, f64> {
    t.data().chunks(t.len() / t.shape()[0])
}

fn discrete_samples<'t>(model: &IcpModel, tape: &'t Tape, x: Tensor, seed: u64) -> Vec<LayerSample<'t>> {
    let pass = Pass::new(tape, &model.store, SampleMode::Discrete, tau());
    model.encode(&pass, tape.constant(x), &mut RngState::seed(seed)).unwrap().samples
}

// ── Sparsity ───────────────────────────────────────────────────────────────

#[test]
fn discrete_active_fraction_is_exactly_one_over_u() {
    for arch in [Arch::MlpTiny, Arch::CnnMini] {
        for u in [2usize, 4] {
            let model = IcpModel::new(spec(arch, u, WinnerMode::Stochastic), &mut RngState::seed(1)).unwrap();
            let mut shape = vec![100];
            shape.extend(&model.spec.input_shape);
            let tape = Tape::no_grad();
            let samples = discrete_samples(&model, &tape, random_tensor(&shape, -2.0, 2.0, 2), 3);
            assert!(!samples.is_empty());
            for s in &samples {
                let xi = s.xi.expect("competing layer").value();
                let out = s.output.value();
                for (row_xi, row_out) in per_sample(&xi).zip(per_sample(&out)) {
                    let active = row_xi.iter().filter(|&&v| v == 1.0).count();
                    assert!(row_xi.iter().all(|&v| v == 0.0 || v == 1.0));
                    assert_eq!(active as f64 / row_xi.len() as f64, 1.0 / u as f64, "{arch} U={u}");
                    // losers are silent
                    assert!(row_xi.iter().zip(row_out).all(|(&z, &o)| z == 1.0 || o == 0.0));
                }
            }
        }
    }
}

// ── Mutual exclusivity ─────────────────────────────────────────────────────

fn conv_outputs(model: &IcpModel, x: Tensor, seed: u64) -> Vec<(Tensor, usize, usize)> {
    let tape = Tape::no_grad();
    let samples = discrete_samples(model, &tape, x, seed);
    model
        .backbone_cores()
        .zip(samples)
        .filter(|(_, s)| s.output.shape().len() == 4)
        .map(|(c, s)| (s.output.value(), c.blocks, c.competitors))
        .collect()
}

fn overlap_total(out: &Tensor, blocks: usize, competitors: usize) -> usize {
    let (h, w, k) = (out.shape()[1], out.shape()[2], out.shape()[3]);
    per_sample(out)
        .map(|img| block_overlap(&Tensor::new(&[h, w, k], img.to_vec()).unwrap(), blocks, competitors).1)
        .sum()
}

#[test]
fn conv_block_supports_are_disjoint() {
    let data = ingest("digits8x8", 0, 0.2).unwrap();
    let x = data.train.subset(&(0..100).collect::<Vec<_>>()).x;
    for u in [2, 4] {
        let model = IcpModel::new(spec(Arch::CnnMini, u, WinnerMode::Stochastic), &mut RngState::seed(4)).unwrap();
        let outs = conv_outputs(&model, x.clone(), 5);
        assert_eq!(outs.len(), 3);
        for (out, b, c) in outs {
            assert_eq!(overlap_total(&out, b, c), 0);
        }
    }
}

#[test]
fn relu_control_has_overlapping_supports() {
    let data = ingest("digits8x8", 0, 0.2).unwrap();
    let x = data.train.subset(&(0..20).collect::<Vec<_>>()).x;
    let model = IcpModel::new(spec(Arch::CnnMini, 2, WinnerMode::Relu), &mut RngState::seed(4)).unwrap();
    let tape = Tape::no_grad();
    let samples = discrete_samples(&model, &tape, x.clone(), 5);
    assert!(samples.iter().all(|s| s.xi.is_none()));
    let (out, b, c) = &conv_outputs(&model, x, 5)[0];
    assert!(overlap_total(out, *b, *c) > 0);
}

// ── Winner modes ───────────────────────────────────────────────────────────

#[test]
fn max_mode_winners_are_exact_one_hot() {
    let model = IcpModel::new(spec(Arch::CnnMini, 4, WinnerMode::Max), &mut RngState::seed(6)).unwrap();
    let x = random_tensor(&[10, 8, 8, 1], -1.0, 1.0, 7);
    let tape = Tape::no_grad();
    let a = discrete_samples(&model, &tape, x.clone(), 1);
    let b = discrete_samples(&model, &tape, x, 2);
    for (sa, sb) in a.iter().zip(&b) {
        let xa = sa.xi.unwrap().value();
        // gates are still sampled, so only compare the winner structure
        for blk in xa.data().chunks(sa.competitors) {
            assert_eq!(blk.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(blk.iter().filter(|&&v| v == 0.0).count(), sa.competitors - 1);
        }
        assert_eq!(xa.shape(), sb.xi.unwrap().value().shape());
    }
}

#[test]
fn max_mode_without_gates_is_reproducible_across_seeds() {
    let mut s = spec(Arch::MlpTiny, 2, WinnerMode::Max);
    s.gates = false;
    let model = IcpModel::new(s, &mut RngState::seed(8)).unwrap();
    let x = random_tensor(&[50, 2], -2.0, 2.0, 9);
    let tape = Tape::no_grad();
    let a = discrete_samples(&model, &tape, x.clone(), 1);
    let b = discrete_samples(&model, &tape, x, 99);
    for (sa, sb) in a.iter().zip(&b) {
        assert_eq!(sa.xi.unwrap().value(), sb.xi.unwrap().value());
        assert_eq!(sa.output.value(), sb.output.value());
    }
}

#[test]
fn zero_input_gives_zero_maps() {
    let model = IcpModel::new(spec(Arch::CnnMini, 2, WinnerMode::Stochastic), &mut RngState::seed(10)).unwrap();
    for (out, _, _) in conv_outputs(&model, Tensor::zeros(&[3, 8, 8, 1]), 11) {
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn equal_responses_give_maximal_winner_entropy() {
    let mut store = ParamStore::new();
    let layer = DenseLwta::new(
        &mut store,
        "l",
        ParamGroup::Main,
        3,
        4,
        4,
        LayerOptions { use_gates: false, ..LayerOptions::default() },
        &mut RngState::seed(0),
    )
    .unwrap();
    store.set_value(layer.core.weight, Tensor::zeros(&[3, 16])).unwrap();
    let n = 5000;
    let tape = Tape::no_grad();
    let pass = Pass::new(&tape, &store, SampleMode::Discrete, tau());
    let x = tape.constant(random_tensor(&[n, 3], -1.0, 1.0, 12));
    let (_, s) = layer.forward(&pass, x, &mut RngState::seed(13)).unwrap();
    let probs = s.probs.unwrap().value();
    assert!(probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    let mut counts = [0usize; 4];
    for blk in s.xi.unwrap().value().data().chunks(4) {
        counts[blk.iter().position(|&v| v == 1.0).unwrap()] += 1;
    }
    let total = (n * 4) as f64;
    let h: f64 = counts.iter().map(|&c| c as f64 / total).map(|p| -p * p.ln()).sum();
    let ln_u = 4f64.ln();
    assert!((h - ln_u).abs() / ln_u < 0.01, "entropy {h}");
}

#[test]
fn relaxed_indicators_lie_on_the_simplex() {
    let model = IcpModel::new(spec(Arch::MlpTiny, 4, WinnerMode::Stochastic), &mut RngState::seed(14)).unwrap();
    let tape = Tape::new();
    let pass = Pass::new(&tape, &model.store, SampleMode::Relaxed, tau());
    let enc = model.encode(&pass, tape.constant(random_tensor(&[16, 2], -2.0, 2.0, 15)), &mut RngState::seed(16)).unwrap();
    for s in enc.samples {
        for blk in s.xi.unwrap().value().data().chunks(4) {
            assert!((blk.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(blk.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn relaxed_mode_on_no_grad_tape_is_contract_error() {
    let model = IcpModel::new(spec(Arch::MlpTiny, 2, WinnerMode::Stochastic), &mut RngState::seed(0)).unwrap();
    let tape = Tape::no_grad();
    let pass = Pass::new(&tape, &model.store, SampleMode::Relaxed, tau());
    assert!(model.encode(&pass, tape.constant(Tensor::zeros(&[2, 2])), &mut RngState::seed(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dense_winner_passes_its_linear_response(
        inputs in 1usize..6, blocks in 1usize..5, u in 2usize..5, batch in 1usize..10, seed in 0u64..500,
    ) {
        let mut store = ParamStore::new();
        let opts = LayerOptions { use_gates: false, ..LayerOptions::default() };
        let layer = DenseLwta::new(&mut store, "p", ParamGroup::Main, inputs, blocks, u, opts, &mut RngState::seed(seed)).unwrap();
        let x = random_tensor(&[batch, inputs], -2.0, 2.0, seed + 1);
        let tape = Tape::no_grad();
        let pass = Pass::new(&tape, &store, SampleMode::Discrete, tau());
        let xv = tape.constant(x);
        let h = xv.matmul(tape.constant(store.value(layer.core.weight).clone())).unwrap().value();
        let (y, s) = layer.forward(&pass, xv, &mut RngState::seed(seed + 2)).unwrap();
        let xi = s.xi.unwrap().value();
        let y = y.value();
        prop_assert_eq!(y.shape(), &[batch, blocks * u][..]);
        for ((&yv, &hv), &z) in y.data().iter().zip(h.data()).zip(xi.data()) {
            prop_assert_eq!(yv, hv * z);
        }
        for blk in xi.data().chunks(u) {
            prop_assert_eq!(blk.iter().sum::<f64>(), 1.0);
        }
    }
}
