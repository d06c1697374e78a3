//! Central finite-difference verification of reverse-mode gradients.
//!
//! Stochastic expressions are checked with frozen noise: every evaluation
//! reseeds its rng, so both sides of a difference see the same draws.

use crate::bayes::{kl_bernoulli, kl_categorical_mc, kl_kumaraswamy_beta, stick_breaking_pi};
use crate::error::{Error, Result};
use crate::icp::{
    inference_loss, mi_max_js, mi_min_bound, predictability_min, standardize, Arch, IcpModel, ModelSpec,
};
use crate::lwta::{ConvLwta, DenseLwta, LayerOptions, Pass, SampleMode, WinnerMode};
use crate::samplers::{sample_concrete_bernoulli, sample_concrete_categorical, RngState, Temperature};
use crate::tensor::{ParamGroup, ParamStore, Tape, Tensor, Var};
use crate::train::{step_losses, TrainConfig};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error; together with [`GRAD_TOL`] it
/// acts as an absolute tolerance of 1e-7 near zero.
pub const REL_FLOOR: f64 = 1e-3;
/// Coordinates checked per tensor in the large composites.
const COMPOSITE_LIMIT: usize = 24;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Non-finite values seen in forward or backward.
    pub nonfinite: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.nonfinite == 0 && self.max_rel_err <= GRAD_TOL
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&CheckResult> {
        self.results.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn worst_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |r| r.max_rel_err)
    }

    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .results
            .iter()
            .map(|r| format!("gradcheck.{}={:e} checked={} nonfinite={}", r.name, r.max_rel_err, r.checked, r.nonfinite))
            .collect();
        out.push(format!("gradcheck_checks={}", self.results.len()));
        out.push(format!("gradcheck_worst_rel_err={:e}", self.worst_rel_err()));
        if let Some(w) = self.worst() {
            out.push(format!("gradcheck_worst_check={}", w.name));
        }
        out.push(format!("gradcheck_passed={}", self.passed()));
        out
    }
}

// ── Drivers ────────────────────────────────────────────────────────────────

/// Reduces a non-scalar output against fixed weights in `[-1, 1]` so every
/// output coordinate contributes to the checked gradient.
fn scalarize<'t>(out: Var<'t>) -> Result<Var<'t>> {
    if out.numel() == 1 {
        return out.reshape(&[]);
    }
    let shape = out.shape();
    let w: Vec<f64> = RngState::seed(0x5eed).uniforms(out.numel()).iter().map(|u| 2.0 * u - 1.0).collect();
    Ok(out.mul(out.tape.constant(Tensor::new(&shape, w)?))?.sum())
}

/// Evenly spaced coordinates, at most `limit` of them.
fn coords(len: usize, limit: usize) -> Vec<usize> {
    if len <= limit {
        (0..len).collect()
    } else {
        (0..limit).map(|i| i * len / limit).collect()
    }
}

/// Checks the gradient of `f` with respect to each of its tensor inputs.
/// Detached values are held at the unperturbed point.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor], f: F) -> Result<CheckResult>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let loss = scalarize(f(&tape, &vars)?)?;
    let grads = tape.backward(loss, &mut ParamStore::new())?;
    let cut = tape.detached_values();
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new().replaying_detached(cut.clone());
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(scalarize(f(&tape, &vars)?)?.item())
    };
    let mut res = CheckResult { name: name.to_string(), max_rel_err: 0.0, checked: 0, nonfinite: tape.nonfinite_count() };
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for k in 0..inputs[i].len() {
            let x0 = inputs[i].data()[k];
            xs[i].data_mut()[k] = x0 + FD_STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[k] = x0 - FD_STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[k] = x0;
            record(&mut res, analytic.data()[k], (up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(res)
}

/// Checks the gradient of `f` with respect to the parameters in `store`
/// (only those of `group` when given), sampling at most `limit` coordinates
/// per tensor.
pub fn check_params<F>(
    name: &str,
    store: &ParamStore,
    group: Option<ParamGroup>,
    limit: usize,
    f: F,
) -> Result<CheckResult>
where
    F: for<'t, 's> Fn(&'t Tape, &'s ParamStore) -> Result<Var<'t>>,
{
    let mut work = store.clone();
    work.zero_grad();
    let tape = Tape::new();
    let loss = scalarize(f(&tape, &work)?)?;
    let mut grads_store = work.clone();
    tape.backward(loss, &mut grads_store)?;
    let mut res = CheckResult { name: name.to_string(), max_rel_err: 0.0, checked: 0, nonfinite: tape.nonfinite_count() };
    let cut = tape.detached_values();
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new().replaying_detached(cut.clone());
        Ok(scalarize(f(&tape, s)?)?.item())
    };
    for id in store.ids().filter(|&id| group.is_none_or(|g| store.group(id) == g)) {
        for k in coords(store.value(id).len(), limit) {
            let x0 = store.value(id).data()[k];
            work.value_mut(id).data_mut()[k] = x0 + FD_STEP;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[k] = x0 - FD_STEP;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[k] = x0;
            record(&mut res, grads_store.grad(id).data()[k], (up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(res)
}

fn record(res: &mut CheckResult, analytic: f64, numeric: f64) {
    if !analytic.is_finite() || !numeric.is_finite() {
        res.nonfinite += 1;
        return;
    }
    res.max_rel_err = res.max_rel_err.max(rel_err(analytic, numeric));
    res.checked += 1;
}

// ── Inputs ─────────────────────────────────────────────────────────────────

/// Uniform entries in `[lo, hi]`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let n = shape.iter().product();
    let data = RngState::seed(seed).uniforms(n).iter().map(|u| lo + (hi - lo) * u).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Entries in `[-2, 2]` with `|x| >= margin`, for ops with a kink at zero.
fn away_from_zero(shape: &[usize], margin: f64, seed: u64) -> Tensor {
    random_tensor(shape, -2.0, 2.0, seed).map(|v| v.signum() * (margin + (2.0 - margin) * v.abs() / 2.0))
}

fn tau() -> Temperature {
    Temperature::new(0.67).expect("valid")
}

fn mlp_spec() -> ModelSpec {
    ModelSpec {
        arch: Arch::MlpTiny,
        input_shape: vec![3],
        classes: 3,
        competitors: 2,
        winner: WinnerMode::Stochastic,
        gates: true,
        bias: true,
        zeta_dim: 2,
        y_dim: 2,
        aux_hidden: 4,
    }
}

// ── Suite ──────────────────────────────────────────────────────────────────

/// Primitive operations, each checked on random inputs.
pub fn primitive_checks() -> Result<Vec<CheckResult>> {
    let r = |shape: &[usize], seed| random_tensor(shape, -2.0, 2.0, seed);
    let pos = |shape: &[usize], seed| random_tensor(shape, 0.3, 2.0, seed);
    let denom = away_from_zero(&[4], 0.5, 3);
    let mut out = vec![
        check_inputs("add", &[r(&[3, 4], 1), r(&[4], 2)], |_, v| v[0].add(v[1]))?,
        check_inputs("sub", &[r(&[3, 4], 1), r(&[3, 1], 2)], |_, v| v[0].sub(v[1]))?,
        check_inputs("mul", &[r(&[3, 4], 1), r(&[1, 4], 2)], |_, v| v[0].mul(v[1]))?,
        check_inputs("div", &[r(&[3, 4], 1), denom], |_, v| v[0].div(v[1]))?,
        check_inputs("neg", &[r(&[5], 4)], |_, v| Ok(v[0].neg()))?,
        check_inputs("exp", &[r(&[5], 5)], |_, v| Ok(v[0].exp()))?,
        check_inputs("ln", &[pos(&[5], 6)], |_, v| Ok(v[0].ln()))?,
        check_inputs("sigmoid", &[r(&[5], 7)], |_, v| Ok(v[0].sigmoid()))?,
        check_inputs("softplus", &[r(&[5], 8)], |_, v| Ok(v[0].softplus()))?,
        check_inputs("relu", &[away_from_zero(&[6], 0.1, 9)], |_, v| Ok(v[0].relu()))?,
        check_inputs("powf", &[pos(&[5], 10)], |_, v| Ok(v[0].powf(1.7)))?,
        check_inputs("powf_sqrt", &[pos(&[5], 11)], |_, v| Ok(v[0].powf(0.5)))?,
        check_inputs("square", &[r(&[5], 12)], |_, v| Ok(v[0].square()))?,
        check_inputs("add_scalar", &[r(&[5], 13)], |_, v| Ok(v[0].add_scalar(0.7)))?,
        check_inputs("scale", &[r(&[5], 14)], |_, v| Ok(v[0].scale(-1.3)))?,
        check_inputs(
            "clamp",
            &[Tensor::new(&[6], vec![-1.9, -1.2, -0.4, 0.3, 0.8, 1.6])?],
            |_, v| Ok(v[0].clamp(-1.0, 1.0)),
        )?,
        check_inputs("matmul", &[r(&[4, 5], 15), r(&[5, 2], 16)], |_, v| v[0].matmul(v[1]))?,
        check_inputs("conv2d", &[r(&[2, 5, 5, 2], 17), r(&[3, 3, 2, 3], 18)], |_, v| v[0].conv2d(v[1]))?,
        check_inputs("avg_pool2", &[r(&[2, 4, 4, 3], 19)], |_, v| v[0].avg_pool2())?,
        check_inputs("sum", &[r(&[3, 4], 20)], |_, v| Ok(v[0].sum()))?,
        check_inputs("mean", &[r(&[3, 4], 21)], |_, v| Ok(v[0].mean()))?,
        check_inputs("sum_axis0", &[r(&[3, 4], 22)], |_, v| v[0].sum_axis(0))?,
        check_inputs("sum_axis1", &[r(&[2, 3, 4], 23)], |_, v| v[0].sum_axis(1))?,
        check_inputs("mean_axis", &[r(&[3, 4], 24)], |_, v| v[0].mean_axis(1))?,
        check_inputs("reshape", &[r(&[3, 4], 25)], |_, v| v[0].reshape(&[2, 6]))?,
        check_inputs("broadcast_to", &[r(&[1, 4], 26)], |_, v| v[0].broadcast_to(&[3, 4]))?,
        check_inputs("concat0", &[r(&[2, 3], 27), r(&[1, 3], 28)], |_, v| Var::concat(&[v[0], v[1]], 0))?,
        check_inputs("concat1", &[r(&[2, 3], 29), r(&[2, 2], 30)], |_, v| Var::concat(&[v[0], v[1]], 1))?,
        check_inputs("slice", &[r(&[3, 5], 31)], |_, v| v[0].slice(1, 1, 3))?,
        check_inputs("gather_rows", &[r(&[4, 3], 32)], |_, v| v[0].gather_rows(&[2, 0, 2, 1]))?,
        check_inputs("permute_rows", &[r(&[4, 2], 33)], |_, v| v[0].permute_rows(&[2, 3, 1, 0]))?,
        check_inputs("softmax", &[r(&[5], 34)], |_, v| v[0].softmax(0))?,
        check_inputs("softmax_axis1", &[r(&[3, 4], 35)], |_, v| v[0].softmax(1))?,
        check_inputs("log_softmax", &[r(&[3, 4], 36)], |_, v| v[0].log_softmax(1))?,
        check_inputs("cumprod", &[random_tensor(&[2, 4], 0.2, 1.0, 37)], |_, v| v[0].cumprod())?,
    ];
    let noise = RngState::seed(38).uniforms(6);
    out.push(check_inputs("kumaraswamy", &[pos(&[6], 39), pos(&[6], 40)], move |_, v| {
        Var::kumaraswamy(v[0], v[1], noise.clone())
    })?);
    Ok(out)
}

/// Layer forwards, KL terms and objective terms with frozen noise.
pub fn composite_checks() -> Result<Vec<CheckResult>> {
    let r = |shape: &[usize], seed| random_tensor(shape, -2.0, 2.0, seed);
    let mut out = vec![
        check_inputs("sigmoid_affine", &[r(&[3, 4], 50), r(&[4, 2], 51), r(&[2], 52)], |_, v| {
            Ok(v[0].matmul(v[1])?.add(v[2])?.sigmoid())
        })?,
        check_inputs("three_layer_net", &[r(&[4, 3], 53), r(&[3, 5], 54), r(&[5, 4], 55), r(&[4, 2], 56)], |_, v| {
            let h1 = v[0].matmul(v[1])?.softplus();
            let h2 = h1.matmul(v[2])?.sigmoid();
            Ok(h2.matmul(v[3])?.log_softmax(1)?.sum())
        })?,
        check_inputs("concrete_categorical", &[r(&[3, 4], 57)], |_, v| {
            sample_concrete_categorical(v[0], tau(), &mut RngState::seed(58))
        })?,
        check_inputs("concrete_bernoulli", &[r(&[5], 59)], |_, v| {
            sample_concrete_bernoulli(v[0], tau(), &mut RngState::seed(60))
        })?,
        check_inputs("kl_categorical", &[r(&[3, 2, 3], 61), r(&[3, 2, 3], 62)], |_, v| {
            kl_categorical_mc(v[0].softmax(2)?, sample_concrete_categorical(v[1], tau(), &mut RngState::seed(63))?)
        })?,
        check_inputs("kl_bernoulli", &[r(&[4], 64), r(&[4], 65)], |_, v| {
            kl_bernoulli(v[0].sigmoid(), v[1].sigmoid())
        })?,
        check_inputs("stick_breaking", &[random_tensor(&[4], 0.2, 0.95, 66)], |_, v| stick_breaking_pi(v[0]))?,
        check_inputs("kl_kumaraswamy_beta", &[r(&[4], 67), r(&[4], 68), r(&[4], 69)], |_, v| {
            kl_kumaraswamy_beta(v[0].softplus(), v[1].softplus(), v[2].sigmoid(), 1.0)
        })?,
        check_inputs("mi_min_bound", &[r(&[3, 2], 70), r(&[3, 2], 71)], |_, v| mi_min_bound(v[0], v[1].softplus()))?,
        check_inputs("inference_loss", &[r(&[4, 3], 72)], |_, v| inference_loss(v[0], &[0, 2, 1, 2]))?,
        check_inputs("standardize", &[r(&[4, 3], 73)], |_, v| standardize(v[0]))?,
    ];

    let dense_opts = LayerOptions { winner: WinnerMode::Stochastic, use_gates: true, bias: true };
    let mut store = ParamStore::new();
    let dense = DenseLwta::new(&mut store, "d", ParamGroup::Main, 3, 2, 2, dense_opts, &mut RngState::seed(80))?;
    randomize(&mut store, 81);
    let x = r(&[4, 3], 82);
    out.push(check_params("dense_lwta_forward", &store, None, usize::MAX, |t, s| {
        let pass = Pass::new(t, s, SampleMode::Relaxed, tau());
        Ok(dense.forward(&pass, t.constant(x.clone()), &mut RngState::seed(83))?.0)
    })?);
    for (term, name) in [(0, "kl_xi_layer"), (1, "kl_z_layer"), (2, "kl_u_layer")] {
        out.push(check_params(name, &store, None, usize::MAX, |t, s| {
            let pass = Pass::new(t, s, SampleMode::Relaxed, tau());
            let (_, rec) = dense.forward(&pass, t.constant(x.clone()), &mut RngState::seed(84))?;
            let kl = dense.core.layer_kl(&rec, 1.0)?;
            Ok([kl.xi, kl.z, kl.u][term])
        })?);
    }
    let relu_opts = LayerOptions { winner: WinnerMode::Relu, ..dense_opts };
    let mut relu_store = ParamStore::new();
    let relu = DenseLwta::new(&mut relu_store, "r", ParamGroup::Main, 3, 2, 2, relu_opts, &mut RngState::seed(85))?;
    randomize(&mut relu_store, 86);
    out.push(check_params("dense_relu_control", &relu_store, None, usize::MAX, |t, s| {
        let pass = Pass::new(t, s, SampleMode::Relaxed, tau());
        Ok(relu.forward(&pass, t.constant(x.clone()), &mut RngState::seed(87))?.0)
    })?);

    let mut cstore = ParamStore::new();
    let conv = ConvLwta::new(&mut cstore, "c", ParamGroup::Main, 2, 3, 2, 2, dense_opts, &mut RngState::seed(90))?;
    randomize(&mut cstore, 91);
    let img = r(&[2, 4, 4, 2], 92);
    out.push(check_params("conv_lwta_forward", &cstore, None, usize::MAX, |t, s| {
        let pass = Pass::new(t, s, SampleMode::Relaxed, tau());
        Ok(conv.forward(&pass, t.constant(img.clone()), &mut RngState::seed(93))?.0)
    })?);
    out.push(check_params("conv_lwta_kl", &cstore, None, usize::MAX, |t, s| {
        let pass = Pass::new(t, s, SampleMode::Relaxed, tau());
        let (_, rec) = conv.forward(&pass, t.constant(img.clone()), &mut RngState::seed(94))?;
        conv.core.layer_kl(&rec, 1.0)?.total()
    })?);

    out.extend(objective_checks()?);
    Ok(out)
}

/// Replaces every parameter with uniform values in `[-1, 1]`; keeps gates
/// and sticks in a well-conditioned range.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = RngState::seed(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let (lo, hi) = if name.ends_with("util_logits") {
            (-1.0, 2.0)
        } else if name.ends_with("stick_a") || name.ends_with("stick_b") {
            (0.0, 1.5)
        } else {
            (-1.0, 1.0)
        };
        let v = store.value_mut(id);
        let u = rng.uniforms(v.len());
        v.data_mut().iter_mut().zip(u).for_each(|(d, u)| *d = lo + (hi - lo) * u);
    }
}

/// The JS, predictability and full objectives of a small model.
fn objective_checks() -> Result<Vec<CheckResult>> {
    let mut model = IcpModel::new(mlp_spec(), &mut RngState::seed(100))?;
    randomize(&mut model.store, 101);
    let x = random_tensor(&[4, 3], -2.0, 2.0, 102);
    let labels = [0, 1, 2, 1];
    let y_in = random_tensor(&[4, 2], -2.0, 2.0, 103);
    let f_in = random_tensor(&[4, 16], -2.0, 2.0, 104);
    let z_in = random_tensor(&[4, 2], -2.0, 2.0, 105);
    let mut out = Vec::new();
    out.push(check_params("js_loss_d", &model.store, Some(ParamGroup::Discriminator), usize::MAX, |t, s| {
        let pass = Pass::new(t, s, SampleMode::Relaxed, tau());
        Ok(mi_max_js(&model.disc, &pass, t.constant(y_in.clone()), t.constant(f_in.clone()), &mut RngState::seed(106))?
            .loss_d)
    })?);
    out.push(check_inputs("js_loss_gen", &[y_in.clone()], |t, v| {
        let pass = Pass::new(t, &model.store, SampleMode::Relaxed, tau()).frozen();
        Ok(mi_max_js(&model.disc, &pass, v[0], t.constant(f_in.clone()), &mut RngState::seed(107))?.loss_gen)
    })?);
    out.push(check_params("predictability_pred", &model.store, Some(ParamGroup::Predictor), usize::MAX, |t, s| {
        let pass = Pass::new(t, s, SampleMode::Relaxed, tau());
        let (z, y) = (t.constant(z_in.clone()), t.constant(y_in.clone()));
        Ok(predictability_min(&model.pred_y_from_zeta, &model.pred_zeta_from_y, &pass, z, y, &mut RngState::seed(108))?
            .loss_pred)
    })?);
    out.push(check_inputs("predictability_adv", &[z_in.clone(), y_in.clone()], |t, v| {
        let pass = Pass::new(t, &model.store, SampleMode::Relaxed, tau()).frozen();
        Ok(predictability_min(&model.pred_y_from_zeta, &model.pred_zeta_from_y, &pass, v[0], v[1], &mut RngState::seed(109))?
            .loss_adv)
    })?);
    let cfg = TrainConfig::default();
    for (which, name, group) in [
        (0, "icp_total", ParamGroup::Main),
        (1, "icp_loss_d", ParamGroup::Discriminator),
        (2, "icp_loss_pred", ParamGroup::Predictor),
    ] {
        out.push(check_params(name, &model.store, Some(group), COMPOSITE_LIMIT, |t, s| {
            let pass = Pass::new(t, s, SampleMode::Relaxed, tau());
            let l = step_losses(&model, &pass, &cfg, t.constant(x.clone()), &labels, 16, &mut RngState::seed(110))?;
            Ok([l.total, l.loss_d, l.loss_pred][which])
        })?);
    }
    Ok(out)
}

/// Every primitive and composite check.
pub fn run_suite() -> Result<GradcheckReport> {
    let mut results = primitive_checks()?;
    results.extend(composite_checks()?);
    if results.is_empty() {
        return Err(Error::contract("empty gradient suite"));
    }
    Ok(GradcheckReport { results })
}
