//! Stochastic local winner-takes-all layers with IBP utility gates.
//!
//! A layer computes gated linear responses `h`, groups them into `B` blocks
//! of `U` competitors, samples one winner per block (per spatial position for
//! convolutions) and passes only the winner's response. Utility gates `z`
//! switch whole synapse groups (dense) or kernel blocks (conv) on and off and
//! are sampled once per batch.
//!
//! Noise is consumed in a fixed order per layer: gate noise, stick noise,
//! winner noise. Relaxed and discrete passes from the same rng state thus see
//! the same draws.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::bayes::{kl_bernoulli_elementwise, kl_categorical_mc, kl_kumaraswamy_beta, stick_breaking_pi, KlBreakdown};
use crate::error::{Error, Result};
use crate::samplers::{
    argmax_one_hot, sample_bernoulli_hard, sample_categorical_hard, sample_concrete_bernoulli,
    sample_concrete_categorical, sample_kumaraswamy, RngState, Temperature,
};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

/// Initial gate logit; `sigmoid(3) ≈ 0.95`.
pub const INIT_UTIL_LOGIT: f64 = 3.0;

/// How a block picks its winner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WinnerMode {
    /// Winner sampled from the softmax of the block responses.
    Stochastic,
    /// Deterministic argmax of the block responses.
    Max,
    /// No competition: plain ReLU on the responses (control condition).
    Relu,
}

impl std::str::FromStr for WinnerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(WinnerMode::Stochastic),
            "max" => Ok(WinnerMode::Max),
            "relu" => Ok(WinnerMode::Relu),
            _ => Err(Error::config(format!("unknown winner mode '{s}' (stochastic|max|relu)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Concrete relaxations; differentiable, needs a recording tape.
    Relaxed,
    /// Hard one-hot winners and binary gates.
    Discrete,
}

/// Everything a forward pass needs besides the input and the rng.
#[derive(Clone, Copy)]
pub struct Pass<'t, 's> {
    pub tape: &'t Tape,
    pub store: &'s ParamStore,
    pub mode: SampleMode,
    pub tau: Temperature,
    /// Parameters enter the graph as constants (no gradient).
    pub frozen: bool,
}

impl<'t, 's> Pass<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, mode: SampleMode, tau: Temperature) -> Self {
        Pass { tape, store, mode, tau, frozen: false }
    }

    pub fn frozen(self) -> Self {
        Pass { frozen: true, ..self }
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        if self.frozen {
            self.tape.constant(self.store.value(id).clone())
        } else {
            self.tape.param(self.store, id)
        }
    }

    fn check(&self) -> Result<()> {
        if self.mode == SampleMode::Relaxed && !self.tape.grad_enabled() {
            return Err(Error::contract("relaxed sampling requires a recording tape"));
        }
        Ok(())
    }
}

/// Construction options shared by dense and conv layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerOptions {
    pub winner: WinnerMode,
    pub use_gates: bool,
    pub bias: bool,
}

impl Default for LayerOptions {
    fn default() -> Self {
        LayerOptions { winner: WinnerMode::Stochastic, use_gates: true, bias: false }
    }
}

// ── Gates ──────────────────────────────────────────────────────────────────

/// IBP utility gates: Bernoulli logits per component and Kumaraswamy sticks per block.
#[derive(Clone, Debug, PartialEq)]
pub struct Gates {
    pub util_logits: ParamId,
    pub stick_a: ParamId,
    pub stick_b: ParamId,
    /// One flag per gate component, row-major over `util_logits`.
    pub pruned: Vec<bool>,
}

/// Sampled gate state of one forward pass.
#[derive(Clone, Copy)]
pub struct GateSample<'t> {
    /// Posterior inclusion probabilities `sigmoid(util_logits)`.
    pub q: Var<'t>,
    pub z: Var<'t>,
    pub a: Var<'t>,
    pub b: Var<'t>,
    /// Stick draws, one per block.
    pub u: Var<'t>,
    pub keep: Option<Var<'t>>,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl Gates {
    fn new(store: &mut ParamStore, name: &str, group: ParamGroup, shape: &[usize], blocks: usize) -> Self {
        let raw = inverse_softplus(1.0);
        let n = shape.iter().product();
        Gates {
            util_logits: store.add(format!("{name}.util_logits"), group, Tensor::full(shape, INIT_UTIL_LOGIT)),
            stick_a: store.add(format!("{name}.stick_a"), group, Tensor::full(&[blocks], raw)),
            stick_b: store.add(format!("{name}.stick_b"), group, Tensor::full(&[blocks], raw)),
            pruned: vec![false; n],
        }
    }

    fn keep_mask(&self, shape: &[usize]) -> Option<Tensor> {
        if !self.pruned.iter().any(|&p| p) {
            return None;
        }
        let data = self.pruned.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect();
        Some(Tensor::new(shape, data).expect("mask shape"))
    }

    fn sample<'t>(&self, pass: &Pass<'t, '_>, rng: &mut RngState) -> Result<GateSample<'t>> {
        let logits = pass.param(self.util_logits);
        let shape = logits.shape();
        let z = match pass.mode {
            SampleMode::Relaxed => sample_concrete_bernoulli(logits, pass.tau, rng)?,
            SampleMode::Discrete => pass.tape.constant(sample_bernoulli_hard(&logits.value(), rng)),
        };
        let keep = self.keep_mask(&shape).map(|m| pass.tape.constant(m));
        let z = match keep {
            Some(k) => z.mul(k)?,
            None => z,
        };
        let a = pass.param(self.stick_a).softplus();
        let b = pass.param(self.stick_b).softplus();
        let u = sample_kumaraswamy(a, b, rng)?;
        Ok(GateSample { q: logits.sigmoid(), z, a, b, u, keep })
    }

    pub fn components(&self) -> usize {
        self.pruned.len()
    }

    pub fn removed(&self) -> usize {
        self.pruned.iter().filter(|&&p| p).count()
    }

    /// Posterior inclusion probabilities.
    pub fn inclusion(&self, store: &ParamStore) -> Vec<f64> {
        store.value(self.util_logits).data().iter().map(|&l| crate::tensor::sigmoid(l)).collect()
    }
}

// ── Competition ────────────────────────────────────────────────────────────

struct Competition<'t> {
    y: Var<'t>,
    xi: Option<Var<'t>>,
    probs: Option<Var<'t>>,
}

fn compete<'t>(
    h: Var<'t>,
    blocks: usize,
    competitors: usize,
    winner: WinnerMode,
    pass: &Pass<'t, '_>,
    rng: &mut RngState,
) -> Result<Competition<'t>> {
    if winner == WinnerMode::Relu {
        return Ok(Competition { y: h.relu(), xi: None, probs: None });
    }
    if competitors == 1 {
        return Ok(Competition { y: h, xi: None, probs: None });
    }
    let shape = h.shape();
    let mut blocked = shape[..shape.len() - 1].to_vec();
    blocked.extend([blocks, competitors]);
    let hb = h.reshape(&blocked)?;
    let axis = blocked.len() - 1;
    let probs = hb.softmax(axis)?;
    let xi = match (winner, pass.mode) {
        (WinnerMode::Max, _) => pass.tape.constant(argmax_one_hot(&hb.value())?),
        (_, SampleMode::Relaxed) => sample_concrete_categorical(hb, pass.tau, rng)?,
        (_, SampleMode::Discrete) => pass.tape.constant(sample_categorical_hard(&hb.value(), rng)?),
    };
    let y = xi.mul(hb)?.reshape(&shape)?;
    Ok(Competition { y, xi: Some(xi), probs: Some(probs) })
}

// ── Sample record ──────────────────────────────────────────────────────────

/// Latent draws of one layer's forward pass.
#[derive(Clone, Copy)]
pub struct LayerSample<'t> {
    layer: u64,
    pub mode: SampleMode,
    pub competitors: usize,
    /// Winner indicators, shape `[.., B, U]`.
    pub xi: Option<Var<'t>>,
    /// Winner posterior masses, same shape as `xi`.
    pub probs: Option<Var<'t>>,
    pub gates: Option<GateSample<'t>>,
    pub output: Var<'t>,
}

/// KL terms of one layer as graph nodes.
#[derive(Clone, Copy)]
pub struct LayerKl<'t> {
    pub xi: Var<'t>,
    pub z: Var<'t>,
    pub u: Var<'t>,
}

impl<'t> LayerKl<'t> {
    pub fn total(&self) -> Result<Var<'t>> {
        self.xi.add(self.z)?.add(self.u)
    }

    pub fn breakdown(&self) -> KlBreakdown {
        KlBreakdown { kl_xi: self.xi.item(), kl_z: self.z.item(), kl_u: self.u.item() }
    }
}

/// State common to dense and conv layers.
#[derive(Clone, Debug)]
pub struct LwtaCore {
    uid: u64,
    pub name: String,
    pub blocks: usize,
    pub competitors: usize,
    pub winner: WinnerMode,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub gates: Option<Gates>,
}

/// Equality ignores the record-matching uid.
impl PartialEq for LwtaCore {
    fn eq(&self, o: &Self) -> bool {
        self.name == o.name
            && self.blocks == o.blocks
            && self.competitors == o.competitors
            && self.winner == o.winner
            && self.weight == o.weight
            && self.bias == o.bias
            && self.gates == o.gates
    }
}

impl LwtaCore {
    fn new(name: &str, blocks: usize, competitors: usize, winner: WinnerMode, weight: ParamId) -> Result<Self> {
        if blocks == 0 || competitors == 0 {
            return Err(Error::config(format!("layer {name}: blocks and competitors must be positive")));
        }
        Ok(LwtaCore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            name: name.to_string(),
            blocks,
            competitors,
            winner,
            weight,
            bias: None,
            gates: None,
        })
    }

    pub fn width(&self) -> usize {
        self.blocks * self.competitors
    }

    /// `KL[q(xi)||p(xi)] + KL[q(z)||p(z)] + KL[q(u)||p(u)]` for a record of this layer.
    pub fn layer_kl<'t>(&self, record: &LayerSample<'t>, omega: f64) -> Result<LayerKl<'t>> {
        if record.layer != self.uid {
            return Err(Error::contract(format!(
                "sample record does not belong to layer {}",
                self.name
            )));
        }
        let tape = record.output.tape;
        let xi = match (record.xi, record.probs) {
            (Some(s), Some(q)) if self.winner == WinnerMode::Stochastic => kl_categorical_mc(q, s)?,
            _ => tape.scalar(0.0),
        };
        let (z, u) = match &record.gates {
            Some(g) => {
                let pi = stick_breaking_pi(g.u)?;
                let kz = kl_bernoulli_elementwise(g.q, pi)?;
                let kz = match g.keep {
                    Some(k) => kz.mul(k)?,
                    None => kz,
                };
                (kz.sum(), kl_kumaraswamy_beta(g.a, g.b, g.u, omega)?)
            }
            None => (tape.scalar(0.0), tape.scalar(0.0)),
        };
        Ok(LayerKl { xi, z, u })
    }

    fn record<'t>(&self, pass: &Pass<'t, '_>, c: &Competition<'t>, gates: Option<GateSample<'t>>) -> LayerSample<'t> {
        LayerSample {
            layer: self.uid,
            mode: pass.mode,
            competitors: self.competitors,
            xi: c.xi,
            probs: c.probs,
            gates,
            output: c.y,
        }
    }
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut RngState) -> Tensor {
    let bound = (3.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| bound * (2.0 * rng.uniform() - 1.0)).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Zeroes every column group `b` (width `u`) of a row-major `[rows, B·U]` matrix
/// where `drop(row, b)` holds.
fn zero_groups(w: &mut Tensor, blocks: usize, u: usize, drop: impl Fn(usize, usize) -> bool) {
    let width = blocks * u;
    for (r, row) in w.data_mut().chunks_mut(width).enumerate() {
        for b in 0..blocks {
            if drop(r, b) {
                row[b * u..(b + 1) * u].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

// ── Dense layer ────────────────────────────────────────────────────────────

/// Fully connected LWTA layer: `[batch, J] → [batch, B·U]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLwta {
    pub core: LwtaCore,
    pub inputs: usize,
}

impl DenseLwta {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        inputs: usize,
        blocks: usize,
        competitors: usize,
        opts: LayerOptions,
        rng: &mut RngState,
    ) -> Result<Self> {
        let width = blocks * competitors;
        let w = store.add(format!("{name}.weight"), group, uniform_init(&[inputs, width], inputs, rng));
        let mut core = LwtaCore::new(name, blocks, competitors, opts.winner, w)?;
        if opts.bias {
            core.bias = Some(store.add(format!("{name}.bias"), group, Tensor::zeros(&[width])));
        }
        if opts.use_gates {
            core.gates = Some(Gates::new(store, name, group, &[inputs, blocks], blocks));
        }
        Ok(DenseLwta { core, inputs })
    }

    pub fn forward<'t>(&self, pass: &Pass<'t, '_>, x: Var<'t>, rng: &mut RngState) -> Result<(Var<'t>, LayerSample<'t>)> {
        pass.check()?;
        let c = &self.core;
        let w = pass.param(c.weight);
        let gates = c.gates.as_ref().map(|g| g.sample(pass, rng)).transpose()?;
        let w_eff = match &gates {
            Some(g) => {
                let wb = w.reshape(&[self.inputs, c.blocks, c.competitors])?;
                let zb = g.z.reshape(&[self.inputs, c.blocks, 1])?;
                wb.mul(zb)?.reshape(&[self.inputs, c.width()])?
            }
            None => w,
        };
        let mut h = x.matmul(w_eff)?;
        if let Some(b) = c.bias {
            h = h.add(pass.param(b))?;
        }
        let comp = compete(h, c.blocks, c.competitors, c.winner, pass, rng)?;
        Ok((comp.y, c.record(pass, &comp, gates)))
    }

    /// Marks gates with inclusion probability below `threshold` as pruned and
    /// zeroes their synapse groups. Returns the number newly removed.
    pub fn prune(&mut self, store: &mut ParamStore, threshold: f64) -> usize {
        let Some(g) = self.core.gates.as_mut() else { return 0 };
        let q = g.inclusion(store);
        let mut removed = 0;
        for (p, &qi) in g.pruned.iter_mut().zip(&q) {
            if !*p && qi < threshold {
                *p = true;
                removed += 1;
            }
        }
        let pruned = g.pruned.clone();
        let blocks = self.core.blocks;
        zero_groups(store.value_mut(self.core.weight), blocks, self.core.competitors, |j, b| {
            pruned[j * blocks + b]
        });
        removed
    }
}

// ── Convolutional layer ────────────────────────────────────────────────────

/// Same-padded convolutional LWTA layer: `[N, H, W, C] → [N, H, W, B·U]`,
/// with position-wise competition.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLwta {
    pub core: LwtaCore,
    pub kernel: usize,
    pub channels: usize,
}

impl ConvLwta {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        channels: usize,
        kernel: usize,
        blocks: usize,
        competitors: usize,
        opts: LayerOptions,
        rng: &mut RngState,
    ) -> Result<Self> {
        let width = blocks * competitors;
        let fan_in = kernel * kernel * channels;
        let w = store.add(
            format!("{name}.weight"),
            group,
            uniform_init(&[kernel, kernel, channels, width], fan_in, rng),
        );
        let mut core = LwtaCore::new(name, blocks, competitors, opts.winner, w)?;
        if opts.bias {
            core.bias = Some(store.add(format!("{name}.bias"), group, Tensor::zeros(&[width])));
        }
        if opts.use_gates {
            core.gates = Some(Gates::new(store, name, group, &[blocks], blocks));
        }
        Ok(ConvLwta { core, kernel, channels })
    }

    pub fn forward<'t>(&self, pass: &Pass<'t, '_>, x: Var<'t>, rng: &mut RngState) -> Result<(Var<'t>, LayerSample<'t>)> {
        pass.check()?;
        let c = &self.core;
        let (k, ch) = (self.kernel, self.channels);
        let w = pass.param(c.weight);
        let gates = c.gates.as_ref().map(|g| g.sample(pass, rng)).transpose()?;
        let w_eff = match &gates {
            Some(g) => {
                let wb = w.reshape(&[k, k, ch, c.blocks, c.competitors])?;
                let zb = g.z.reshape(&[c.blocks, 1])?;
                wb.mul(zb)?.reshape(&[k, k, ch, c.width()])?
            }
            None => w,
        };
        let mut h = x.conv2d(w_eff)?;
        if let Some(b) = c.bias {
            h = h.add(pass.param(b))?;
        }
        let comp = compete(h, c.blocks, c.competitors, c.winner, pass, rng)?;
        Ok((comp.y, c.record(pass, &comp, gates)))
    }

    /// Drops whole kernel blocks whose inclusion probability is below `threshold`.
    pub fn prune(&mut self, store: &mut ParamStore, threshold: f64) -> usize {
        let Some(g) = self.core.gates.as_mut() else { return 0 };
        let q = g.inclusion(store);
        let mut removed = 0;
        for (p, &qi) in g.pruned.iter_mut().zip(&q) {
            if !*p && qi < threshold {
                *p = true;
                removed += 1;
            }
        }
        let pruned = g.pruned.clone();
        zero_groups(store.value_mut(self.core.weight), self.core.blocks, self.core.competitors, |_, b| pruned[b]);
        removed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tau(t: f64) -> Temperature {
        Temperature::new(t).unwrap()
    }

    fn dense(store: &mut ParamStore, j: usize, b: usize, u: usize, opts: LayerOptions) -> DenseLwta {
        DenseLwta::new(store, "d", ParamGroup::Main, j, b, u, opts, &mut RngState::seed(0)).unwrap()
    }

    #[test]
    fn discrete_dense_output_is_block_sparse() {
        let mut store = ParamStore::new();
        let layer = dense(&mut store, 3, 4, 2, LayerOptions::default());
        let tape = Tape::no_grad();
        let pass = Pass::new(&tape, &store, SampleMode::Discrete, tau(0.67));
        let x = tape.constant(Tensor::new(&[2, 3], vec![0.3, -1.2, 0.8, 1.0, 0.5, -0.1]).unwrap());
        let (y, rec) = layer.forward(&pass, x, &mut RngState::seed(1)).unwrap();
        assert_eq!(y.shape(), vec![2, 8]);
        let xi = rec.xi.unwrap().value();
        for row in xi.data().chunks(2) {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn closed_gates_give_zero_output_and_uniform_winners() {
        let mut store = ParamStore::new();
        let layer = dense(&mut store, 3, 2, 2, LayerOptions::default());
        let g = layer.core.gates.as_ref().unwrap().util_logits;
        store.set_value(g, Tensor::full(&[3, 2], -1e6)).unwrap();
        let tape = Tape::no_grad();
        let pass = Pass::new(&tape, &store, SampleMode::Discrete, tau(0.67));
        let x = tape.constant(Tensor::ones(&[1, 3]));
        let (y, rec) = layer.forward(&pass, x, &mut RngState::seed(2)).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        assert!(rec.probs.unwrap().value().data().iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn single_competitor_open_gates_is_linear() {
        let mut store = ParamStore::new();
        let layer = dense(&mut store, 3, 4, 1, LayerOptions { use_gates: false, ..Default::default() });
        let tape = Tape::no_grad();
        let pass = Pass::new(&tape, &store, SampleMode::Discrete, tau(0.67));
        let xt = Tensor::new(&[2, 3], vec![0.3, -1.2, 0.8, 1.0, 0.5, -0.1]).unwrap();
        let x = tape.constant(xt.clone());
        let (y, _) = layer.forward(&pass, x, &mut RngState::seed(3)).unwrap();
        let w = store.value(layer.core.weight);
        for i in 0..2 {
            for o in 0..4 {
                let e: f64 = (0..3).map(|j| xt.at(&[i, j]) * w.at(&[j, o])).sum();
                assert!((y.value().at(&[i, o]) - e).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn relaxed_requires_recording_tape() {
        let mut store = ParamStore::new();
        let layer = dense(&mut store, 2, 2, 2, LayerOptions::default());
        let tape = Tape::no_grad();
        let pass = Pass::new(&tape, &store, SampleMode::Relaxed, tau(0.67));
        let x = tape.constant(Tensor::ones(&[1, 2]));
        assert!(matches!(layer.forward(&pass, x, &mut RngState::seed(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn relaxed_approaches_discrete_at_low_temperature() {
        let mut store = ParamStore::new();
        let layer = dense(&mut store, 4, 3, 2, LayerOptions::default());
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 4], (0..8).map(|v| (v as f64 * 0.7).sin()).collect()).unwrap());
        let relaxed = Pass::new(&tape, &store, SampleMode::Relaxed, tau(1e-4));
        let discrete = Pass::new(&tape, &store, SampleMode::Discrete, tau(1e-4));
        let (a, _) = layer.forward(&relaxed, x, &mut RngState::seed(8)).unwrap();
        let (b, _) = layer.forward(&discrete, x, &mut RngState::seed(8)).unwrap();
        for (p, q) in a.value().data().iter().zip(b.value().data()) {
            assert!((p - q).abs() <= 1e-3);
        }
    }

    #[test]
    fn conv_shape_and_exclusive_supports() {
        let mut store = ParamStore::new();
        let mut rng = RngState::seed(4);
        let layer = ConvLwta::new(&mut store, "c", ParamGroup::Main, 3, 3, 4, 2, LayerOptions::default(), &mut rng).unwrap();
        let tape = Tape::no_grad();
        let pass = Pass::new(&tape, &store, SampleMode::Discrete, tau(0.67));
        let x = tape.constant(Tensor::new(&[1, 8, 8, 3], rng.normals(192)).unwrap());
        let (y, _) = layer.forward(&pass, x, &mut rng).unwrap();
        assert_eq!(y.shape(), vec![1, 8, 8, 8]);
        for pos in y.value().data().chunks(2) {
            assert!(pos[0] == 0.0 || pos[1] == 0.0);
        }
    }

    #[test]
    fn stale_record_is_rejected() {
        let mut store = ParamStore::new();
        let a = dense(&mut store, 2, 2, 2, LayerOptions::default());
        let mut other = ParamStore::new();
        let b = dense(&mut other, 2, 2, 2, LayerOptions::default());
        let tape = Tape::new();
        let pass = Pass::new(&tape, &store, SampleMode::Relaxed, tau(0.67));
        let x = tape.constant(Tensor::ones(&[1, 2]));
        let (_, rec) = a.forward(&pass, x, &mut RngState::seed(0)).unwrap();
        assert!(a.core.layer_kl(&rec, 1.0).is_ok());
        assert!(matches!(b.core.layer_kl(&rec, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn pruning_zeroes_groups_and_counts() {
        let mut store = ParamStore::new();
        let mut layer = dense(&mut store, 2, 2, 2, LayerOptions::default());
        let g = layer.core.gates.as_ref().unwrap().util_logits;
        store.set_value(g, Tensor::new(&[2, 2], vec![3.0, -20.0, 3.0, 3.0]).unwrap()).unwrap();
        assert_eq!(layer.prune(&mut store, 0.0), 0);
        assert_eq!(layer.prune(&mut store, 1e-3), 1);
        let w = store.value(layer.core.weight);
        assert_eq!(&w.data()[2..4], &[0.0, 0.0]);
        assert!(w.data()[0] != 0.0 && w.data()[4] != 0.0);
    }

    #[test]
    fn winner_mode_parses() {
        assert_eq!("max".parse::<WinnerMode>().unwrap(), WinnerMode::Max);
        assert!("argmax".parse::<WinnerMode>().is_err());
    }
}
