//! Reparameterized random variates for the latent variables of the model.
//!
//! Every sampler draws its noise from a caller-owned [`RngState`] and then
//! applies a deterministic transform, so a sampler is a pure function of
//! (parameters, rng state). Relaxed and discrete variants of the same sampler
//! consume identical draws in identical order; running both from the same rng
//! state therefore shares noise, and the relaxed draw approaches the discrete
//! one as the temperature goes to zero.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Uniform draws are clamped into `[UNIFORM_EPS, 1 - UNIFORM_EPS]` before any log.
pub const UNIFORM_EPS: f64 = 1e-12;

/// Seedable counter-based generator (ChaCha8); identical streams on every platform.
#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    rng: ChaCha8Rng,
}

/// Serializable position of an [`RngState`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn seed(seed: u64) -> Self {
        RngState {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream; advances `self` by one word.
    pub fn fork(&mut self) -> Self {
        Self::seed(self.rng.next_u64())
    }

    /// Uniform(0,1) clamped away from both endpoints.
    pub fn uniform(&mut self) -> f64 {
        let v: f64 = self.rng.random();
        v.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    }

    pub fn uniforms(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// Random permutation of `0..n` with no fixed points (n ≥ 2).
    pub fn derangement(&mut self, n: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n).collect();
        self.shuffle(&mut perm);
        if n >= 2 {
            for i in 0..n {
                if perm[i] == i {
                    let j = (i + 1) % n;
                    perm.swap(i, j);
                }
            }
        }
        perm
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(snap: &RngSnapshot) -> Self {
        let mut rng = ChaCha8Rng::from_seed(snap.seed);
        rng.set_stream(snap.stream);
        rng.set_word_pos(snap.word_pos);
        RngState { rng }
    }
}

/// Relaxation temperature, strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Temperature(tau))
        } else {
            Err(Error::config(format!("temperature must be positive, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

pub fn gumbel_from_uniform(v: f64) -> f64 {
    -(-v.ln()).ln()
}

/// Standard Gumbel noise `-log(-log V)`.
pub fn sample_gumbel(shape: &[usize], rng: &mut RngState) -> Result<Tensor> {
    if shape.is_empty() {
        return Err(Error::contract("gumbel sample needs a non-empty shape"));
    }
    let n = shape.iter().product();
    let data = (0..n).map(|_| gumbel_from_uniform(rng.uniform())).collect();
    Tensor::new(shape, data)
}

fn check_categories(shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&u) if u >= 2 => Ok(u),
        _ => Err(Error::config(format!(
            "categorical sampling needs at least 2 categories on the last axis, got shape {shape:?}"
        ))),
    }
}

/// Concrete (Gumbel-softmax) relaxation along the last axis:
/// `softmax((logits + g) / tau)`. Log-probabilities and logits differ by a
/// per-row constant, which the softmax ignores.
pub fn sample_concrete_categorical<'t>(
    logits: Var<'t>,
    tau: Temperature,
    rng: &mut RngState,
) -> Result<Var<'t>> {
    let shape = logits.shape();
    check_categories(&shape)?;
    let g = logits.tape.constant(sample_gumbel(&shape, rng)?);
    logits.add(g)?.scale(1.0 / tau.get()).softmax(shape.len() - 1)
}

/// Gumbel-max draw: exact one-hot sample of `Categorical(softmax(logits))`
/// along the last axis. Consumes the same noise as the relaxed sampler.
pub fn sample_categorical_hard(logits: &Tensor, rng: &mut RngState) -> Result<Tensor> {
    let u = check_categories(logits.shape())?;
    let g = sample_gumbel(logits.shape(), rng)?;
    let mut out = vec![0.0; logits.len()];
    for (row, (l, gr)) in logits.data().chunks(u).zip(g.data().chunks(u)).enumerate() {
        out[row * u + argmax_perturbed(l, gr)] = 1.0;
    }
    Tensor::new(logits.shape(), out)
}

fn argmax_perturbed(l: &[f64], g: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, (a, b)) in l.iter().zip(g).enumerate() {
        if a + b > best_v {
            best_v = a + b;
            best = i;
        }
    }
    best
}

/// Deterministic one-hot of the row maximum along the last axis (first index on ties).
pub fn argmax_one_hot(values: &Tensor) -> Result<Tensor> {
    let u = check_categories(values.shape())?;
    let mut out = vec![0.0; values.len()];
    for (row, chunk) in values.data().chunks(u).enumerate() {
        let mut best = 0;
        for (i, &v) in chunk.iter().enumerate() {
            if v > chunk[best] {
                best = i;
            }
        }
        out[row * u + best] = 1.0;
    }
    Tensor::new(values.shape(), out)
}

fn logistic_noise(rng: &mut RngState, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.uniform();
            v.ln() - (-v).ln_1p()
        })
        .collect()
}

/// Binary Concrete relaxation `sigmoid((logit + log V - log(1-V)) / tau)`.
pub fn sample_concrete_bernoulli<'t>(
    logit: Var<'t>,
    tau: Temperature,
    rng: &mut RngState,
) -> Result<Var<'t>> {
    let shape = logit.shape();
    let noise = Tensor::new(&shape, logistic_noise(rng, logit.numel()))?;
    let noise = logit.tape.constant(noise);
    Ok(logit.add(noise)?.scale(1.0 / tau.get()).sigmoid())
}

/// Hard Bernoulli draw by inverse CDF: 1 exactly when the relaxed sampler's
/// argument is positive. Shares noise with [`sample_concrete_bernoulli`].
pub fn sample_bernoulli_hard(logit: &Tensor, rng: &mut RngState) -> Tensor {
    let noise = logistic_noise(rng, logit.len());
    let data = logit
        .data()
        .iter()
        .zip(&noise)
        .map(|(l, n)| if l + n > 0.0 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(logit.shape(), data).expect("same shape")
}

/// Kumaraswamy(a, b) reparameterized draw via the standard inverse CDF
/// `(1 - (1 - G)^(1/b))^(1/a)`, strictly inside (0, 1).
pub fn sample_kumaraswamy<'t>(a: Var<'t>, b: Var<'t>, rng: &mut RngState) -> Result<Var<'t>> {
    let noise = rng.uniforms(a.numel());
    Var::kumaraswamy(a, b, noise)
}

/// `mu + sigma * eps`, `eps ~ N(0, I)`.
pub fn sample_gaussian<'t>(mu: Var<'t>, sigma: Var<'t>, rng: &mut RngState) -> Result<Var<'t>> {
    let shape = mu.shape();
    let eps = Tensor::new(&shape, rng.normals(mu.numel()))?;
    let eps = mu.tape.constant(eps);
    mu.add(sigma.mul(eps)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn gumbel_fixed_point() {
        assert_eq!(gumbel_from_uniform((-1.0f64).exp()), 0.0);
    }

    #[test]
    fn replay_is_identical() {
        let a = sample_gumbel(&[64], &mut RngState::seed(9)).unwrap();
        let b = sample_gumbel(&[64], &mut RngState::seed(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn snapshot_restores_position() {
        let mut r = RngState::seed(3);
        r.uniforms(17);
        let snap = r.snapshot();
        let next = r.uniforms(5);
        let mut back = RngState::restore(&snap);
        assert_eq!(back.uniforms(5), next);
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut r = RngState::seed(1);
        for n in 2..40 {
            let p = r.derangement(n);
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            let mut s = p.clone();
            s.sort();
            assert_eq!(s, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(Temperature::new(0.67).is_ok());
    }

    #[test]
    fn categorical_needs_two_categories() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[3, 1]));
        let tau = Temperature::new(0.5).unwrap();
        assert!(matches!(
            sample_concrete_categorical(l, tau, &mut RngState::seed(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_temperature_limit_is_one_hot() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::new(&[4, 3], vec![0.3, -1.0, 2.0, 0.0, 0.0, 0.0, 5.0, 4.0, 4.5, -2.0, 1.0, 0.2]).unwrap());
        let tau = Temperature::new(1e-4).unwrap();
        let s = sample_concrete_categorical(l, tau, &mut RngState::seed(5)).unwrap().value();
        let hard = sample_categorical_hard(&l.value(), &mut RngState::seed(5)).unwrap();
        for (a, b) in s.data().iter().zip(hard.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn kumaraswamy_unit_params_pass_uniform_through() {
        let tape = Tape::new();
        let one = tape.constant(Tensor::ones(&[50]));
        let u = sample_kumaraswamy(one, one, &mut RngState::seed(11)).unwrap().value();
        let g = RngState::seed(11).uniforms(50);
        for (a, b) in u.data().iter().zip(&g) {
            assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn kumaraswamy_rejects_nonpositive() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![0.0]));
        let b = tape.constant(Tensor::from_vec(vec![1.0]));
        assert!(matches!(
            sample_kumaraswamy(a, b, &mut RngState::seed(0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn kumaraswamy_stays_inside_unit_interval() {
        let tape = Tape::new();
        let mut rng = RngState::seed(2);
        for &(a, b) in &[(1e-3, 1e-3), (1e-3, 1e3), (1e3, 1e-3), (1e3, 1e3)] {
            let av = tape.constant(Tensor::full(&[2000], a));
            let bv = tape.constant(Tensor::full(&[2000], b));
            let u = sample_kumaraswamy(av, bv, &mut rng).unwrap().value();
            assert!(u.data().iter().all(|&v| v > 0.0 && v < 1.0), "a={a} b={b}");
        }
    }

    #[test]
    fn gaussian_collapses_to_mean() {
        let tape = Tape::new();
        let mu = tape.constant(Tensor::from_vec(vec![1.5, -2.0]));
        let s = tape.constant(Tensor::full(&[2], 1e-12));
        let z = sample_gaussian(mu, s, &mut RngState::seed(4)).unwrap().value();
        assert!((z.data()[0] - 1.5).abs() <= 1e-10);
        assert!((z.data()[1] + 2.0).abs() <= 1e-10);
    }
}
