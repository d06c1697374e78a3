//! Priors and KL-divergence terms of the variational objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Var;

/// Floor applied to every probability before it enters a log.
pub const PROB_EPS: f64 = 1e-7;

/// Stick-breaking IBP prior over utility gates: `u_b ~ Beta(omega, 1)`,
/// `pi_b = prod_{i<=b} u_i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IbpPrior {
    pub omega: f64,
    pub blocks: usize,
}

impl IbpPrior {
    pub fn new(omega: f64, blocks: usize) -> Result<Self> {
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(Error::config(format!("omega must be positive, got {omega}")));
        }
        Ok(IbpPrior { omega, blocks })
    }
}

/// Per-layer KL values (already reduced to scalars).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KlBreakdown {
    pub kl_xi: f64,
    pub kl_z: f64,
    pub kl_u: f64,
}

impl KlBreakdown {
    pub fn total(&self) -> f64 {
        self.kl_xi + self.kl_z + self.kl_u
    }
}

impl std::ops::AddAssign for KlBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.kl_xi += o.kl_xi;
        self.kl_z += o.kl_z;
        self.kl_u += o.kl_u;
    }
}

/// Running product of stick variables along the last axis.
pub fn stick_breaking_pi<'t>(u: Var<'t>) -> Result<Var<'t>> {
    let v = u.value();
    if let Some(bad) = v.data().iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
        return Err(Error::contract(format!("stick variable {bad} outside (0, 1]")));
    }
    u.cumprod()
}

/// Single-sample estimate of `KL[q(xi) || Categorical(1/U)]`, summed over all
/// rows: `sum_u s_u log q_u + log U` per row, where `s` is the (possibly
/// relaxed) sample and `q` the posterior masses.
pub fn kl_categorical_mc<'t>(q_probs: Var<'t>, sample: Var<'t>) -> Result<Var<'t>> {
    let shape = q_probs.shape();
    let u = *shape.last().ok_or_else(|| Error::contract("categorical KL on a scalar"))?;
    let rows = q_probs.numel() / u.max(1);
    let log_q = q_probs.clamp(PROB_EPS, 1.0).ln();
    Ok(sample.mul(log_q)?.sum().add_scalar(rows as f64 * (u as f64).ln()))
}

/// Elementwise closed-form Bernoulli KL, clamped at [`PROB_EPS`].
pub fn kl_bernoulli_elementwise<'t>(q: Var<'t>, p: Var<'t>) -> Result<Var<'t>> {
    let q = q.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let q1 = q.neg().add_scalar(1.0);
    let p1 = p.neg().add_scalar(1.0);
    let on = q.mul(q.ln().sub(p.ln())?)?;
    let off = q1.mul(q1.ln().sub(p1.ln())?)?;
    on.add(off)
}

/// `sum [q log(q/p) + (1-q) log((1-q)/(1-p))]`.
pub fn kl_bernoulli<'t>(q: Var<'t>, p: Var<'t>) -> Result<Var<'t>> {
    Ok(kl_bernoulli_elementwise(q, p)?.sum())
}

/// `log q_K(u; a, b)` for the Kumaraswamy density, elementwise.
pub fn kumaraswamy_log_density<'t>(a: Var<'t>, b: Var<'t>, u: Var<'t>) -> Result<Var<'t>> {
    let ln_u = u.ln();
    // 1 - u^a, kept away from 0 for u near 1
    let one_minus = a.mul(ln_u)?.exp().neg().add_scalar(1.0).clamp(1e-12, 1.0);
    let t1 = a.ln().add(b.ln())?;
    let t2 = a.add_scalar(-1.0).mul(ln_u)?;
    let t3 = b.add_scalar(-1.0).mul(one_minus.ln())?;
    t1.add(t2)?.add(t3)
}

/// Single-sample estimate of `KL[Kumaraswamy(a, b) || Beta(omega, 1)]` at the
/// drawn stick values `u`, summed over sticks.
pub fn kl_kumaraswamy_beta<'t>(a: Var<'t>, b: Var<'t>, u: Var<'t>, omega: f64) -> Result<Var<'t>> {
    let log_q = kumaraswamy_log_density(a, b, u)?;
    let log_p = u.ln().scale(omega - 1.0).add_scalar(omega.ln());
    Ok(log_q.sub(log_p)?.sum())
}
