use serde::{Deserialize, Serialize};

use super::model::Mlp;
use crate::error::{Error, Result};
use crate::lwta::{LayerSample, Pass};
use crate::samplers::RngState;
use crate::tensor::{Tensor, Var};

/// Weights of the capacity, JS and predictability terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcpCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for IcpCoefficients {
    fn default() -> Self {
        IcpCoefficients { alpha: 1.0, beta: 1.0, gamma: 1.0 }
    }
}

impl IcpCoefficients {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Batch-mean `KL[N(mu, sigma²) || N(0, I)]`.
pub fn mi_min_bound<'t>(mu: Var<'t>, sigma: Var<'t>) -> Result<Var<'t>> {
    let n = mu.shape()[0].max(1);
    let s2 = sigma.square();
    let per = mu.square().add(s2)?.sub(s2.ln())?.add_scalar(-1.0);
    Ok(per.sum().scale(0.5 / n as f64))
}

/// Mean cross-entropy of `logits [batch, T]` against integer labels.
pub fn inference_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    let (n, t) = match shape.as_slice() {
        [n, t] => (*n, *t),
        _ => return Err(Error::contract(format!("logits must be [batch, T], got {shape:?}"))),
    };
    if t < 2 {
        return Err(Error::config("cross-entropy needs at least two classes"));
    }
    if labels.len() != n {
        return Err(Error::data(format!("{} labels for a batch of {n}", labels.len())));
    }
    let mut onehot = vec![0.0; n * t];
    for (i, &l) in labels.iter().enumerate() {
        if l >= t {
            return Err(Error::data(format!("label {l} outside [0, {t})")));
        }
        onehot[i * t + l] = 1.0;
    }
    let onehot = logits.tape.constant(Tensor::new(&[n, t], onehot)?);
    Ok(logits.log_softmax(1)?.mul(onehot)?.sum().scale(-1.0 / n as f64))
}

/// Discriminator and generator sides of the JS mutual-information bound.
pub struct JsTerms<'t> {
    /// Trains D; inputs detached from the encoders.
    pub loss_d: Var<'t>,
    /// Trains the y path; D enters as constants.
    pub loss_gen: Var<'t>,
    /// D's logits on `[positives; negatives]` from the live pass.
    pub logits: Var<'t>,
    /// Record of D's live pass, for its KL term.
    pub sample: LayerSample<'t>,
}

/// `-mean log sigmoid(l_pos) - mean log(1 - sigmoid(l_neg))` over a stacked
/// `[pos; neg]` logit column.
fn js_loss<'t>(logits: Var<'t>, n: usize) -> Result<Var<'t>> {
    let pos = logits.slice(0, 0, n)?;
    let neg = logits.slice(0, n, n)?;
    pos.neg().softplus().mean().add(neg.softplus().mean())
}

/// Pairs `(y_i, x_i)` against `(y_perm(i), x_i)`, where `perm` is a random
/// derangement of the batch.
pub fn mi_max_js<'t>(
    disc: &Mlp,
    pass: &Pass<'t, '_>,
    y: Var<'t>,
    x_feat: Var<'t>,
    rng: &mut RngState,
) -> Result<JsTerms<'t>> {
    let n = y.shape()[0];
    if n < 2 {
        return Err(Error::contract("JS bound needs a batch of at least 2 for negative pairs"));
    }
    let perm = rng.derangement(n);
    let x_feat = x_feat.detach();
    let pairs = |y: Var<'t>| -> Result<Var<'t>> {
        let y_hat = y.permute_rows(&perm)?;
        Var::concat(&[Var::concat(&[y, x_feat], 1)?, Var::concat(&[y_hat, x_feat], 1)?], 0)
    };
    let (logits, sample) = disc.forward(pass, pairs(y.detach())?, rng)?;
    let loss_d = js_loss(logits, n)?;
    let (gen_logits, _) = disc.forward(&pass.frozen(), pairs(y)?, rng)?;
    let loss_gen = js_loss(gen_logits, n)?;
    Ok(JsTerms { loss_d, loss_gen, logits, sample })
}

/// Predictor-phase and adversarial-phase predictability losses.
pub struct PmTerms<'t> {
    /// Trains the predictors; encoder outputs detached.
    pub loss_pred: Var<'t>,
    /// Trains the encoders: negated prediction error with predictors frozen.
    pub loss_adv: Var<'t>,
    pub samples: [LayerSample<'t>; 2],
}

fn mse<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    Ok(a.sub(b)?.square().mean())
}

/// Per-column batch standardization `(v - mean) / sqrt(var + 1e-6)`.
pub fn standardize<'t>(v: Var<'t>) -> Result<Var<'t>> {
    let centered = v.sub(v.mean_axis(0)?)?;
    let std = centered.square().mean_axis(0)?.add_scalar(1e-6).powf(0.5);
    centered.div(std)
}

/// Cross-prediction of y from ζ and ζ from y on batch-standardized
/// representations. Targets are always detached.
pub fn predictability_min<'t>(
    h_yz: &Mlp,
    h_zy: &Mlp,
    pass: &Pass<'t, '_>,
    zeta: Var<'t>,
    y: Var<'t>,
    rng: &mut RngState,
) -> Result<PmTerms<'t>> {
    let (zeta, y) = (standardize(zeta)?, standardize(y)?);
    let (zt, yt) = (zeta.detach(), y.detach());
    let (py, s1) = h_yz.forward(pass, zt, rng)?;
    let (pz, s2) = h_zy.forward(pass, yt, rng)?;
    let loss_pred = mse(py, yt)?.add(mse(pz, zt)?)?;
    let frozen = pass.frozen();
    let (ay, _) = h_yz.forward(&frozen, zeta, rng)?;
    let (az, _) = h_zy.forward(&frozen, y, rng)?;
    let loss_adv = mse(ay, yt)?.add(mse(az, zt)?)?.neg();
    Ok(PmTerms { loss_pred, loss_adv, samples: [s1, s2] })
}

/// Unweighted component losses of the encoder objective.
#[derive(Clone, Copy)]
pub struct LossTerms<'t> {
    pub ce_r: Var<'t>,
    pub ce_zeta: Var<'t>,
    pub ce_y: Var<'t>,
    pub mi_min: Var<'t>,
    pub loss_gen: Var<'t>,
    pub loss_adv: Var<'t>,
}

/// Weighted contribution of each term; the fields sum to `total`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub ce_r: f64,
    pub ce_zeta: f64,
    pub ce_y: f64,
    pub mi_min: f64,
    pub js_gen: f64,
    pub pred_adv: f64,
    pub kl: f64,
    pub total: f64,
}

impl TermReport {
    pub fn entries(&self) -> [(&'static str, f64); 8] {
        [
            ("ce_r", self.ce_r),
            ("ce_zeta", self.ce_zeta),
            ("ce_y", self.ce_y),
            ("mi_min", self.mi_min),
            ("js_gen", self.js_gen),
            ("pred_adv", self.pred_adv),
            ("kl", self.kl),
            ("total", self.total),
        ]
    }

    pub fn diagnostic(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
    }
}

/// `CE_r + CE_ζ + CE_y + β·mi_min + α·loss_gen + γ·loss_adv + kl_total`.
pub fn assemble_loss<'t>(
    terms: &LossTerms<'t>,
    coeffs: &IcpCoefficients,
    kl_total: Var<'t>,
) -> Result<(Var<'t>, TermReport)> {
    let weighted = [
        terms.ce_r,
        terms.ce_zeta,
        terms.ce_y,
        terms.mi_min.scale(coeffs.beta),
        terms.loss_gen.scale(coeffs.alpha),
        terms.loss_adv.scale(coeffs.gamma),
        kl_total,
    ];
    let v: Vec<f64> = weighted.iter().map(|w| w.item()).collect();
    let mut total = weighted[0];
    for w in &weighted[1..] {
        total = total.add(*w)?;
    }
    let report = TermReport {
        ce_r: v[0],
        ce_zeta: v[1],
        ce_y: v[2],
        mi_min: v[3],
        js_gen: v[4],
        pred_adv: v[5],
        kl: v[6],
        total: total.item(),
    };
    if v.iter().chain([&report.total]).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(report.diagnostic()));
    }
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn gaussian_bound_values() {
        let t = Tape::new();
        let mu = t.constant(Tensor::zeros(&[3, 2]));
        let one = t.constant(Tensor::ones(&[3, 2]));
        assert_eq!(mi_min_bound(mu, one).unwrap().item(), 0.0);
        let mu = t.constant(Tensor::ones(&[1, 1]));
        let s = t.constant(Tensor::ones(&[1, 1]));
        assert!((mi_min_bound(mu, s).unwrap().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_values() {
        let t = Tape::new();
        let logits = t.constant(Tensor::zeros(&[4, 10]));
        let ce = inference_loss(logits, &[0, 3, 9, 2]).unwrap().item();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
        let mut d = vec![0.0; 20];
        d[1] = 100.0;
        d[10 + 7] = 100.0;
        let logits = t.constant(Tensor::new(&[2, 10], d).unwrap());
        assert!(inference_loss(logits, &[1, 7]).unwrap().item() <= 1e-8);
        assert!(matches!(inference_loss(logits, &[1, 10]), Err(Error::Data(_))));
    }

    #[test]
    fn js_floor_at_half() {
        let t = Tape::new();
        let l = t.constant(Tensor::zeros(&[6, 1]));
        assert!((js_loss(l, 3).unwrap().item() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nan_term_aborts_with_report() {
        let t = Tape::new();
        let z = t.scalar(0.0);
        let terms = LossTerms { ce_r: t.scalar(f64::NAN), ce_zeta: z, ce_y: z, mi_min: z, loss_gen: z, loss_adv: z };
        match assemble_loss(&terms, &IcpCoefficients::default(), z) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("ce_r=NaN")),
            _ => panic!("expected non-finite error"),
        }
    }

    #[test]
    fn zero_coefficients_leave_cross_entropies() {
        let t = Tape::new();
        let terms = LossTerms {
            ce_r: t.scalar(1.0),
            ce_zeta: t.scalar(2.0),
            ce_y: t.scalar(3.0),
            mi_min: t.scalar(7.0),
            loss_gen: t.scalar(11.0),
            loss_adv: t.scalar(-13.0),
        };
        let c = IcpCoefficients { alpha: 0.0, beta: 0.0, gamma: 0.0 };
        let (total, rep) = assemble_loss(&terms, &c, t.scalar(0.0)).unwrap();
        assert_eq!(total.item(), 6.0);
        assert_eq!(rep.total, 6.0);
    }
}
