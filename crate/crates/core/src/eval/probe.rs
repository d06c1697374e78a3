use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::icp::IcpModel;
use crate::samplers::RngState;
use crate::tensor::Tensor;
use crate::train::features;

/// Objective tolerance for the hinge-loss solver.
pub const PROBE_TOL: f64 = 1e-5;
pub const PROBE_MAX_ITER: usize = 3000;
/// Improvement window for the stopping rule.
const WINDOW: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTarget {
    Zeta,
    Y,
    Total,
    Conv,
}

impl std::str::FromStr for ProbeTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeta" => Ok(ProbeTarget::Zeta),
            "y" => Ok(ProbeTarget::Y),
            "total" => Ok(ProbeTarget::Total),
            "conv" => Ok(ProbeTarget::Conv),
            _ => Err(Error::config(format!("unknown probe target '{s}' (zeta|y|total|conv)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub zeta: f64,
    pub y: f64,
    pub total: f64,
    /// Absent for models without convolutional layers.
    pub conv: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
}

impl ProbeReport {
    pub fn lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("probe_zeta={}", self.zeta),
            format!("probe_y={}", self.y),
            format!("probe_total={}", self.total),
        ];
        if let Some(c) = self.conv {
            out.push(format!("probe_conv={c}"));
        }
        out.push(format!("probe_n_train={}", self.n_train));
        out.push(format!("probe_n_test={}", self.n_test));
        out
    }
}

/// One-vs-rest linear max-margin classifier on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    std: Vec<f64>,
    /// Per class: `d` weights followed by the bias.
    weights: Vec<Vec<f64>>,
}

fn standardizer(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let d = x.shape()[1];
    let n = x.shape()[0] as f64;
    let mut mean = vec![0.0; d];
    for row in x.rows() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for row in x.rows() {
        var.iter_mut().zip(row).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
    }
    let std = var.iter().map(|v| if *v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    (mean, std)
}

/// Minimizes `λ/2 |w|² + mean max(0, 1 - s (w·x + b))` with `λ = 1/n` by
/// subgradient descent, keeping the best iterate.
fn fit_binary(x: &[Vec<f64>], s: &[f64]) -> Vec<f64> {
    let n = x.len();
    let d = x[0].len();
    let lambda = 1.0 / n as f64;
    let objective = |w: &[f64]| -> f64 {
        let reg: f64 = 0.5 * lambda * w[..d].iter().map(|v| v * v).sum::<f64>();
        let hinge: f64 = x
            .iter()
            .zip(s)
            .map(|(xi, si)| {
                let m = si * (dot(&w[..d], xi) + w[d]);
                (1.0 - m).max(0.0)
            })
            .sum::<f64>()
            / n as f64;
        reg + hinge
    };
    let mut w = vec![0.0; d + 1];
    let mut best = w.clone();
    let mut best_f = objective(&w);
    let mut checkpoint_f = best_f;
    for t in 1..=PROBE_MAX_ITER {
        let mut g = vec![0.0; d + 1];
        for (xi, si) in x.iter().zip(s) {
            if si * (dot(&w[..d], xi) + w[d]) < 1.0 {
                g[..d].iter_mut().zip(xi).for_each(|(gj, xj)| *gj -= si * xj);
                g[d] -= si;
            }
        }
        g.iter_mut().for_each(|v| *v /= n as f64);
        g[..d].iter_mut().zip(&w[..d]).for_each(|(gj, wj)| *gj += lambda * wj);
        let eta = 0.5 / (t as f64).sqrt();
        w.iter_mut().zip(&g).for_each(|(wj, gj)| *wj -= eta * gj);
        let f = objective(&w);
        if f < best_f {
            best_f = f;
            best.copy_from_slice(&w);
        }
        if t % WINDOW == 0 {
            if checkpoint_f - best_f <= PROBE_TOL * best_f.abs().max(1.0) {
                break;
            }
            checkpoint_f = best_f;
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LinearProbe {
    pub fn fit(x: &Tensor, labels: &[usize], classes: usize) -> Result<Self> {
        if x.ndim() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::contract(format!(
                "probe features must be [N, d] with N labels, got {:?} and {}",
                x.shape(),
                labels.len()
            )));
        }
        let mut distinct: Vec<usize> = labels.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(Error::contract("linear probe needs at least two classes in the training set"));
        }
        let (mean, std) = standardizer(x);
        let rows: Vec<Vec<f64>> = x
            .rows()
            .map(|r| r.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
            .collect();
        let weights = (0..classes)
            .into_par_iter()
            .map(|c| {
                let s: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
                fit_binary(&rows, &s)
            })
            .collect();
        Ok(LinearProbe { mean, std, weights })
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        let d = self.mean.len();
        x.rows()
            .map(|r| {
                let z: Vec<f64> = r.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect();
                let mut best = (0, f64::NEG_INFINITY);
                for (c, w) in self.weights.iter().enumerate() {
                    let score = dot(&w[..d], &z) + w[d];
                    if score > best.1 {
                        best = (c, score);
                    }
                }
                best.0
            })
            .collect()
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> f64 {
        let pred = self.predict(x);
        pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
    }
}

/// Fits on the training features and scores the held-out features.
pub fn probe_accuracy(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    classes: usize,
) -> Result<f64> {
    Ok(LinearProbe::fit(train_x, train_y, classes)?.accuracy(test_x, test_y))
}

fn pick(f: &crate::train::Features, target: ProbeTarget) -> Result<&Tensor> {
    match target {
        ProbeTarget::Zeta => Ok(&f.zeta),
        ProbeTarget::Y => Ok(&f.y),
        ProbeTarget::Total => Ok(&f.total),
        ProbeTarget::Conv => f.conv.as_ref().ok_or_else(|| Error::config("model has no convolutional layer to probe")),
    }
}

/// Held-out accuracy of a linear probe on one frozen representation,
/// averaged over `n_samples` discrete passes.
pub fn linear_probe(
    model: &IcpModel,
    data: &DatasetBundle,
    target: ProbeTarget,
    n_samples: usize,
    rng: &mut RngState,
) -> Result<f64> {
    let tr = features(model, &data.train.x, n_samples, rng)?;
    let te = features(model, &data.test.x, n_samples, rng)?;
    probe_accuracy(pick(&tr, target)?, &data.train.labels, pick(&te, target)?, &data.test.labels, model.spec.classes)
}

/// Probes every representation from one feature extraction.
pub fn probe_report(model: &IcpModel, data: &DatasetBundle, n_samples: usize, rng: &mut RngState) -> Result<ProbeReport> {
    let tr = features(model, &data.train.x, n_samples, rng)?;
    let te = features(model, &data.test.x, n_samples, rng)?;
    let t = model.spec.classes;
    let run = |target| -> Result<f64> {
        probe_accuracy(pick(&tr, target)?, &data.train.labels, pick(&te, target)?, &data.test.labels, t)
    };
    Ok(ProbeReport {
        zeta: run(ProbeTarget::Zeta)?,
        y: run(ProbeTarget::Y)?,
        total: run(ProbeTarget::Total)?,
        conv: if tr.conv.is_some() { Some(run(ProbeTarget::Conv)?) } else { None },
        n_train: data.train.len(),
        n_test: data.test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_labels_are_perfectly_separable() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let mut x = vec![0.0; 60 * 3];
        for (i, &l) in labels.iter().enumerate() {
            x[i * 3 + l] = 1.0;
        }
        let x = Tensor::new(&[60, 3], x).unwrap();
        assert_eq!(probe_accuracy(&x, &labels, &x, &labels, 3).unwrap(), 1.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Tensor::ones(&[4, 2]);
        assert!(matches!(LinearProbe::fit(&x, &[1, 1, 1, 1], 2), Err(Error::Contract(_))));
    }
}
