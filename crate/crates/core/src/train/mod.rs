//! Optimization loop, Bayesian-averaged prediction, compression and seed sweeps.
//!
//! Each batch draws one relaxed sample of every latent variable and then
//! updates three parameter groups in turn, each from its own loss: encoders
//! and classifiers from the assembled objective, the discriminator from the
//! JS loss, the cross-predictors from their prediction error.

mod checkpoint;
mod optim;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{Optimizer, OptimizerKind};

use crate::bayes::KlBreakdown;
use crate::data::{augment, AugmentFlags, Dataset, DatasetBundle};
use crate::error::{Error, Result};
use crate::icp::{
    assemble_loss, inference_loss, mi_max_js, mi_min_bound, predictability_min, Arch, IcpCoefficients, IcpModel,
    LossTerms, ModelSpec, TermReport,
};
use crate::lwta::{Pass, SampleMode, WinnerMode};
use crate::samplers::{RngState, Temperature};
use crate::tensor::{ParamGroup, Tape, Tensor, Var};

/// Rows per forward pass at prediction time.
pub const PREDICT_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arch: Arch,
    /// Competitors per block (U).
    pub competitors: usize,
    pub winner: WinnerMode,
    /// IBP utility gates on every LWTA layer.
    pub gates: bool,
    pub bias: bool,
    pub zeta_dim: usize,
    pub y_dim: usize,
    pub aux_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Multiply the learning rate by `lr_decay_factor` every this many epochs (0 = constant).
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub tau_prior: f64,
    pub tau_post: f64,
    pub omega: f64,
    pub seed: u64,
    pub coeffs: IcpCoefficients,
    pub augment: AugmentFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::MlpTiny,
            competitors: 2,
            winner: WinnerMode::Stochastic,
            gates: true,
            bias: false,
            zeta_dim: 8,
            y_dim: 8,
            aux_hidden: 16,
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            lr_decay_every: 0,
            lr_decay_factor: 0.5,
            tau_prior: 0.5,
            tau_post: 0.67,
            omega: 1.0,
            seed: 0,
            coeffs: IcpCoefficients::default(),
            augment: AugmentFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        Temperature::new(self.tau_prior)?;
        Temperature::new(self.tau_post)?;
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 (JS negative pairs)"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::config(format!("omega must be positive, got {}", self.omega)));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::config("lr_decay_factor must be positive"));
        }
        self.coeffs.validate()
    }

    pub fn model_spec(&self, data: &DatasetBundle) -> ModelSpec {
        ModelSpec {
            arch: self.arch,
            input_shape: data.train.sample_shape().to_vec(),
            classes: data.train.classes.max(data.test.classes),
            competitors: self.competitors,
            winner: self.winner,
            gates: self.gates,
            bias: self.bias,
            zeta_dim: self.zeta_dim,
            y_dim: self.y_dim,
            aux_hidden: self.aux_hidden,
        }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            self.lr
        } else {
            self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
        }
    }
}

/// Per-epoch averages. Term values are the weighted contributions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub terms: TermReport,
    pub kl: KlBreakdown,
    pub loss_d: f64,
    pub loss_pred: f64,
    /// Accuracy of the r-classifier on the relaxed training passes.
    pub train_acc: f64,
    /// Discriminator pair-classification accuracy.
    pub disc_acc: f64,
    pub mean_inclusion: f64,
}

impl EpochMetrics {
    /// `key=value` lines.
    pub fn lines(&self) -> Vec<String> {
        let mut out = vec![format!("epoch={}", self.epoch)];
        out.extend(self.terms.entries().iter().map(|(k, v)| format!("{k}={v}")));
        out.extend([
            format!("kl_xi={}", self.kl.kl_xi),
            format!("kl_z={}", self.kl.kl_z),
            format!("kl_u={}", self.kl.kl_u),
            format!("loss_d={}", self.loss_d),
            format!("loss_pred={}", self.loss_pred),
            format!("train_acc={}", self.train_acc),
            format!("disc_acc={}", self.disc_acc),
            format!("mean_inclusion={}", self.mean_inclusion),
        ]);
        out
    }
}

/// Training failure; divergence carries the last checkpoint with finite parameters.
#[derive(Debug)]
pub struct TrainError {
    pub error: Error,
    pub last_good: Option<Box<Checkpoint>>,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for TrainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        e.error
    }
}

impl From<Error> for TrainError {
    fn from(error: Error) -> Self {
        TrainError { error, last_good: None }
    }
}

/// Values of one optimization step.
#[derive(Clone, Debug, Default)]
pub struct StepStats {
    pub report: TermReport,
    pub kl: KlBreakdown,
    pub loss_d: f64,
    pub loss_pred: f64,
    pub correct: usize,
    pub disc_correct: usize,
    pub rows: usize,
}

fn sum_vars<'t>(vars: &[Var<'t>]) -> Result<Var<'t>> {
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = acc.add(*v)?;
    }
    Ok(acc)
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn check_grads(model: &IcpModel, group: ParamGroup, phase: &str) -> Result<()> {
    for id in model.store.ids_in(group) {
        if model.store.grad(id).data().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{phase}: gradient of {} is not finite",
                model.store.name(id)
            )));
        }
    }
    Ok(())
}

/// The three losses of one relaxed pass on a batch.
pub struct StepLosses<'t> {
    /// Encoder and classifier objective.
    pub total: Var<'t>,
    /// Discriminator loss with its layer KL.
    pub loss_d: Var<'t>,
    /// Cross-predictor loss with their layer KLs.
    pub loss_pred: Var<'t>,
    pub stats: StepStats,
}

/// Builds every training loss for one batch. KL terms are scaled by `1 / n_data`.
pub fn step_losses<'t>(
    model: &IcpModel,
    pass: &Pass<'t, '_>,
    cfg: &TrainConfig,
    x: Var<'t>,
    labels: &[usize],
    n_data: usize,
    rng: &mut RngState,
) -> Result<StepLosses<'t>> {
    let scale = 1.0 / n_data as f64;
    let n = labels.len();
    let enc = model.encode(pass, x, rng)?;
    let (kl, kl_parts) = model.backbone_kl(&enc.samples, cfg.omega)?;
    let js = mi_max_js(&model.disc, pass, enc.y, enc.feat, rng)?;
    let pm = predictability_min(&model.pred_y_from_zeta, &model.pred_zeta_from_y, pass, enc.zeta, enc.y, rng)?;
    let terms = LossTerms {
        ce_r: inference_loss(enc.logits_r, labels)?,
        ce_zeta: inference_loss(enc.logits_zeta, labels)?,
        ce_y: inference_loss(enc.logits_y, labels)?,
        mi_min: mi_min_bound(enc.mu, enc.sigma)?,
        loss_gen: js.loss_gen,
        loss_adv: pm.loss_adv,
    };
    let (total, report) = assemble_loss(&terms, &cfg.coeffs, kl.scale(scale))?;
    let d_kl = model.disc.hidden.core.layer_kl(&js.sample, cfg.omega)?.total()?;
    let loss_d = js.loss_d.add(d_kl.scale(scale))?;
    let h1 = model.pred_y_from_zeta.hidden.core.layer_kl(&pm.samples[0], cfg.omega)?.total()?;
    let h2 = model.pred_zeta_from_y.hidden.core.layer_kl(&pm.samples[1], cfg.omega)?.total()?;
    let loss_pred = sum_vars(&[pm.loss_pred, h1.scale(scale), h2.scale(scale)])?;
    for (name, v) in [("loss_d", loss_d.item()), ("loss_pred", loss_pred.item())] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name}={v} {}", report.diagnostic())));
        }
    }
    let pred = argmax_rows(&enc.logits_r.value());
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    let d_logits = js.logits.value();
    let disc_correct = d_logits.data()[..n].iter().filter(|&&l| l > 0.0).count()
        + d_logits.data()[n..].iter().filter(|&&l| l <= 0.0).count();
    let stats = StepStats {
        report,
        kl: KlBreakdown { kl_xi: kl_parts.kl_xi * scale, kl_z: kl_parts.kl_z * scale, kl_u: kl_parts.kl_u * scale },
        loss_d: loss_d.item(),
        loss_pred: loss_pred.item(),
        correct,
        disc_correct,
        rows: n,
    };
    Ok(StepLosses { total, loss_d, loss_pred, stats })
}

/// One three-phase update on a batch. `n_data` scales the KL terms.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut IcpModel,
    opt: &mut Optimizer,
    cfg: &TrainConfig,
    lr: f64,
    x: Tensor,
    labels: &[usize],
    n_data: usize,
    rng: &mut RngState,
) -> Result<StepStats> {
    let tau = Temperature::new(cfg.tau_post)?;
    let tape = Tape::new();
    let StepLosses { total, loss_d, loss_pred, stats } = {
        let pass = Pass::new(&tape, &model.store, SampleMode::Relaxed, tau);
        step_losses(model, &pass, cfg, tape.constant(x), labels, n_data, rng)?
    };
    for (group, loss, phase) in [
        (ParamGroup::Main, total, "encoder phase"),
        (ParamGroup::Discriminator, loss_d, "discriminator phase"),
        (ParamGroup::Predictor, loss_pred, "predictor phase"),
    ] {
        model.store.zero_grad_group(group);
        tape.backward(loss, &mut model.store)?;
        check_grads(model, group, phase)?;
        opt.step(&mut model.store, group, lr);
    }
    Ok(stats)
}

/// Fresh model and optimizer for a config, plus the training rng positioned
/// after initialization.
pub fn initialize(cfg: &TrainConfig, data: &DatasetBundle) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut rng = RngState::seed(cfg.seed);
    let model = IcpModel::new(cfg.model_spec(data), &mut rng.fork())?;
    let optimizer = Optimizer::new(cfg.optimizer, &model.store);
    Ok(Checkpoint {
        config: cfg.clone(),
        model,
        optimizer,
        rng: rng.snapshot(),
        history: Vec::new(),
        normalization: Some(data.normalization.clone()),
    })
}

/// Trains for `cfg.epochs` epochs on `data.train`; deterministic given the seed.
pub fn train(cfg: &TrainConfig, data: &DatasetBundle) -> std::result::Result<Checkpoint, TrainError> {
    let ckpt = initialize(cfg, data)?;
    continue_training(ckpt, &data.train, cfg.epochs)
}

/// Runs `epochs` more epochs from a checkpoint.
pub fn continue_training(
    mut ckpt: Checkpoint,
    train_set: &Dataset,
    epochs: usize,
) -> std::result::Result<Checkpoint, TrainError> {
    let cfg = ckpt.config.clone();
    if cfg.augment != AugmentFlags::default() && !train_set.is_image() {
        return Err(Error::config("augmentation requested on vector data").into());
    }
    let n_data = train_set.len();
    if n_data < 2 {
        return Err(Error::data("training set needs at least 2 samples").into());
    }
    let mut rng = RngState::restore(&ckpt.rng);
    for _ in 0..epochs {
        let epoch = ckpt.history.len();
        let last_good = ckpt.clone();
        let diverged = |error: Error, batch: usize| {
            let diagnostic = error.to_string();
            TrainError {
                error: Error::Divergence { epoch, batch, diagnostic },
                last_good: Some(Box::new(last_good.clone())),
            }
        };
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n_data).collect();
        rng.shuffle(&mut order);
        let mut acc = StepStats::default();
        let mut batches = 0usize;
        let mut sums = (TermReport::default(), KlBreakdown::default(), 0.0, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let mut x = train_set.x.select_rows(idx);
            if cfg.augment != AugmentFlags::default() {
                x = augment(&x, cfg.augment, &mut rng)?;
            }
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let s = match train_step(&mut ckpt.model, &mut ckpt.optimizer, &cfg, lr, x, &labels, n_data, &mut rng) {
                Ok(s) => s,
                Err(e @ Error::NonFinite(_)) => return Err(diverged(e, b)),
                Err(e) => return Err(e.into()),
            };
            batches += 1;
            acc.correct += s.correct;
            acc.disc_correct += s.disc_correct;
            acc.rows += s.rows;
            let r = &mut sums.0;
            for (dst, src) in [
                (&mut r.ce_r, s.report.ce_r),
                (&mut r.ce_zeta, s.report.ce_zeta),
                (&mut r.ce_y, s.report.ce_y),
                (&mut r.mi_min, s.report.mi_min),
                (&mut r.js_gen, s.report.js_gen),
                (&mut r.pred_adv, s.report.pred_adv),
                (&mut r.kl, s.report.kl),
                (&mut r.total, s.report.total),
            ] {
                *dst += src;
            }
            sums.1 += s.kl;
            sums.2 += s.loss_d;
            sums.3 += s.loss_pred;
        }
        let nb = batches.max(1) as f64;
        let mut terms = sums.0;
        for v in [
            &mut terms.ce_r,
            &mut terms.ce_zeta,
            &mut terms.ce_y,
            &mut terms.mi_min,
            &mut terms.js_gen,
            &mut terms.pred_adv,
            &mut terms.kl,
            &mut terms.total,
        ] {
            *v /= nb;
        }
        ckpt.history.push(EpochMetrics {
            epoch,
            terms,
            kl: KlBreakdown { kl_xi: sums.1.kl_xi / nb, kl_z: sums.1.kl_z / nb, kl_u: sums.1.kl_u / nb },
            loss_d: sums.2 / nb,
            loss_pred: sums.3 / nb,
            train_acc: acc.correct as f64 / acc.rows.max(1) as f64,
            disc_acc: acc.disc_correct as f64 / (2 * acc.rows).max(1) as f64,
            mean_inclusion: ckpt.model.mean_inclusion(),
        });
        ckpt.rng = rng.snapshot();
    }
    Ok(ckpt)
}

// ── Prediction ─────────────────────────────────────────────────────────────

/// Runs `n_samples` discrete passes over `x` in chunks, calling `f(start, pass_output)`.
fn discrete_passes(
    model: &IcpModel,
    x: &Tensor,
    n_samples: usize,
    rng: &mut RngState,
    mut f: impl FnMut(usize, &crate::icp::Encoded<'_>) -> Result<()>,
) -> Result<()> {
    if n_samples == 0 {
        return Err(Error::config("n_samples must be at least 1"));
    }
    let n = x.shape()[0];
    let tau = Temperature::new(0.67)?;
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + PREDICT_CHUNK).min(n)).collect();
        let xb = x.select_rows(&idx);
        for _ in 0..n_samples {
            let tape = Tape::no_grad();
            let pass = Pass::new(&tape, &model.store, SampleMode::Discrete, tau);
            let enc = model.encode(&pass, tape.constant(xb.clone()), rng)?;
            f(start, &enc)?;
        }
        start += idx.len();
    }
    Ok(())
}

/// Class probabilities averaged over `n_samples` discrete posterior draws.
pub fn predict(model: &IcpModel, x: &Tensor, n_samples: usize, rng: &mut RngState) -> Result<Tensor> {
    let n = x.shape()[0];
    let t = model.spec.classes;
    let mut probs = vec![0.0; n * t];
    discrete_passes(model, x, n_samples, rng, |start, enc| {
        let p = enc.logits_r.softmax(1)?.value();
        for (dst, src) in probs[start * t..].iter_mut().zip(p.data()) {
            *dst += src;
        }
        Ok(())
    })?;
    let inv = 1.0 / n_samples as f64;
    probs.iter_mut().for_each(|p| *p *= inv);
    Tensor::new(&[n, t], probs)
}

pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let pred = argmax_rows(probs);
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
}

/// Representations averaged over discrete passes, each `[N, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub zeta: Tensor,
    pub y: Tensor,
    pub total: Tensor,
    pub conv: Option<Tensor>,
}

pub fn features(model: &IcpModel, x: &Tensor, n_samples: usize, rng: &mut RngState) -> Result<Features> {
    let n = x.shape()[0];
    let (dz, dy) = (model.spec.zeta_dim, model.spec.y_dim);
    let mut zeta = vec![0.0; n * dz];
    let mut y = vec![0.0; n * dy];
    let mut conv: Option<(usize, Vec<f64>)> = None;
    discrete_passes(model, x, n_samples, rng, |start, enc| {
        let add = |dst: &mut [f64], src: &Tensor| dst.iter_mut().zip(src.data()).for_each(|(d, s)| *d += s);
        add(&mut zeta[start * dz..], &enc.zeta.value());
        add(&mut y[start * dy..], &enc.y.value());
        if let Some(c) = enc.conv_feat {
            let v = c.value();
            let w = v.shape()[1];
            let (_, buf) = conv.get_or_insert_with(|| (w, vec![0.0; n * w]));
            add(&mut buf[start * w..], &v);
        }
        Ok(())
    })?;
    let inv = 1.0 / n_samples as f64;
    let finish = |mut v: Vec<f64>, d: usize| {
        v.iter_mut().for_each(|a| *a *= inv);
        Tensor::new(&[n, d], v)
    };
    let zeta = finish(zeta, dz)?;
    let y = finish(y, dy)?;
    let mut total = Vec::with_capacity(n * (dz + dy));
    for (zr, yr) in zeta.data().chunks(dz).zip(y.data().chunks(dy)) {
        total.extend_from_slice(zr);
        total.extend_from_slice(yr);
    }
    Ok(Features {
        total: Tensor::new(&[n, dz + dy], total)?,
        zeta,
        y,
        conv: conv.map(|(w, v)| finish(v, w)).transpose()?,
    })
}

// ── Compression ────────────────────────────────────────────────────────────

/// Removes every backbone gate component whose inclusion probability is below
/// `threshold`; returns the pruned checkpoint and the removed fraction.
pub fn compress(ckpt: &Checkpoint, threshold: f64) -> Result<(Checkpoint, f64)> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::config(format!("threshold must be in [0, 1), got {threshold}")));
    }
    let mut out = ckpt.clone();
    out.model.prune(threshold);
    let (removed, total) = out.model.component_counts();
    let ratio = if total == 0 { 0.0 } else { removed as f64 / total as f64 };
    Ok((out, ratio))
}

// ── Sweep ──────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub best: f64,
    pub best_seed: u64,
    pub mean: f64,
    pub std: f64,
}

impl SweepReport {
    pub fn from_runs(seeds: Vec<u64>, accuracies: Vec<f64>) -> Self {
        let k = accuracies.len().max(1) as f64;
        let mean = accuracies.iter().sum::<f64>() / k;
        let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / k;
        let (bi, best) = accuracies
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, b), (i, &a)| if a > b { (i, a) } else { (bi, b) });
        SweepReport { best_seed: seeds.get(bi).copied().unwrap_or(0), seeds, accuracies, best, mean, std: var.sqrt() }
    }
}

/// Trains `k` seeds (`cfg.seed`, `cfg.seed + 1`, ...) and scores each by
/// `n_samples`-averaged test accuracy.
pub fn sweep(cfg: &TrainConfig, data: &DatasetBundle, k: usize, n_samples: usize) -> Result<SweepReport> {
    let mut seeds = Vec::with_capacity(k);
    let mut accs = Vec::with_capacity(k);
    for i in 0..k as u64 {
        let run = TrainConfig { seed: cfg.seed + i, ..cfg.clone() };
        let ckpt = train(&run, data)?;
        let probs = predict(&ckpt.model, &data.test.x, n_samples, &mut prediction_rng(run.seed))?;
        seeds.push(run.seed);
        accs.push(accuracy(&probs, &data.test.labels));
    }
    Ok(SweepReport::from_runs(seeds, accs))
}

/// Prediction stream derived from the training seed.
pub fn prediction_rng(seed: u64) -> RngState {
    RngState::seed(seed ^ 0x9e37_79b9_7f4a_7c15)
}
