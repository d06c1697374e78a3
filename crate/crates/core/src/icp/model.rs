use serde::{Deserialize, Serialize};

use crate::bayes::KlBreakdown;
use crate::error::{Error, Result};
use crate::lwta::{ConvLwta, DenseLwta, LayerOptions, LayerSample, LwtaCore, Pass, WinnerMode};
use crate::samplers::{sample_gaussian, RngState};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Floor on the ζ scale so `log σ²` stays finite.
const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    /// Two dense LWTA layers of width 16.
    MlpTiny,
    /// Three conv LWTA layers (widths 8, 16, 32; 3×3 kernels) with two 2×2
    /// average pools, then a dense LWTA head of width 32.
    CnnMini,
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-tiny" => Ok(Arch::MlpTiny),
            "cnn-mini" => Ok(Arch::CnnMini),
            _ => Err(Error::config(format!("unknown architecture '{s}' (mlp-tiny|cnn-mini)"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::MlpTiny => "mlp-tiny",
            Arch::CnnMini => "cnn-mini",
        })
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    /// Per-sample input shape: `[J]` or `[H, W, C]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub competitors: usize,
    pub winner: WinnerMode,
    pub gates: bool,
    pub bias: bool,
    pub zeta_dim: usize,
    pub y_dim: usize,
    /// Hidden width of the discriminator and the cross-predictors.
    pub aux_hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, inputs: usize, outputs: usize, rng: &mut RngState) -> Self {
        let bound = (3.0 / inputs as f64).sqrt();
        let w: Vec<f64> = (0..inputs * outputs).map(|_| bound * (2.0 * rng.uniform() - 1.0)).collect();
        Linear {
            weight: store.add(format!("{name}.weight"), group, Tensor::new(&[inputs, outputs], w).expect("shape")),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(&[outputs])),
            inputs,
            outputs,
        }
    }

    pub fn forward<'t>(&self, pass: &Pass<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(pass.param(self.weight))?.add(pass.param(self.bias))
    }
}

/// One dense LWTA hidden layer followed by a linear readout.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: DenseLwta,
    pub out: Linear,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        spec: &ModelSpec,
        rng: &mut RngState,
    ) -> Result<Self> {
        let u = spec.competitors;
        let layer = DenseLwta::new(store, &format!("{name}.hidden"), group, inputs, hidden / u, u, spec.layer_options(), rng)?;
        Ok(Mlp { hidden: layer, out: Linear::new(store, &format!("{name}.out"), group, hidden, outputs, rng) })
    }

    pub fn forward<'t>(&self, pass: &Pass<'t, '_>, x: Var<'t>, rng: &mut RngState) -> Result<(Var<'t>, LayerSample<'t>)> {
        let (h, s) = self.hidden.forward(pass, x, rng)?;
        Ok((self.out.forward(pass, h)?, s))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Dense(DenseLwta),
    Conv(ConvLwta),
    Pool,
    Flatten,
}

/// Forward products of the encoder and the three classifiers.
pub struct Encoded<'t> {
    pub feat: Var<'t>,
    /// Flattened output of the last convolutional layer, if any.
    pub conv_feat: Option<Var<'t>>,
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
    pub zeta: Var<'t>,
    pub y: Var<'t>,
    pub r: Var<'t>,
    pub logits_r: Var<'t>,
    pub logits_zeta: Var<'t>,
    pub logits_y: Var<'t>,
    /// One record per backbone LWTA layer, in order.
    pub samples: Vec<LayerSample<'t>>,
}

/// Shared LWTA backbone, ζ/y heads, three classifiers, and the adversaries.
#[derive(Clone, Debug, PartialEq)]
pub struct IcpModel {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub backbone: Vec<Stage>,
    pub feat_dim: usize,
    pub zeta_head: Linear,
    pub y_head: Linear,
    pub cls_r: Linear,
    pub cls_zeta: Linear,
    pub cls_y: Linear,
    pub disc: Mlp,
    pub pred_y_from_zeta: Mlp,
    pub pred_zeta_from_y: Mlp,
}

impl ModelSpec {
    fn layer_options(&self) -> LayerOptions {
        LayerOptions { winner: self.winner, use_gates: self.gates, bias: self.bias }
    }

    fn validate(&self) -> Result<()> {
        let u = self.competitors;
        let mut widths = vec![16, self.aux_hidden];
        if self.arch == Arch::CnnMini {
            widths.extend([8, 32]);
        }
        if u == 0 || widths.iter().any(|w| w % u != 0) {
            return Err(Error::config(format!(
                "competitors U={u} must divide every layer width {widths:?}"
            )));
        }
        if self.classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        if self.zeta_dim == 0 || self.y_dim == 0 {
            return Err(Error::config("zeta_dim and y_dim must be positive"));
        }
        if self.arch == Arch::CnnMini {
            match self.input_shape.as_slice() {
                [h, w, _] if h % 4 == 0 && w % 4 == 0 => {}
                s => {
                    return Err(Error::config(format!(
                        "cnn-mini needs [H, W, C] input with H, W divisible by 4, got {s:?}"
                    )))
                }
            }
        }
        Ok(())
    }
}

impl IcpModel {
    pub fn new(spec: ModelSpec, rng: &mut RngState) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let u = spec.competitors;
        let opts = spec.layer_options();
        let main = ParamGroup::Main;
        let mut backbone = Vec::new();
        let feat_dim = match spec.arch {
            Arch::MlpTiny => {
                if spec.input_shape.len() > 1 {
                    backbone.push(Stage::Flatten);
                }
                let j: usize = spec.input_shape.iter().product();
                backbone.push(Stage::Dense(DenseLwta::new(&mut store, "backbone.0", main, j, 16 / u, u, opts, rng)?));
                backbone.push(Stage::Dense(DenseLwta::new(&mut store, "backbone.1", main, 16, 16 / u, u, opts, rng)?));
                16
            }
            Arch::CnnMini => {
                let (h, w, c) = (spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]);
                backbone.push(Stage::Conv(ConvLwta::new(&mut store, "backbone.0", main, c, 3, 8 / u, u, opts, rng)?));
                backbone.push(Stage::Conv(ConvLwta::new(&mut store, "backbone.1", main, 8, 3, 16 / u, u, opts, rng)?));
                backbone.push(Stage::Pool);
                backbone.push(Stage::Conv(ConvLwta::new(&mut store, "backbone.2", main, 16, 3, 32 / u, u, opts, rng)?));
                backbone.push(Stage::Pool);
                backbone.push(Stage::Flatten);
                let flat = (h / 4) * (w / 4) * 32;
                backbone.push(Stage::Dense(DenseLwta::new(&mut store, "backbone.3", main, flat, 32 / u, u, opts, rng)?));
                32
            }
        };
        let (dz, dy, t) = (spec.zeta_dim, spec.y_dim, spec.classes);
        let zeta_head = Linear::new(&mut store, "zeta_head", main, feat_dim, 2 * dz, rng);
        let y_head = Linear::new(&mut store, "y_head", main, feat_dim, dy, rng);
        let cls_r = Linear::new(&mut store, "cls_r", main, dz + dy, t, rng);
        let cls_zeta = Linear::new(&mut store, "cls_zeta", main, dz, t, rng);
        let cls_y = Linear::new(&mut store, "cls_y", main, dy, t, rng);
        let ah = spec.aux_hidden;
        let disc = Mlp::new(&mut store, "disc", ParamGroup::Discriminator, dy + feat_dim, ah, 1, &spec, rng)?;
        let pred_y_from_zeta = Mlp::new(&mut store, "pred_yz", ParamGroup::Predictor, dz, ah, dy, &spec, rng)?;
        let pred_zeta_from_y = Mlp::new(&mut store, "pred_zy", ParamGroup::Predictor, dy, ah, dz, &spec, rng)?;
        Ok(IcpModel {
            spec,
            store,
            backbone,
            feat_dim,
            zeta_head,
            y_head,
            cls_r,
            cls_zeta,
            cls_y,
            disc,
            pred_y_from_zeta,
            pred_zeta_from_y,
        })
    }

    /// Runs the backbone, samples ζ, and evaluates the three classifiers.
    pub fn encode<'t>(&self, pass: &Pass<'t, '_>, x: Var<'t>, rng: &mut RngState) -> Result<Encoded<'t>> {
        let n = x.shape()[0];
        let mut h = x;
        let mut conv_feat = None;
        let mut samples = Vec::new();
        for stage in &self.backbone {
            h = match stage {
                Stage::Dense(l) => {
                    let (y, s) = l.forward(pass, h, rng)?;
                    samples.push(s);
                    y
                }
                Stage::Conv(l) => {
                    let (y, s) = l.forward(pass, h, rng)?;
                    samples.push(s);
                    conv_feat = Some(y);
                    y
                }
                Stage::Pool => h.avg_pool2()?,
                Stage::Flatten => {
                    let width = h.numel() / n.max(1);
                    h.reshape(&[n, width])?
                }
            };
        }
        let conv_feat = match conv_feat {
            Some(c) => Some(c.reshape(&[n, c.numel() / n.max(1)])?),
            None => None,
        };
        let feat = h;
        let dz = self.spec.zeta_dim;
        let zh = self.zeta_head.forward(pass, feat)?;
        let mu = zh.slice(1, 0, dz)?;
        let sigma = zh.slice(1, dz, dz)?.softplus().clamp(SIGMA_FLOOR, f64::INFINITY);
        let zeta = sample_gaussian(mu, sigma, rng)?;
        let y = self.y_head.forward(pass, feat)?;
        let r = Var::concat(&[zeta, y], 1)?;
        Ok(Encoded {
            feat,
            conv_feat,
            mu,
            sigma,
            zeta,
            y,
            r,
            logits_r: self.cls_r.forward(pass, r)?,
            logits_zeta: self.cls_zeta.forward(pass, zeta)?,
            logits_y: self.cls_y.forward(pass, y)?,
            samples,
        })
    }

    pub fn backbone_cores(&self) -> impl Iterator<Item = &LwtaCore> {
        self.backbone.iter().filter_map(|s| match s {
            Stage::Dense(l) => Some(&l.core),
            Stage::Conv(l) => Some(&l.core),
            _ => None,
        })
    }

    /// Every LWTA layer, backbone first, then discriminator and predictors.
    pub fn all_cores(&self) -> impl Iterator<Item = &LwtaCore> {
        self.backbone_cores().chain([
            &self.disc.hidden.core,
            &self.pred_y_from_zeta.hidden.core,
            &self.pred_zeta_from_y.hidden.core,
        ])
    }

    /// Summed backbone KL for one encode pass.
    pub fn backbone_kl<'t>(&self, samples: &[LayerSample<'t>], omega: f64) -> Result<(Var<'t>, KlBreakdown)> {
        let cores: Vec<&LwtaCore> = self.backbone_cores().collect();
        if cores.len() != samples.len() {
            return Err(Error::contract("sample records do not match the backbone"));
        }
        let mut total: Option<Var<'t>> = None;
        let mut parts = KlBreakdown::default();
        for (core, rec) in cores.iter().zip(samples) {
            let kl = core.layer_kl(rec, omega)?;
            parts += kl.breakdown();
            let t = kl.total()?;
            total = Some(match total {
                Some(acc) => acc.add(t)?,
                None => t,
            });
        }
        let total = total.ok_or_else(|| Error::contract("backbone has no LWTA layers"))?;
        Ok((total, parts))
    }

    /// Prunes backbone gates below `threshold`; returns the number removed.
    pub fn prune(&mut self, threshold: f64) -> usize {
        let store = &mut self.store;
        self.backbone
            .iter_mut()
            .map(|s| match s {
                Stage::Dense(l) => l.prune(store, threshold),
                Stage::Conv(l) => l.prune(store, threshold),
                _ => 0,
            })
            .sum()
    }

    /// (removed, total) backbone gate components.
    pub fn component_counts(&self) -> (usize, usize) {
        self.backbone_cores()
            .filter_map(|c| c.gates.as_ref())
            .fold((0, 0), |(r, t), g| (r + g.removed(), t + g.components()))
    }

    /// Pruning masks keyed by layer name.
    pub fn masks(&self) -> Vec<(String, Vec<bool>)> {
        self.all_cores()
            .filter_map(|c| c.gates.as_ref().map(|g| (c.name.clone(), g.pruned.clone())))
            .collect()
    }

    pub fn set_mask(&mut self, name: &str, mask: Vec<bool>) -> Result<()> {
        let mut cores: Vec<&mut LwtaCore> = self
            .backbone
            .iter_mut()
            .filter_map(|s| match s {
                Stage::Dense(l) => Some(&mut l.core),
                Stage::Conv(l) => Some(&mut l.core),
                _ => None,
            })
            .collect();
        cores.push(&mut self.disc.hidden.core);
        cores.push(&mut self.pred_y_from_zeta.hidden.core);
        cores.push(&mut self.pred_zeta_from_y.hidden.core);
        let core = cores
            .into_iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::data(format!("mask for unknown layer '{name}'")))?;
        let gates = core
            .gates
            .as_mut()
            .ok_or_else(|| Error::data(format!("layer '{name}' has no gates")))?;
        if gates.pruned.len() != mask.len() {
            return Err(Error::data(format!("mask length mismatch for layer '{name}'")));
        }
        gates.pruned = mask;
        Ok(())
    }

    /// Mean posterior inclusion probability over all backbone gates.
    pub fn mean_inclusion(&self) -> f64 {
        let q: Vec<f64> = self
            .backbone_cores()
            .filter_map(|c| c.gates.as_ref())
            .flat_map(|g| g.inclusion(&self.store))
            .collect();
        if q.is_empty() {
            1.0
        } else {
            q.iter().sum::<f64>() / q.len() as f64
        }
    }
}
