use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icp::{IcpModel, Stage};
use crate::lwta::{LayerSample, LwtaCore, Pass, SampleMode};
use crate::samplers::{RngState, Temperature};
use crate::tensor::{Tape, Tensor};
use crate::train::PREDICT_CHUNK;

/// A block is dead when one competitor wins more often than this.
pub const DEAD_BLOCK_SHARE: f64 = 0.99;
pub const GATE_BINS: usize = 10;

/// Winner statistics of one LWTA layer, accumulated over samples and passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub name: String,
    pub conv: bool,
    pub blocks: usize,
    pub competitors: usize,
    /// Mean fraction of units that won their block.
    pub active_fraction: f64,
    /// Extremes of the per-sample active fraction.
    pub min_active_fraction: f64,
    pub max_active_fraction: f64,
    /// `[block][competitor]` win counts.
    pub winner_hist: Vec<Vec<u64>>,
    /// Winner-usage entropy per block, in nats.
    pub entropy: Vec<f64>,
    pub dead_blocks: Vec<usize>,
    /// Histogram of gate inclusion probabilities over `[0, 1]`.
    pub gate_hist: Vec<u64>,
}

impl LayerSparsity {
    pub fn new(core: &LwtaCore, conv: bool) -> Self {
        LayerSparsity {
            name: core.name.clone(),
            conv,
            blocks: core.blocks,
            competitors: core.competitors,
            active_fraction: 0.0,
            min_active_fraction: f64::INFINITY,
            max_active_fraction: f64::NEG_INFINITY,
            winner_hist: vec![vec![0; core.competitors]; core.blocks],
            entropy: vec![0.0; core.blocks],
            dead_blocks: Vec::new(),
            gate_hist: vec![0; GATE_BINS],
        }
    }

    /// Adds the winners of one discrete pass. Without winner indicators the
    /// active set is the set of positive outputs.
    pub fn observe(&mut self, sample: &LayerSample<'_>, seen: &mut usize) -> Result<()> {
        if sample.mode != SampleMode::Discrete {
            return Err(Error::contract("sparsity is measured on discrete passes"));
        }
        let (b, u) = (self.blocks, self.competitors);
        let active = match sample.xi {
            Some(xi) => xi.value(),
            None => sample.output.value().map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        };
        let n = active.shape()[0];
        let per_sample = active.len() / n.max(1);
        for s in active.data().chunks(per_sample) {
            let frac = s.iter().filter(|&&v| v != 0.0).count() as f64 / per_sample as f64;
            self.min_active_fraction = self.min_active_fraction.min(frac);
            self.max_active_fraction = self.max_active_fraction.max(frac);
            let k = (*seen + 1) as f64;
            self.active_fraction += (frac - self.active_fraction) / k;
            *seen += 1;
            for (r, row) in s.chunks(u).enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    if v != 0.0 {
                        self.winner_hist[r % b][c] += 1;
                    }
                }
            }
        }
        Ok(())
    }

    /// Computes entropies, dead blocks and the gate histogram.
    pub fn finish(&mut self, inclusion: &[f64]) {
        self.dead_blocks.clear();
        for (blk, counts) in self.winner_hist.iter().enumerate() {
            let total: u64 = counts.iter().sum();
            if total == 0 {
                self.entropy[blk] = 0.0;
                continue;
            }
            let t = total as f64;
            self.entropy[blk] = counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / t;
                    -p * p.ln()
                })
                .sum();
            if counts.iter().any(|&c| c as f64 / t > DEAD_BLOCK_SHARE) {
                self.dead_blocks.push(blk);
            }
        }
        self.gate_hist = vec![0; GATE_BINS];
        for &q in inclusion {
            let bin = ((q * GATE_BINS as f64) as usize).min(GATE_BINS - 1);
            self.gate_hist[bin] += 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
    pub samples: usize,
    pub passes: usize,
}

impl SparsityReport {
    pub fn lines(&self) -> Vec<String> {
        let mut out = vec![format!("sparsity_samples={}", self.samples), format!("sparsity_passes={}", self.passes)];
        let join = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        for l in &self.layers {
            let p = &l.name;
            out.push(format!("{p}.active_fraction={}", l.active_fraction));
            out.push(format!("{p}.min_active_fraction={}", l.min_active_fraction));
            out.push(format!("{p}.max_active_fraction={}", l.max_active_fraction));
            let mean_h = l.entropy.iter().sum::<f64>() / l.entropy.len().max(1) as f64;
            out.push(format!("{p}.mean_winner_entropy={mean_h}"));
            out.push(format!("{p}.dead_blocks={}", l.dead_blocks.len()));
            for (b, h) in l.winner_hist.iter().enumerate() {
                out.push(format!("{p}.block{b}.winners={}", join(h)));
            }
            out.push(format!("{p}.gate_hist={}", join(&l.gate_hist)));
        }
        out
    }
}

/// Winner usage of every backbone LWTA layer over `passes` discrete passes of `x`.
pub fn sparsity_report(model: &IcpModel, x: &Tensor, passes: usize, rng: &mut RngState) -> Result<SparsityReport> {
    if passes == 0 {
        return Err(Error::config("sparsity needs at least one pass"));
    }
    let mut layers: Vec<LayerSparsity> = model
        .backbone
        .iter()
        .filter_map(|s| match s {
            Stage::Dense(l) => Some(LayerSparsity::new(&l.core, false)),
            Stage::Conv(l) => Some(LayerSparsity::new(&l.core, true)),
            _ => None,
        })
        .collect();
    let mut seen = vec![0usize; layers.len()];
    let tau = Temperature::new(0.67)?;
    let n = x.shape()[0];
    for chunk in (0..n).collect::<Vec<_>>().chunks(PREDICT_CHUNK) {
        let xb = x.select_rows(chunk);
        for _ in 0..passes {
            let tape = Tape::no_grad();
            let pass = Pass::new(&tape, &model.store, SampleMode::Discrete, tau);
            let enc = model.encode(&pass, tape.constant(xb.clone()), rng)?;
            for ((layer, s), seen) in layers.iter_mut().zip(&enc.samples).zip(&mut seen) {
                layer.observe(s, seen)?;
            }
        }
    }
    for (layer, core) in layers.iter_mut().zip(model.backbone_cores()) {
        let q = core.gates.as_ref().map(|g| g.inclusion(&model.store)).unwrap_or_default();
        layer.finish(&q);
    }
    Ok(SparsityReport { layers, samples: n, passes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_preset;
    use crate::icp::{Arch, ModelSpec};
    use crate::lwta::WinnerMode;

    fn spec(arch: Arch, shape: &[usize], u: usize) -> ModelSpec {
        ModelSpec {
            arch,
            input_shape: shape.to_vec(),
            classes: 10,
            competitors: u,
            winner: WinnerMode::Stochastic,
            gates: true,
            bias: false,
            zeta_dim: 4,
            y_dim: 4,
            aux_hidden: 16,
        }
    }

    #[test]
    fn discrete_fraction_is_one_over_u() {
        let data = load_preset("digits8x8", 0).unwrap();
        let x = data.x.select_rows(&(0..12).collect::<Vec<_>>());
        for u in [2, 4] {
            let model = IcpModel::new(spec(Arch::CnnMini, &[8, 8, 1], u), &mut RngState::seed(3)).unwrap();
            let rep = sparsity_report(&model, &x, 2, &mut RngState::seed(4)).unwrap();
            for l in &rep.layers {
                assert_eq!(l.min_active_fraction, 1.0 / u as f64, "{}", l.name);
                assert_eq!(l.max_active_fraction, 1.0 / u as f64, "{}", l.name);
            }
        }
    }

    #[test]
    fn report_lines_are_key_value() {
        let model = IcpModel::new(spec(Arch::MlpTiny, &[2], 2), &mut RngState::seed(0)).unwrap();
        let x = Tensor::new(&[3, 2], vec![0.1, 0.2, -0.3, 0.4, 1.0, -1.0]).unwrap();
        let rep = sparsity_report(&model, &x, 1, &mut RngState::seed(0)).unwrap();
        assert!(rep.lines().iter().all(|l| l.split_once('=').is_some()));
        assert_eq!(rep.layers[0].gate_hist.iter().sum::<u64>(), 2 * 8);
    }
}
