//! Sweep protocols: how `L`, `N` and `m` follow `(V, d)`, and which trainer runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::Arch;
use crate::trainer::{AdamHyper, ThreeStepHyper};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum LRule {
    /// `L = ⌈V^exponent⌉`.
    Power { exponent: f64 },
    /// `L = V`.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum NRule {
    /// `N = ⌈c·V·ln V⌉`.
    VLogV { multiplier: f64 },
    /// `N = ⌈V^1.5⌉`.
    Pow15,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MRule {
    Zero,
    DSquared,
    DCubed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchRule {
    /// `⌊N/2⌋`.
    Half,
    /// `⌊N/16⌋`.
    Sixteenth,
}

impl BatchRule {
    pub fn size(self, n: usize) -> usize {
        match self {
            BatchRule::Half => (n / 2).max(1),
            BatchRule::Sixteenth => (n / 16).max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainerSpec {
    ThreeStep {
        #[serde(default = "default_true")]
        auto_scale: bool,
        /// Fixed rates; absent values fall back to `η = 0.05/√V`, `γ = 10·V·L²`.
        #[serde(default)]
        eta: Option<f64>,
        #[serde(default)]
        gamma: Option<f64>,
    },
    Adam {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps_adam: f64,
        #[serde(default = "default_batch")]
        batch: BatchRule,
        #[serde(default = "default_epochs")]
        epochs: usize,
        #[serde(default = "default_true")]
        layer_norm: bool,
    },
}

fn default_true() -> bool {
    true
}
fn default_lr() -> f64 {
    0.005
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch() -> BatchRule {
    BatchRule::Half
}
fn default_epochs() -> usize {
    16
}

impl TrainerSpec {
    pub fn three_step_auto() -> Self {
        TrainerSpec::ThreeStep { auto_scale: true, eta: None, gamma: None }
    }

    pub fn adam_default() -> Self {
        TrainerSpec::Adam {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps_adam: default_eps(),
            batch: BatchRule::Half,
            epochs: default_epochs(),
            layer_norm: true,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainerSpec::ThreeStep { .. } => "three_step",
            TrainerSpec::Adam { .. } => "adam",
        }
    }

    pub fn three_step_hyper(&self, v: usize, l: usize) -> Option<ThreeStepHyper> {
        match *self {
            TrainerSpec::ThreeStep { auto_scale: true, .. } => Some(ThreeStepHyper::auto()),
            TrainerSpec::ThreeStep { auto_scale: false, eta, gamma } => {
                let base = ThreeStepHyper::defaults_for(v, l);
                Some(ThreeStepHyper::fixed(eta.unwrap_or(base.eta), gamma.unwrap_or(base.gamma)))
            }
            TrainerSpec::Adam { .. } => None,
        }
    }

    pub fn adam_hyper(&self, n: usize, shuffle_seed: u64) -> Option<AdamHyper> {
        match *self {
            TrainerSpec::Adam { lr, beta1, beta2, eps_adam, batch, epochs, .. } => Some(AdamHyper {
                lr,
                beta1,
                beta2,
                eps_adam,
                batch_size: batch.size(n),
                epochs,
                shuffle_seed,
            }),
            TrainerSpec::ThreeStep { .. } => None,
        }
    }

    /// Accuracy rows produced per (cell, seed).
    pub fn rows_per_run(&self) -> usize {
        match *self {
            TrainerSpec::ThreeStep { .. } => 1,
            TrainerSpec::Adam { epochs, .. } => {
                AdamHyper { epochs, ..AdamHyper::defaults_for(2, 0) }.snapshot_epochs().len()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepProtocol {
    pub arch: Arch,
    pub l_rule: LRule,
    pub n_rule: NRule,
    pub m_rule: MRule,
    pub trainer: TrainerSpec,
    pub v_grid: Vec<usize>,
    pub d_grid: Vec<usize>,
    pub seeds_per_cell: usize,
    pub n_eval: usize,
}

/// One `(V, d)` point with its derived sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub m: usize,
}

impl Cell {
    /// Work proxy `N·L·d`.
    pub fn cost(&self) -> u128 {
        self.n as u128 * self.l as u128 * self.d as u128
    }
}

/// `n` integers log-spaced over `[lo, hi]`, deduplicated.
pub fn log_spaced(lo: usize, hi: usize, n: usize) -> Vec<usize> {
    if n <= 1 || lo >= hi {
        return vec![lo];
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let mut out: Vec<usize> =
        (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp().round() as usize).collect();
    out.dedup();
    out
}

impl Default for SweepProtocol {
    fn default() -> Self {
        Self::default_attention_only()
    }
}

impl SweepProtocol {
    /// Three-step Attention-only sweep with `L = ⌈√V⌉`, `N = ⌈V ln V⌉`.
    pub fn default_attention_only() -> Self {
        Self {
            arch: Arch::AttentionOnly,
            l_rule: LRule::Power { exponent: 0.5 },
            n_rule: NRule::VLogV { multiplier: 1.0 },
            m_rule: MRule::Zero,
            trainer: TrainerSpec::three_step_auto(),
            v_grid: vec![64, 96, 128, 192, 256, 384, 512],
            d_grid: log_spaced(8, 128, 10),
            seeds_per_cell: 3,
            n_eval: 2000,
        }
    }

    pub fn seq_len(&self, v: usize) -> usize {
        match self.l_rule {
            LRule::Power { exponent } => ((v as f64).powf(exponent) - 1e-9).ceil().max(1.0) as usize,
            LRule::Linear => v,
        }
    }

    pub fn n_samples(&self, v: usize) -> usize {
        let vf = v as f64;
        match self.n_rule {
            NRule::VLogV { multiplier } => (multiplier * vf * vf.ln() - 1e-9).ceil().max(1.0) as usize,
            NRule::Pow15 => (vf.powf(1.5) - 1e-9).ceil() as usize,
        }
    }

    pub fn mlp_width(&self, d: usize) -> usize {
        match self.m_rule {
            MRule::Zero => 0,
            MRule::DSquared => d * d,
            MRule::DCubed => d * d * d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.v_grid.is_empty() || self.d_grid.is_empty() {
            return bad("v_grid and d_grid must be non-empty".into());
        }
        for (name, g) in [("v_grid", &self.v_grid), ("d_grid", &self.d_grid)] {
            if !g.windows(2).all(|w| w[0] < w[1]) {
                return bad(format!("{name} must be strictly ascending"));
            }
        }
        if self.v_grid[0] < 2 || self.d_grid[0] < 1 {
            return bad("V must be >= 2 and d >= 1".into());
        }
        if self.seeds_per_cell == 0 || self.n_eval == 0 {
            return bad("seeds_per_cell and n_eval must be positive".into());
        }
        match (self.arch, self.m_rule) {
            (Arch::AttentionOnly, MRule::Zero) => {}
            (Arch::AttentionOnly, _) => return bad("Attention-only requires m_rule = zero".into()),
            (Arch::AttentionMlp, MRule::Zero) => return bad("Attention-MLP requires m_rule d_squared or d_cubed".into()),
            _ => {}
        }
        if let LRule::Power { exponent } = self.l_rule {
            if !(exponent > 0.0 && exponent <= 1.0) {
                return bad(format!("L exponent must lie in (0, 1], got {exponent}"));
            }
        }
        if let NRule::VLogV { multiplier } = self.n_rule {
            if !(multiplier > 0.0 && multiplier.is_finite()) {
                return bad(format!("N multiplier must be positive, got {multiplier}"));
            }
        }
        if let TrainerSpec::Adam { lr, beta1, beta2, eps_adam, .. } = self.trainer {
            if !(lr >= 0.0 && beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0 && eps_adam > 0.0) {
                return bad("Adam hyper-parameters out of range".into());
            }
        }
        Ok(())
    }

    /// Cells in canonical `(V, d)` order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::with_capacity(self.v_grid.len() * self.d_grid.len());
        for &v in &self.v_grid {
            for &d in &self.d_grid {
                out.push(Cell { v, l: self.seq_len(v), n: self.n_samples(v), d, m: self.mlp_width(d) });
            }
        }
        out
    }

    /// `Σ_cells N·L·d`, times the seed count.
    pub fn total_cost(&self) -> u128 {
        self.cells().iter().map(Cell::cost).sum::<u128>() * self.seeds_per_cell as u128
    }

    pub fn describe(&self) -> String {
        let l = match self.l_rule {
            LRule::Power { exponent } => format!("L=ceil(V^{exponent})"),
            LRule::Linear => "L=V".into(),
        };
        let n = match self.n_rule {
            NRule::VLogV { multiplier } if multiplier == 1.0 => "N=ceil(V ln V)".to_string(),
            NRule::VLogV { multiplier } => format!("N=ceil({multiplier} V ln V)"),
            NRule::Pow15 => "N=ceil(V^1.5)".into(),
        };
        let m = match self.m_rule {
            MRule::Zero => "m=0",
            MRule::DSquared => "m=d^2",
            MRule::DCubed => "m=d^3",
        };
        format!("{} {} {l} {n} {m}", self.arch.name(), self.trainer.name())
    }
}
