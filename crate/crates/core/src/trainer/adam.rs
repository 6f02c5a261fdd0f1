//! Mini-batch Adam from zero initialization with per-epoch shuffling.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grad::{grad_with_loss, GradTarget};
use crate::activation::Activation;
use crate::embed::EmbeddingSet;
use crate::error::{Error, Result};
use crate::model::{accuracy_on, AccuracyEstimate, LayerNormConfig, ModelParams};
use crate::rng::{derived_rng, Role};
use crate::taskgen::{sample_example, Arch, Dataset, Example};

/// Epochs at which accuracy is recorded, clipped to the run length.
pub const SNAPSHOT_EPOCHS: [usize; 4] = [1, 2, 8, 16];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle_seed: u64,
}

impl AdamHyper {
    /// `lr = 0.005`, 16 epochs, batch `⌊N/2⌋`.
    pub fn defaults_for(n_samples: usize, shuffle_seed: u64) -> Self {
        Self {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            batch_size: (n_samples / 2).max(1),
            epochs: 16,
            shuffle_seed,
        }
    }

    pub fn validate(&self, n_samples: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!("betas must lie in (0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.eps_adam > 0.0) {
            return bad(format!("eps_adam must be positive, got {}", self.eps_adam));
        }
        if self.batch_size == 0 || self.batch_size > n_samples {
            return bad(format!("batch_size must lie in [1, {n_samples}], got {}", self.batch_size));
        }
        Ok(())
    }

    /// Snapshot epochs for this run; `[0]` when no training happens.
    pub fn snapshot_epochs(&self) -> Vec<usize> {
        if self.epochs == 0 {
            return vec![0];
        }
        let mut out: Vec<usize> = SNAPSHOT_EPOCHS.iter().copied().filter(|&e| e <= self.epochs).collect();
        if out.last() != Some(&self.epochs) {
            out.push(self.epochs);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub epoch: usize,
    pub params: ModelParams,
    pub accuracy: AccuracyEstimate,
    /// Mean mini-batch loss over the epoch (NaN at epoch 0).
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamRun {
    pub snapshots: Vec<AdamSnapshot>,
    pub final_params: ModelParams,
}

struct Moments {
    m: Array2<f64>,
    v: Array2<f64>,
}

impl Moments {
    fn zeros(dim: (usize, usize)) -> Self {
        Self { m: Array2::zeros(dim), v: Array2::zeros(dim) }
    }

    fn step(&mut self, param: &mut Array2<f64>, g: &Array2<f64>, h: &AdamHyper, t: i32) {
        let c1 = 1.0 - h.beta1.powi(t);
        let c2 = 1.0 - h.beta2.powi(t);
        ndarray::Zip::from(param).and(&mut self.m).and(&mut self.v).and(g).for_each(|p, m, v, &g| {
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            *p -= h.lr * (*m / c1) / ((*v / c2).sqrt() + h.eps_adam);
        });
    }
}

/// Fisher–Yates shuffle of `0..n` for one epoch.
pub fn epoch_order(n: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = derived_rng(shuffle_seed, Role::Shuffle, epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Trains `(V, W_KQ)` from zero. Accuracy snapshots are evaluated on one set
/// of `n_eval` fresh examples drawn from `rng` before training.
#[allow(clippy::too_many_arguments)]
pub fn adam_train<R: Rng + ?Sized>(
    dataset: &Dataset,
    emb: &EmbeddingSet,
    act: Option<&Activation>,
    ln: &LayerNormConfig,
    hyper: &AdamHyper,
    arch: Arch,
    n_eval: usize,
    rng: &mut R,
) -> Result<AdamRun> {
    hyper.validate(dataset.len())?;
    ln.validate()?;
    if emb.arch() != arch {
        return Err(Error::ArchMismatch(format!("embeddings are {}, requested {}", emb.arch().name(), arch.name())));
    }
    if n_eval == 0 {
        return Err(Error::InvalidArgument("n_eval must be >= 1".into()));
    }
    let eval: Vec<Example> =
        (0..n_eval).map(|_| sample_example(&dataset.config, &dataset.perm, rng)).collect::<Result<_>>()?;

    let mut params = ModelParams::zeros_for(emb);
    let mut mv = Moments::zeros(params.value.dim());
    let mut mw = Moments::zeros(params.key_query.dim());
    let wanted = hyper.snapshot_epochs();
    let mut snapshots = Vec::with_capacity(wanted.len());
    if wanted == [0] {
        let accuracy = accuracy_on(&eval, &params, emb, act, ln)?;
        snapshots.push(AdamSnapshot { epoch: 0, params: params.clone(), accuracy, train_loss: f64::NAN });
    }
    let mut t = 0i32;
    let mut batch: Vec<Example> = Vec::with_capacity(hyper.batch_size);
    for epoch in 1..=hyper.epochs {
        let order = epoch_order(dataset.len(), hyper.shuffle_seed, epoch);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for idx in order.chunks(hyper.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| dataset.examples[i].clone()));
            let g = grad_with_loss(&params, &batch, emb, act, ln, GradTarget::Both)?;
            if !g.mean_loss.is_finite() || !g.grad.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss or gradient in epoch {epoch}")));
            }
            t += 1;
            mv.step(&mut params.value, &g.grad.g_value, hyper, t);
            mw.step(&mut params.key_query, &g.grad.g_key_query, hyper, t);
            if !params.is_finite() {
                return Err(Error::Divergence(format!("non-finite parameters in epoch {epoch}")));
            }
            loss_sum += g.mean_loss;
            n_batches += 1;
        }
        if wanted.contains(&epoch) {
            let accuracy = accuracy_on(&eval, &params, emb, act, ln)?;
            snapshots.push(AdamSnapshot {
                epoch,
                params: params.clone(),
                accuracy,
                train_loss: loss_sum / n_batches as f64,
            });
        }
    }
    Ok(AdamRun { snapshots, final_params: params })
}
