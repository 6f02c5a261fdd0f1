//! Three-step gradient descent from zero initialization:
//!
//! ```text
//! V¹ = −η ∇_V L(0, 0)
//! W¹ = −γ ∇_W L(V¹, 0)
//! V² = V¹ − γ ∇_V L(V¹, W¹)
//! ```
//!
//! Inference uses `(V², W¹)`. All gradients are full-batch means.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::grad::{grad_with_loss, GradTarget};
use crate::activation::Activation;
use crate::embed::EmbeddingSet;
use crate::error::{Error, Result};
use crate::model::{query_projections, LayerNormConfig, ModelParams};
use crate::taskgen::{Arch, Dataset, Example};

/// Examples used by the learning-rate probe.
pub const PROBE_SIZE: usize = 256;
/// Largest absolute logit allowed after the first step.
pub const ETA_LOGIT_CAP: f64 = 0.1;
/// Target for the largest absolute attention score under `W¹`; the accepted
/// band is `[8, 12]`.
pub const GAMMA_SCORE_TARGET: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreeStepHyper {
    pub eta: f64,
    pub gamma: f64,
    pub auto_scale: bool,
}

impl ThreeStepHyper {
    /// `η = 0.05/√V`, `γ = 10·V·L²`.
    pub fn defaults_for(vocab_size: usize, seq_len: usize) -> Self {
        let v = vocab_size as f64;
        let l = seq_len as f64;
        Self { eta: 0.05 / v.sqrt(), gamma: 10.0 * v * l * l, auto_scale: false }
    }

    pub fn auto() -> Self {
        Self { eta: f64::NAN, gamma: f64::NAN, auto_scale: true }
    }

    pub fn fixed(eta: f64, gamma: f64) -> Self {
        Self { eta, gamma, auto_scale: false }
    }

    fn validate(&self) -> Result<()> {
        if !self.auto_scale && !(self.eta >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rates must be non-negative, got eta={} gamma={}",
                self.eta, self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRates {
    pub eta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Loss at the point where this step's gradient was evaluated.
    pub loss: f64,
    pub value_norm: f64,
    pub key_query_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreeStepTrace {
    pub eta: f64,
    pub gamma: f64,
    pub v1: Array2<f64>,
    pub w1: Array2<f64>,
    pub v2: Array2<f64>,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThreeStepResult {
    /// `(V², W¹)`.
    pub params: ModelParams,
    pub trace: ThreeStepTrace,
}

fn probe(dataset: &Dataset) -> &[Example] {
    &dataset.examples[..dataset.len().min(PROBE_SIZE)]
}

fn ensure_finite(m: &Array2<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence(what.to_string()))
    }
}

fn check_arch(emb: &EmbeddingSet, act: Option<&Activation>, arch: Arch) -> Result<()> {
    if emb.arch() != arch {
        return Err(Error::ArchMismatch(format!("embeddings are {}, requested {}", emb.arch().name(), arch.name())));
    }
    match (arch, act) {
        (Arch::AttentionOnly, None) | (Arch::AttentionMlp, Some(_)) => Ok(()),
        _ => Err(Error::ArchMismatch("activation must be given exactly for Attention-MLP".into())),
    }
}

fn max_abs_logit(examples: &[Example], params: &ModelParams, emb: &EmbeddingSet, act: Option<&Activation>) -> Result<f64> {
    let fwd = crate::model::forward_batch(examples, params, emb, act, &LayerNormConfig::disabled())?;
    Ok(fwd.logits.iter().fold(0.0f64, |a, x| a.max(x.abs())))
}

/// Largest absolute pre-softmax attention score over the probe examples.
pub fn max_abs_score(examples: &[Example], key_query: &Array2<f64>, emb: &EmbeddingSet) -> f64 {
    let params = ModelParams { arch: crate::taskgen::Arch::AttentionOnly, value: Array2::zeros((0, 0)), key_query: key_query.clone() };
    let (zq, trig_q) = query_projections(&params, emb);
    let mut best = 0.0f64;
    for ex in examples {
        for (pos, &t) in ex.tokens.iter().enumerate() {
            let s = zq[t as usize] + if pos == ex.informative_pos { trig_q } else { 0.0 };
            best = best.max(s.abs());
        }
    }
    best
}

struct AutoProbe {
    rates: ResolvedRates,
    g1: Array2<f64>,
    loss0: f64,
    g2: Array2<f64>,
    loss1: f64,
}

fn auto_probe(dataset: &Dataset, emb: &EmbeddingSet, act: Option<&Activation>, arch: Arch) -> Result<AutoProbe> {
    check_arch(emb, act, arch)?;
    let ln = LayerNormConfig::disabled();
    let zero = ModelParams::zeros_for(emb);
    let step1 = grad_with_loss(&zero, &dataset.examples, emb, act, &ln, GradTarget::Value)?;
    let g1 = step1.grad.g_value;
    ensure_finite(&g1, "step 1 gradient")?;
    let unit = ModelParams { arch, value: -&g1, key_query: zero.key_query.clone() };
    let logit_scale = max_abs_logit(probe(dataset), &unit, emb, act)?;
    if !(logit_scale > 0.0) || !logit_scale.is_finite() {
        return Err(Error::CannotAutoscale("step-1 gradient produces no logits on the probe batch".into()));
    }
    // Shrink by one part in 10^12 so the re-checked maximum stays under the cap.
    let eta = ETA_LOGIT_CAP / logit_scale * (1.0 - 1e-12);
    let p1 = ModelParams { arch, value: &g1 * -eta, key_query: zero.key_query.clone() };
    let step2 = grad_with_loss(&p1, &dataset.examples, emb, act, &ln, GradTarget::KeyQuery)?;
    let g2 = step2.grad.g_key_query;
    ensure_finite(&g2, "step 2 gradient")?;
    let score_scale = max_abs_score(probe(dataset), &(-&g2), emb);
    if !(score_scale > 0.0) || !score_scale.is_finite() {
        return Err(Error::CannotAutoscale("step-2 gradient produces no attention scores on the probe batch".into()));
    }
    let gamma = GAMMA_SCORE_TARGET / score_scale;
    Ok(AutoProbe { rates: ResolvedRates { eta, gamma }, g1, loss0: step1.mean_loss, g2, loss1: step2.mean_loss })
}

/// Picks `η` so the largest absolute logit after step 1 on the probe batch is
/// at most 0.1, then `γ` so the largest absolute attention score under `W¹`
/// is 10. Logits are linear in `η` and scores linear in `γ`, so one probe
/// pass per rate and a division suffice.
pub fn resolve_auto_rates(
    dataset: &Dataset,
    emb: &EmbeddingSet,
    act: Option<&Activation>,
    arch: Arch,
) -> Result<ResolvedRates> {
    Ok(auto_probe(dataset, emb, act, arch)?.rates)
}

pub fn three_step_train(
    dataset: &Dataset,
    emb: &EmbeddingSet,
    act: Option<&Activation>,
    hyper: &ThreeStepHyper,
    arch: Arch,
) -> Result<ThreeStepResult> {
    hyper.validate()?;
    check_arch(emb, act, arch)?;
    let ln = LayerNormConfig::disabled();
    let zero = ModelParams::zeros_for(emb);

    let (rates, g1, loss0, g2, loss1) = if hyper.auto_scale {
        let p = auto_probe(dataset, emb, act, arch)?;
        (p.rates, p.g1, p.loss0, Some(p.g2), p.loss1)
    } else {
        let s1 = grad_with_loss(&zero, &dataset.examples, emb, act, &ln, GradTarget::Value)?;
        (ResolvedRates { eta: hyper.eta, gamma: hyper.gamma }, s1.grad.g_value, s1.mean_loss, None, f64::NAN)
    };
    let ResolvedRates { eta, gamma } = rates;

    let v1 = &g1 * -eta;
    ensure_finite(&v1, "step 1 (V¹)")?;
    let p1 = ModelParams { arch, value: v1.clone(), key_query: zero.key_query.clone() };

    let (g2, loss1) = match g2 {
        Some(g) => (g, loss1),
        None => {
            let s2 = grad_with_loss(&p1, &dataset.examples, emb, act, &ln, GradTarget::KeyQuery)?;
            (s2.grad.g_key_query, s2.mean_loss)
        }
    };
    let w1 = &g2 * -gamma;
    ensure_finite(&w1, "step 2 (W¹)")?;

    let p2 = ModelParams { arch, value: v1.clone(), key_query: w1.clone() };
    let s3 = grad_with_loss(&p2, &dataset.examples, emb, act, &ln, GradTarget::Value)?;
    let v2 = &v1 - &(&s3.grad.g_value * gamma);
    ensure_finite(&v2, "step 3 (V²)")?;

    let frob = crate::model::frobenius;
    let steps = vec![
        StepRecord { step: 1, loss: loss0, value_norm: frob(&v1), key_query_norm: 0.0 },
        StepRecord { step: 2, loss: loss1, value_norm: frob(&v1), key_query_norm: frob(&w1) },
        StepRecord { step: 3, loss: s3.mean_loss, value_norm: frob(&v2), key_query_norm: frob(&w1) },
    ];
    let params = ModelParams { arch, value: v2.clone(), key_query: w1.clone() };
    Ok(ThreeStepResult { params, trace: ThreeStepTrace { eta, gamma, v1, w1, v2, steps } })
}

impl ThreeStepTrace {
    /// Per-step norms and losses; full iterates only when `with_matrices`.
    pub fn to_json(&self, with_matrices: bool) -> serde_json::Value {
        let mut out = serde_json::json!({
            "eta": self.eta,
            "gamma": self.gamma,
            "steps": self.steps,
        });
        if with_matrices {
            let rows = |m: &Array2<f64>| m.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
            out["V1"] = serde_json::json!(rows(&self.v1));
            out["W1"] = serde_json::json!(rows(&self.w1));
            out["V2"] = serde_json::json!(rows(&self.v2));
        }
        out
    }
}
