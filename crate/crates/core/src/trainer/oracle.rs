//! Independent references for the analytic gradient.

use ndarray::{Array1, Array2};

use super::grad::mean_loss;
use crate::activation::Activation;
use crate::embed::EmbeddingSet;
use crate::error::{Error, Result};
use crate::model::{LayerNormConfig, ModelParams};
use crate::taskgen::{Arch, Example};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    Value,
    KeyQuery,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdProbe {
    pub block: ParamBlock,
    pub row: usize,
    pub col: usize,
    pub step: f64,
}

fn block_mut(p: &mut ModelParams, block: ParamBlock) -> &mut Array2<f64> {
    match block {
        ParamBlock::Value => &mut p.value,
        ParamBlock::KeyQuery => &mut p.key_query,
    }
}

/// Central difference `(L(θ + h e) − L(θ − h e)) / 2h` of the mean loss.
pub fn finite_difference(
    params: &ModelParams,
    batch: &[Example],
    emb: &EmbeddingSet,
    act: Option<&Activation>,
    ln: &LayerNormConfig,
    probe: FdProbe,
) -> Result<f64> {
    let mut p = params.clone();
    let base = *block_mut(&mut p, probe.block)
        .get((probe.row, probe.col))
        .ok_or_else(|| Error::InvalidArgument(format!("coordinate ({}, {}) out of range", probe.row, probe.col)))?;
    let set = |p: &mut ModelParams, x: f64| block_mut(p, probe.block)[(probe.row, probe.col)] = x;
    set(&mut p, base + probe.step);
    let plus = mean_loss(&p, batch, emb, act, ln)?;
    set(&mut p, base - probe.step);
    let minus = mean_loss(&p, batch, emb, act, ln)?;
    Ok((plus - minus) / (2.0 * probe.step))
}

/// Value gradient at `V = 0`, `W_KQ = 0`, written out example by example:
/// `(1/N) Σ_i Z_out(𝟙/V − e_{y_i}) f(h_i)ᵀ` with `h_i = (1/L) Z_in X_i 𝟙`
/// and `f` the identity or `φ(W_in ·)`.
pub fn closed_form_first_value_grad(
    batch: &[Example],
    emb: &EmbeddingSet,
    act: Option<&Activation>,
) -> Result<Array2<f64>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("gradient of an empty batch".into()));
    }
    let v = emb.vocab_size();
    let d = emb.embed_dim();
    let width = match (emb.arch(), act) {
        (Arch::AttentionOnly, None) => d,
        (Arch::AttentionMlp, Some(_)) => emb.mlp_width(),
        _ => return Err(Error::ArchMismatch("activation must be given exactly for Attention-MLP".into())),
    };
    let z_out = emb.z_out();
    let mut out_mean = Array1::<f64>::zeros(d);
    for t in 0..v {
        out_mean += &z_out.column(t);
    }
    out_mean /= v as f64;
    let mut g = Array2::<f64>::zeros((d, width));
    for ex in batch {
        let mut h = Array1::<f64>::zeros(d);
        for &t in &ex.tokens {
            h += &emb.embed_in(t);
        }
        h /= ex.tokens.len() as f64;
        let f = match (emb.w_in(), act) {
            (Some(w_in), Some(act)) => w_in.dot(&h).mapv(|x| act.eval(x)),
            _ => h,
        };
        let r = &out_mean - &z_out.column(ex.label as usize);
        for a in 0..d {
            for b in 0..width {
                g[[a, b]] += r[a] * f[b];
            }
        }
    }
    Ok(g / batch.len() as f64)
}
