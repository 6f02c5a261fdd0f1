//! Forward computation of the one-layer models: trigger-marked attention,
//! Attention-only and Attention-MLP readouts, cross-entropy, argmax decoding
//! and Monte-Carlo accuracy.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::embed::EmbeddingSet;
use crate::error::{Error, Result};
use crate::taskgen::{sample_example, Arch, Example, Permutation, TaskConfig, TokenId};

/// Probabilities below this are floored before taking the log.
pub const PROB_FLOOR: f64 = 1e-300;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub(crate) const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Arch,
    /// `d×d` (Attention-only) or `d×m` (Attention-MLP).
    pub value: Array2<f64>,
    /// `d×d`.
    pub key_query: Array2<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Arch, d: usize, m: usize) -> Self {
        let cols = match arch {
            Arch::AttentionOnly => d,
            Arch::AttentionMlp => m,
        };
        Self { arch, value: Array2::zeros((d, cols)), key_query: Array2::zeros((d, d)) }
    }

    pub fn zeros_for(emb: &EmbeddingSet) -> Self {
        Self::zeros(emb.arch(), emb.embed_dim(), emb.mlp_width())
    }

    pub fn check_shapes(&self, emb: &EmbeddingSet) -> Result<()> {
        let d = emb.embed_dim();
        if self.arch != emb.arch() {
            return Err(Error::ArchMismatch(format!(
                "params are {} but embeddings are {}",
                self.arch.name(),
                emb.arch().name()
            )));
        }
        let cols = match self.arch {
            Arch::AttentionOnly => d,
            Arch::AttentionMlp => emb.mlp_width(),
        };
        if self.value.dim() != (d, cols) {
            return Err(Error::DimensionMismatch(format!("value is {:?}, expected {:?}", self.value.dim(), (d, cols))));
        }
        if self.key_query.dim() != (d, d) {
            return Err(Error::DimensionMismatch(format!("key_query is {:?}, expected ({d}, {d})", self.key_query.dim())));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.value.iter().chain(self.key_query.iter()).all(|x| x.is_finite())
    }

    pub fn value_norm(&self) -> f64 {
        frobenius(&self.value)
    }

    pub fn key_query_norm(&self) -> f64 {
        frobenius(&self.key_query)
    }
}

pub fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerNormSite {
    AttentionOutput,
    Logits,
}

/// Parameter-free layer normalization, `(x − mean) / sqrt(var + ε)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormConfig {
    pub enabled: bool,
    pub epsilon: f64,
    pub sites: Vec<LayerNormSite>,
}

impl Default for LayerNormConfig {
    fn default() -> Self {
        Self::disabled()
    }
}

impl LayerNormConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, epsilon: LAYER_NORM_EPS, sites: vec![LayerNormSite::AttentionOutput] }
    }

    pub fn attention_output() -> Self {
        Self { enabled: true, epsilon: LAYER_NORM_EPS, sites: vec![LayerNormSite::AttentionOutput] }
    }

    pub fn both_sites() -> Self {
        Self {
            enabled: true,
            epsilon: LAYER_NORM_EPS,
            sites: vec![LayerNormSite::AttentionOutput, LayerNormSite::Logits],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("layer-norm epsilon must be > 0".into()));
        }
        Ok(())
    }

    pub fn at(&self, site: LayerNormSite) -> bool {
        self.enabled && self.sites.contains(&site)
    }
}

/// Normalizes `x` in place and returns `1/sqrt(var + ε)`.
pub(crate) fn layer_norm_inplace(x: &mut [f64], eps: f64) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for v in x.iter_mut() {
        *v = (*v - mean) * inv;
    }
    inv
}

/// Backward of [`layer_norm_inplace`] given the normalized output `y`.
pub(crate) fn layer_norm_backward(dy: &mut [f64], y: &[f64], inv: f64) {
    let n = dy.len() as f64;
    let mean_dy = dy.iter().sum::<f64>() / n;
    let mean_dyy = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
    for (g, &yy) in dy.iter_mut().zip(y) {
        *g = inv * (*g - mean_dy - yy * mean_dyy);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVector {
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    /// Set when the label probability was below [`PROB_FLOOR`].
    pub floored: bool,
}

pub fn cross_entropy(pred: &PredictionVector, label: TokenId) -> CrossEntropy {
    let p = pred.probs[label as usize];
    if p < PROB_FLOOR {
        CrossEntropy { value: -PROB_FLOOR.ln(), floored: true }
    } else {
        CrossEntropy { value: -p.ln(), floored: false }
    }
}

pub(crate) fn softmax_inplace(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(x: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in x.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Positions visited in `(token, non-informative)` order, so that sums over
/// positions do not depend on where tokens sit in the sequence.
fn canonical_order(ex: &Example) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ex.tokens.len()).collect();
    order.sort_by_key(|&l| (ex.tokens[l], l != ex.informative_pos));
    order
}

/// Attention weights (indexed by position) and output for one example, given
/// `zq[t] = Z_in[:, t]·q`, `trig_q = z_trig·q` with `q = W_KQ z_EOS`.
fn attend(ex: &Example, emb: &EmbeddingSet, zq: &[f64], trig_q: f64, weights: &mut [f64], h: &mut [f64]) {
    let order = canonical_order(ex);
    for &l in &order {
        let mut s = zq[ex.tokens[l] as usize];
        if l == ex.informative_pos {
            s += trig_q;
        }
        weights[l] = s;
    }
    let max = order.iter().map(|&l| weights[l]).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &l in &order {
        weights[l] = (weights[l] - max).exp();
        sum += weights[l];
    }
    for &l in &order {
        weights[l] /= sum;
    }
    h.iter_mut().for_each(|x| *x = 0.0);
    for &l in &order {
        let w = weights[l];
        for (o, &v) in h.iter_mut().zip(emb.embed_in(ex.tokens[l]).iter()) {
            *o += w * v;
        }
    }
}

/// Everything the backward pass needs from a forward sweep over a batch.
pub(crate) struct BatchForward {
    pub seq_len: usize,
    /// `B×L`, row-major.
    pub attn: Vec<f64>,
    /// Raw attention outputs, `B×d`.
    pub h: Array2<f64>,
    /// Attention outputs after optional layer norm, `B×d`.
    pub h_norm: Array2<f64>,
    pub h_inv_std: Vec<f64>,
    /// MLP pre-activations `W_in h`, `B×m` (Attention-MLP only).
    pub pre: Option<Array2<f64>>,
    /// Input to the value matrix, `B×d` or `B×m`.
    pub feat: Array2<f64>,
    /// Logits after optional layer norm, `B×V`.
    pub logits: Array2<f64>,
    pub logit_inv_std: Vec<f64>,
}

pub(crate) fn check_inputs(params: &ModelParams, emb: &EmbeddingSet, act: Option<&Activation>) -> Result<()> {
    params.check_shapes(emb)?;
    match (params.arch, act) {
        (Arch::AttentionOnly, None) | (Arch::AttentionMlp, Some(_)) => Ok(()),
        (Arch::AttentionOnly, Some(_)) => Err(Error::ArchMismatch("Attention-only takes no activation".into())),
        (Arch::AttentionMlp, None) => Err(Error::ArchMismatch("Attention-MLP needs an activation".into())),
    }
}

fn check_examples(examples: &[Example], v: usize) -> Result<usize> {
    let l = examples.first().map(|e| e.tokens.len()).ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    for ex in examples {
        if ex.tokens.len() != l || ex.informative_pos >= l {
            return Err(Error::DimensionMismatch("examples in a batch must share one sequence length".into()));
        }
        if ex.tokens.iter().any(|&t| t as usize >= v) || ex.label as usize >= v {
            return Err(Error::DimensionMismatch(format!("token id outside [0, {v})")));
        }
    }
    Ok(l)
}

/// `Z_inᵀ q` and `z_trigᵀ q` for `q = W_KQ z_EOS`.
pub(crate) fn query_projections(params: &ModelParams, emb: &EmbeddingSet) -> (Vec<f64>, f64) {
    let q = params.key_query.dot(emb.z_eos());
    let zq = emb.token_in_rows().dot(&q).to_vec();
    (zq, emb.z_trig().dot(&q))
}

pub(crate) fn forward_batch(
    examples: &[Example],
    params: &ModelParams,
    emb: &EmbeddingSet,
    act: Option<&Activation>,
    ln: &LayerNormConfig,
) -> Result<BatchForward> {
    check_inputs(params, emb, act)?;
    let l = check_examples(examples, emb.vocab_size())?;
    let (zq, trig_q) = query_projections(params, emb);
    Ok(forward_batch_unchecked(examples, l, params, emb, act, ln, &zq, trig_q))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_batch_unchecked(
    examples: &[Example],
    l: usize,
    params: &ModelParams,
    emb: &EmbeddingSet,
    act: Option<&Activation>,
    ln: &LayerNormConfig,
    zq: &[f64],
    trig_q: f64,
) -> BatchForward {
    let b = examples.len();
    let d = emb.embed_dim();
    let mut attn = vec![0.0; b * l];
    let mut h = Array2::zeros((b, d));
    for (i, ex) in examples.iter().enumerate() {
        let mut row = h.row_mut(i);
        attend(ex, emb, zq, trig_q, &mut attn[i * l..(i + 1) * l], row.as_slice_mut().expect("row-major"));
    }
    let mut h_norm = h.clone();
    let mut h_inv_std = Vec::new();
    if ln.at(LayerNormSite::AttentionOutput) {
        h_inv_std = h_norm
            .outer_iter_mut()
            .map(|mut r| layer_norm_inplace(r.as_slice_mut().expect("row-major"), ln.epsilon))
            .collect();
    }
    let (pre, feat) = match (params.arch, act) {
        (Arch::AttentionMlp, Some(act)) => {
            let w_in = emb.w_in().expect("checked arch");
            let pre = h_norm.dot(&w_in.t());
            let feat = pre.mapv(|x| act.eval(x));
            (Some(pre), feat)
        }
        _ => (None, h_norm.clone()),
    };
    let u = feat.dot(&params.value.t());
    let mut logits = u.dot(&emb.token_out_rows().t());
    let mut logit_inv_std = Vec::new();
    if ln.at(LayerNormSite::Logits) {
        logit_inv_std = logits
            .outer_iter_mut()
            .map(|mut r| layer_norm_inplace(r.as_slice_mut().expect("row-major"), ln.epsilon))
            .collect();
    }
    BatchForward { seq_len: l, attn, h, h_norm, h_inv_std, pre, feat, logits, logit_inv_std }
}

/// Attention output `Z_in X σ((z_trig e_ℓᵀ + Z_in X)ᵀ W_KQ z_EOS)`.
pub fn attn_output(example: &Example, key_query: &Array2<f64>, emb: &EmbeddingSet) -> Result<Array1<f64>> {
    let d = emb.embed_dim();
    if key_query.dim() != (d, d) {
        return Err(Error::DimensionMismatch(format!("key_query is {:?}, expected ({d}, {d})", key_query.dim())));
    }
    check_examples(std::slice::from_ref(example), emb.vocab_size())?;
    let q = key_query.dot(emb.z_eos());
    let zq = emb.token_in_rows().dot(&q).to_vec();
    let trig_q = emb.z_trig().dot(&q);
    let mut weights = vec![0.0; example.tokens.len()];
    let mut h = vec![0.0; d];
    attend(example, emb, &zq, trig_q, &mut weights, &mut h);
    Ok(Array1::from(h))
}

/// Attention weights over the positions of one example.
pub fn attention_weights(example: &Example, key_query: &Array2<f64>, emb: &EmbeddingSet) -> Result<Vec<f64>> {
    check_examples(std::slice::from_ref(example), emb.vocab_size())?;
    let q = key_query.dot(emb.z_eos());
    let zq = emb.token_in_rows().dot(&q).to_vec();
    let trig_q = emb.z_trig().dot(&q);
    let mut weights = vec![0.0; example.tokens.len()];
    let mut h = vec![0.0; emb.embed_dim()];
    attend(example, emb, &zq, trig_q, &mut weights, &mut h);
    Ok(weights)
}

pub fn forward(
    example: &Example,
    params: &ModelParams,
    emb: &EmbeddingSet,
    act: Option<&Activation>,
    ln: &LayerNormConfig,
) -> Result<PredictionVector> {
    let fwd = forward_batch(std::slice::from_ref(example), params, emb, act, ln)?;
    let mut probs = fwd.logits.row(0).to_vec();
    softmax_inplace(&mut probs);
    Ok(PredictionVector { probs })
}

/// Pre-softmax output logits for one example.
pub fn logits(
    example: &Example,
    params: &ModelParams,
    emb: &EmbeddingSet,
    act: Option<&Activation>,
    ln: &LayerNormConfig,
) -> Result<Array1<f64>> {
    let fwd = forward_batch(std::slice::from_ref(example), params, emb, act, ln)?;
    Ok(fwd.logits.row(0).to_owned())
}

/// Argmax decoding. The argmax is taken over the logits, which order the
/// tokens exactly as the probabilities do; ties go to the lowest index.
pub fn predict(
    example: &Example,
    params: &ModelParams,
    emb: &EmbeddingSet,
    act: Option<&Activation>,
    ln: &LayerNormConfig,
) -> Result<TokenId> {
    let fwd = forward_batch(std::slice::from_ref(example), params, emb, act, ln)?;
    Ok(argmax(fwd.logits.row(0)) as TokenId)
}

/// Predictions for a batch, computed in fixed-size chunks.
pub fn predict_batch(
    examples: &[Example],
    params: &ModelParams,
    emb: &EmbeddingSet,
    act: Option<&Activation>,
    ln: &LayerNormConfig,
) -> Result<Vec<TokenId>> {
    check_inputs(params, emb, act)?;
    let l = check_examples(examples, emb.vocab_size())?;
    let (zq, trig_q) = query_projections(params, emb);
    let chunks: Vec<Vec<TokenId>> = examples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let fwd = forward_batch_unchecked(chunk, l, params, emb, act, ln, &zq, trig_q);
            fwd.logits.axis_iter(Axis(0)).map(|r| argmax(r) as TokenId).collect()
        })
        .collect();
    Ok(chunks.concat())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEstimate {
    pub accuracy: f64,
    pub stderr: f64,
    pub n_eval: usize,
}

impl AccuracyEstimate {
    pub fn from_counts(correct: usize, n: usize) -> Self {
        let a = correct as f64 / n as f64;
        Self { accuracy: a, stderr: (a * (1.0 - a) / n as f64).sqrt(), n_eval: n }
    }
}

pub fn accuracy_on(
    examples: &[Example],
    params: &ModelParams,
    emb: &EmbeddingSet,
    act: Option<&Activation>,
    ln: &LayerNormConfig,
) -> Result<AccuracyEstimate> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("n_eval must be >= 1".into()));
    }
    let preds = predict_batch(examples, params, emb, act, ln)?;
    let correct = preds.iter().zip(examples).filter(|(p, e)| **p == e.label).count();
    Ok(AccuracyEstimate::from_counts(correct, examples.len()))
}

/// Monte-Carlo accuracy over `n_eval` fresh examples drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_accuracy<R: Rng + ?Sized>(
    params: &ModelParams,
    emb: &EmbeddingSet,
    act: Option<&Activation>,
    ln: &LayerNormConfig,
    cfg: &TaskConfig,
    perm: &Permutation,
    n_eval: usize,
    rng: &mut R,
) -> Result<AccuracyEstimate> {
    if n_eval == 0 {
        return Err(Error::InvalidArgument("n_eval must be >= 1".into()));
    }
    let examples = (0..n_eval).map(|_| sample_example(cfg, perm, rng)).collect::<Result<Vec<_>>>()?;
    accuracy_on(&examples, params, emb, act, ln)
}
