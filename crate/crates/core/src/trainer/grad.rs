//! Analytic gradients of the mean cross-entropy with respect to the value and
//! key-query matrices.

use ndarray::{Array1, Array2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::embed::EmbeddingSet;
use crate::error::{Error, Result};
use crate::model::{
    check_inputs, forward_batch_unchecked, layer_norm_backward, query_projections, BatchForward, LayerNormConfig,
    LayerNormSite, ModelParams, CHUNK,
};
use crate::taskgen::Example;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradPair {
    pub g_value: Array2<f64>,
    pub g_key_query: Array2<f64>,
}

impl GradPair {
    pub fn is_finite(&self) -> bool {
        self.g_value.iter().chain(self.g_key_query.iter()).all(|x| x.is_finite())
    }
}

/// Which blocks of the gradient to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Both,
    Value,
    KeyQuery,
}

impl GradTarget {
    fn value(self) -> bool {
        matches!(self, GradTarget::Both | GradTarget::Value)
    }

    fn key_query(self) -> bool {
        matches!(self, GradTarget::Both | GradTarget::KeyQuery)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrad {
    pub grad: GradPair,
    pub mean_loss: f64,
}

struct ChunkSum {
    g_value: Array2<f64>,
    dq: Array1<f64>,
    loss: f64,
}

impl ChunkSum {
    fn add(mut self, other: ChunkSum) -> ChunkSum {
        self.g_value += &other.g_value;
        self.dq += &other.dq;
        self.loss += other.loss;
        self
    }
}

/// Pairwise reduction in a fixed tree over the input order.
fn pairwise<T, F: Fn(T, T) -> T + Copy>(mut items: Vec<T>, add: F) -> Option<T> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(add(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

/// Summed (not averaged) gradient pieces and loss over one chunk.
fn chunk_backward(
    chunk: &[Example],
    fwd: &BatchForward,
    params: &ModelParams,
    emb: &EmbeddingSet,
    act: Option<&Activation>,
    ln: &LayerNormConfig,
    target: GradTarget,
) -> ChunkSum {
    let d = emb.embed_dim();
    // dL/dlogits = softmax − onehot; loss = logsumexp − logit[label].
    let mut dlogits = fwd.logits.clone();
    let mut loss = 0.0;
    for (i, (mut row, ex)) in dlogits.outer_iter_mut().zip(chunk).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.mapv_inplace(|x| {
            let e = (x - max).exp();
            sum += e;
            e
        });
        loss += sum.ln() + max - fwd.logits[[i, ex.label as usize]];
        row.mapv_inplace(|e| e / sum);
        row[ex.label as usize] -= 1.0;
    }
    if ln.at(LayerNormSite::Logits) {
        for (i, mut row) in dlogits.outer_iter_mut().enumerate() {
            let y = fwd.logits.row(i);
            layer_norm_backward(
                row.as_slice_mut().expect("row-major"),
                y.as_slice().expect("row-major"),
                fwd.logit_inv_std[i],
            );
        }
    }
    let du = dlogits.dot(emb.token_out_rows());
    let g_value = if target.value() { du.t().dot(&fwd.feat) } else { Array2::zeros(params.value.dim()) };
    let mut dq = Array1::zeros(d);
    if target.key_query() {
        let dfeat = du.dot(&params.value);
        let mut dh = match (&fwd.pre, act, emb.w_in()) {
            (Some(pre), Some(act), Some(w_in)) => {
                let mut dpre = dfeat;
                Zip::from(&mut dpre).and(pre).for_each(|g, &p| *g *= act.eval_d1(p));
                dpre.dot(w_in)
            }
            _ => dfeat,
        };
        if ln.at(LayerNormSite::AttentionOutput) {
            for (i, mut row) in dh.outer_iter_mut().enumerate() {
                let y = fwd.h_norm.row(i);
                layer_norm_backward(
                    row.as_slice_mut().expect("row-major"),
                    y.as_slice().expect("row-major"),
                    fwd.h_inv_std[i],
                );
            }
        }
        let l = fwd.seq_len;
        let dq_s = dq.as_slice_mut().expect("contiguous");
        for (i, ex) in chunk.iter().enumerate() {
            let g = dh.row(i);
            let hd = fwd.h.row(i).dot(&g);
            let weights = &fwd.attn[i * l..(i + 1) * l];
            for (pos, (&t, &w)) in ex.tokens.iter().zip(weights).enumerate() {
                let v = emb.embed_in(t);
                let ds = w * (v.dot(&g) - hd);
                for (o, &x) in dq_s.iter_mut().zip(v.iter()) {
                    *o += ds * x;
                }
                if pos == ex.informative_pos {
                    for (o, &x) in dq_s.iter_mut().zip(emb.z_trig().iter()) {
                        *o += ds * x;
                    }
                }
            }
        }
    }
    ChunkSum { g_value, dq, loss }
}

/// Mean gradient and mean loss over `batch`, computed in fixed-size chunks
/// reduced by pairwise summation (schedule-independent).
pub fn grad_with_loss(
    params: &ModelParams,
    batch: &[Example],
    emb: &EmbeddingSet,
    act: Option<&Activation>,
    ln: &LayerNormConfig,
    target: GradTarget,
) -> Result<BatchGrad> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("gradient of an empty batch".into()));
    }
    check_inputs(params, emb, act)?;
    let l = batch[0].tokens.len();
    let v = emb.vocab_size();
    for ex in batch {
        if ex.tokens.len() != l || ex.informative_pos >= l {
            return Err(Error::DimensionMismatch("examples in a batch must share one sequence length".into()));
        }
        if ex.label as usize >= v || ex.tokens.iter().any(|&t| t as usize >= v) {
            return Err(Error::DimensionMismatch(format!("token id outside [0, {v})")));
        }
    }
    let (zq, trig_q) = query_projections(params, emb);
    let sums: Vec<ChunkSum> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let fwd = forward_batch_unchecked(chunk, l, params, emb, act, ln, &zq, trig_q);
            chunk_backward(chunk, &fwd, params, emb, act, ln, target)
        })
        .collect();
    let total = pairwise(sums, ChunkSum::add).expect("non-empty batch");
    let n = batch.len() as f64;
    let g_value = total.g_value / n;
    let dq = total.dq / n;
    let g_key_query = if target.key_query() {
        let eos = emb.z_eos();
        dq.view().insert_axis(Axis(1)).dot(&eos.view().insert_axis(Axis(0)))
    } else {
        Array2::zeros(params.key_query.dim())
    };
    Ok(BatchGrad { grad: GradPair { g_value, g_key_query }, mean_loss: total.loss / n })
}

/// Mean gradient of the cross-entropy over `batch`.
pub fn grad(
    params: &ModelParams,
    batch: &[Example],
    emb: &EmbeddingSet,
    act: Option<&Activation>,
    ln: &LayerNormConfig,
) -> Result<GradPair> {
    Ok(grad_with_loss(params, batch, emb, act, ln, GradTarget::Both)?.grad)
}

/// Mean cross-entropy over `batch`, via log-softmax.
pub fn mean_loss(
    params: &ModelParams,
    batch: &[Example],
    emb: &EmbeddingSet,
    act: Option<&Activation>,
    ln: &LayerNormConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("loss of an empty batch".into()));
    }
    let fwd = crate::model::forward_batch(batch, params, emb, act, ln)?;
    let mut total = 0.0;
    for (row, ex) in fwd.logits.outer_iter().zip(batch) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[ex.label as usize];
    }
    Ok(total / batch.len() as f64)
}
