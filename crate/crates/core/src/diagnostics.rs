//! Score decompositions under the first key-query iterate, the first value
//! iterate split, Gaussian coefficients `α_ij`, `β_ij`, and scaling
//! measurements of the signal and noise terms.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{Activation, MAX_DEGREE};
use crate::embed::{embeddings_for, EmbeddingSet};
use crate::error::{Error, Result};
use crate::model::{LayerNormConfig, ModelParams};
use crate::quadrature::GaussHermite;
use crate::rng::{derive_seed, Role};
use crate::taskgen::{build_task, sample_fresh, Arch, Dataset, Example, TaskConfig};
use crate::trainer::{grad_with_loss, three_step_train, GradTarget, ThreeStepHyper, ThreeStepTrace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaBeta {
    /// `E[φ′(u) φ′(v)]`.
    pub alpha: f64,
    /// `E[φ″(u) φ(v)]`.
    pub beta: f64,
}

/// Quadrature rule for `α`, `β` with `(u, v) = (wᵀa_i, wᵀa_j)`, `w ~ N(0, I)`.
#[derive(Debug, Clone)]
pub struct AlphaBetaRule {
    act: Activation,
    gh: GaussHermite,
}

impl AlphaBetaRule {
    pub fn new(act: &Activation) -> Result<Self> {
        let degree = act.degree();
        if degree > MAX_DEGREE {
            return Err(Error::DegreeCap { degree, cap: MAX_DEGREE });
        }
        Ok(Self { act: act.clone(), gh: GaussHermite::new(degree + 1)? })
    }

    /// From the second moments `‖a_i‖²`, `‖a_j‖²`, `⟨a_i, a_j⟩`.
    pub fn from_moments(&self, sii: f64, sjj: f64, sij: f64) -> AlphaBeta {
        let act = &self.act;
        let alpha = self.gh.expect_2d(sii, sjj, sij, |u, v| act.eval_d1(u) * act.eval_d1(v));
        let beta = self.gh.expect_2d(sii, sjj, sij, |u, v| act.eval_d2(u) * act.eval(v));
        AlphaBeta { alpha, beta }
    }
}

pub fn alpha_beta(a_i: ArrayView1<'_, f64>, a_j: ArrayView1<'_, f64>, act: &Activation) -> Result<AlphaBeta> {
    if a_i.len() != a_j.len() {
        return Err(Error::DimensionMismatch(format!("aggregates of length {} and {}", a_i.len(), a_j.len())));
    }
    let rule = AlphaBetaRule::new(act)?;
    Ok(rule.from_moments(a_i.dot(&a_i), a_j.dot(&a_j), a_i.dot(&a_j)))
}

/// `a = (1/L) Z_in X 𝟙`, one row per example.
pub fn aggregates(examples: &[Example], emb: &EmbeddingSet) -> Array2<f64> {
    let mut a = Array2::zeros((examples.len(), emb.embed_dim()));
    for (mut row, ex) in a.outer_iter_mut().zip(examples) {
        for &t in &ex.tokens {
            row += &emb.embed_in(t);
        }
        row /= ex.tokens.len() as f64;
    }
    a
}

/// `y_i = Z_out(e_{y_i} − 𝟙/V)`, one row per example.
fn centred_targets(examples: &[Example], emb: &EmbeddingSet) -> Array2<f64> {
    let zbar = emb.token_out_rows().mean_axis(Axis(0)).expect("V >= 1");
    let mut y = Array2::zeros((examples.len(), emb.embed_dim()));
    for (mut row, ex) in y.outer_iter_mut().zip(examples) {
        row.assign(&(&emb.embed_out(ex.label) - &zbar));
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueComponent {
    Mean,
    Bias,
    Noise,
}

/// `V¹/η = Z_out (Mean + Bias + Noise) Z_inᵀ` for Attention-only.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSplit {
    pub eta: f64,
    /// `V×V` token-space components.
    pub mean_tokens: Array2<f64>,
    pub bias_tokens: Array2<f64>,
    pub noise_tokens: Array2<f64>,
    /// `d×d` components.
    pub mean_part: Array2<f64>,
    pub bias_part: Array2<f64>,
    pub noise_part: Array2<f64>,
    /// `‖Ξ‖₂` with `Ξ = √(LVN)·Noise`.
    pub xi_norm: f64,
    /// `V¹/η` from the gradient at zero.
    pub v1_over_eta: Array2<f64>,
}

impl ValueSplit {
    pub fn part(&self, c: ValueComponent) -> &Array2<f64> {
        match c {
            ValueComponent::Mean => &self.mean_part,
            ValueComponent::Bias => &self.bias_part,
            ValueComponent::Noise => &self.noise_part,
        }
    }

    /// Largest entrywise gap between the summed parts and `V¹/η`.
    pub fn reconstruction_error(&self) -> f64 {
        let sum = &self.mean_part + &self.bias_part + &self.noise_part;
        sum.iter().zip(&self.v1_over_eta).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn first_iterate(&self) -> Array2<f64> {
        (&self.mean_part + &self.bias_part + &self.noise_part) * self.eta
    }
}

/// Largest singular value by power iteration on `AᵀA`.
pub fn spectral_norm(a: &Array2<f64>) -> f64 {
    let n = a.ncols();
    if n == 0 || a.nrows() == 0 {
        return 0.0;
    }
    let mut x = Array1::from_iter((0..n).map(|i| {
        let h = crate::rng::splitmix64(i as u64 ^ 0x5eed);
        (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    }));
    let mut sigma = 0.0;
    for _ in 0..1000 {
        let norm = x.dot(&x).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        x /= norm;
        let y = a.t().dot(&a.dot(&x));
        let next = x.dot(&y).max(0.0).sqrt();
        x = y;
        if (next - sigma).abs() <= 1e-13 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

pub fn split_value_first_step(dataset: &Dataset, emb: &EmbeddingSet, eta: f64, arch: Arch) -> Result<ValueSplit> {
    if arch != Arch::AttentionOnly || emb.arch() != Arch::AttentionOnly {
        return Err(Error::ArchMismatch("the value split is defined for Attention-only".into()));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let v = emb.vocab_size();
    let n = dataset.len() as f64;
    let l = dataset.examples[0].tokens.len() as f64;
    let vf = v as f64;
    let mut perm_mat = Array2::<f64>::zeros((v, v));
    for t in 0..v {
        perm_mat[[dataset.perm.apply(t as u32) as usize, t]] = 1.0;
    }
    let mean_tokens = (perm_mat - 1.0 / vf) / (vf * l);
    // Σ_i (p_i − 𝟙/V)(X_i𝟙 − (L/V)𝟙)ᵀ and Σ_i (p_i − 𝟙/V).
    let mut s_mat = Array2::<f64>::zeros((v, v));
    let mut label_counts = vec![0.0; v];
    let mut token_totals = vec![0.0; v];
    let mut counts = vec![0.0; v];
    for ex in &dataset.examples {
        counts.iter_mut().for_each(|c| *c = 0.0);
        for &t in &ex.tokens {
            counts[t as usize] += 1.0;
        }
        let y = ex.label as usize;
        label_counts[y] += 1.0;
        for (tot, &c) in token_totals.iter_mut().zip(&counts) {
            *tot += c;
        }
        let mut row = s_mat.row_mut(y);
        for (o, &c) in row.iter_mut().zip(&counts) {
            *o += c - l / vf;
        }
    }
    // Subtract (1/V)𝟙 (Σ_i X_i𝟙 − (NL/V)𝟙)ᵀ.
    for b in 0..v {
        let col = (token_totals[b] - n * l / vf) / vf;
        for a in 0..v {
            s_mat[[a, b]] -= col;
        }
    }
    let mut bias_tokens = Array2::<f64>::zeros((v, v));
    for a in 0..v {
        let w = (label_counts[a] - n / vf) / (vf * n);
        bias_tokens.row_mut(a).fill(w);
    }
    let noise_tokens = &s_mat / (n * l) - &mean_tokens;
    let xi = &noise_tokens * (l * vf * n).sqrt();
    let xi_norm = spectral_norm(&xi);
    let z_out = emb.z_out();
    let z_in = emb.z_in();
    let lift = |m: &Array2<f64>| z_out.dot(m).dot(&z_in.t());
    let zero = ModelParams::zeros_for(emb);
    let g = grad_with_loss(&zero, &dataset.examples, emb, None, &LayerNormConfig::disabled(), GradTarget::Value)?;
    Ok(ValueSplit {
        eta,
        mean_part: lift(&mean_tokens),
        bias_part: lift(&bias_tokens),
        noise_part: lift(&noise_tokens),
        mean_tokens,
        bias_tokens,
        noise_tokens,
        xi_norm,
        v1_over_eta: -g.grad.g_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDecomposition {
    /// Pre-softmax scores under `W¹` on the fresh example.
    pub scores: Vec<f64>,
    pub informative: Vec<f64>,
    pub non_informative: Vec<f64>,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub s3: Vec<f64>,
    pub residual: Vec<f64>,
    /// `η·γ·κ` with `κ = m` for Attention-MLP and `1` for Attention-only; the
    /// identity is `s1 + s2 + s3 + residual = scores / normalizer`.
    pub normalizer: f64,
}

impl ScoreDecomposition {
    pub fn identity_error(&self) -> f64 {
        (0..self.scores.len())
            .map(|l| {
                let lhs = self.s1[l] + self.s2[l] + self.s3[l] + self.residual[l];
                (lhs - self.scores[l] / self.normalizer).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// How the per-neuron averages over `W_in` enter `s3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeuronAverage {
    /// Empirical average over the `m` rows of `W_in`.
    Empirical,
    /// Replaced by the Gaussian expectation; `s3` vanishes.
    Expected,
}

/// Everything about the trained model that the per-example decomposition
/// needs, computed once per `(trace, dataset)`.
#[derive(Debug, Clone)]
pub struct ScoreModel {
    arch: Arch,
    eta: f64,
    gamma: f64,
    kappa: f64,
    /// `W¹ z_EOS`.
    query: Array1<f64>,
    /// `‖z_EOS‖² R_k` for `s1`, `s2`, `s3`.
    r: [Array1<f64>; 3],
    /// Informative coefficient over `γ`.
    informative: f64,
    /// Non-informative direction over `γ`.
    non_informative: Array1<f64>,
    mode: NeuronAverage,
    /// Finite-width direction removed in `Expected` mode.
    fw_r: Option<Array1<f64>>,
    emb: EmbeddingSet,
}

/// `(1/N²) Σ_i Σ_l k_il (t_il − mean_l t_il)/L` with `t_il = v_il·E_i`.
fn key_sum(examples: &[Example], emb: &EmbeddingSet, e: &Array2<f64>) -> Array1<f64> {
    let d = emb.embed_dim();
    let n = examples.len() as f64;
    let mut acc = Array1::<f64>::zeros(d);
    let mut t = Vec::new();
    for (ex, ei) in examples.iter().zip(e.outer_iter()) {
        t.clear();
        t.extend(ex.tokens.iter().map(|&tok| emb.embed_in(tok).dot(&ei)));
        let l = t.len() as f64;
        let mean = t.iter().sum::<f64>() / l;
        for (pos, (&tok, &tl)) in ex.tokens.iter().zip(&t).enumerate() {
            let w = (tl - mean) / l;
            acc.scaled_add(w, &emb.embed_in(tok));
            if pos == ex.informative_pos {
                acc.scaled_add(w, emb.z_trig());
            }
        }
    }
    acc / (n * n)
}

/// `(E1, E2, E3)` with `E1_i = Σ_j c_ij α_ij a_j`, `E2_i = a_i Σ_j c_ij β_ij` and
/// `E3_i = (1/m) W_inᵀ(φ′(W_in a_i) ⊙ Σ_j c_ij φ(W_in a_j)) − E1_i − E2_i`.
fn pair_terms(
    a: &Array2<f64>,
    y: &Array2<f64>,
    emb: &EmbeddingSet,
    act: Option<&Activation>,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let (n, d) = a.dim();
    let (act, w_in) = match (act, emb.w_in()) {
        (Some(act), Some(w_in)) => (act, w_in),
        _ => {
            // φ = id: α = 1, β = 0 and the finite-width term vanishes.
            let e1 = y.dot(&y.t().dot(a));
            return Ok((e1, Array2::zeros((n, d)), Array2::zeros((n, d))));
        }
    };
    let rule = AlphaBetaRule::new(act)?;
    let sq: Vec<f64> = a.outer_iter().map(|r| r.dot(&r)).collect();
    let rows: Vec<(Array1<f64>, Array1<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            let yi = y.row(i);
            let mut e1 = Array1::<f64>::zeros(d);
            let mut b = 0.0;
            for j in 0..n {
                let aj = a.row(j);
                let c = y.row(j).dot(&yi);
                let ab = rule.from_moments(sq[i], sq[j], ai.dot(&aj));
                e1.scaled_add(c * ab.alpha, &aj);
                b += c * ab.beta;
            }
            (e1, &ai * b)
        })
        .collect();
    let mut e1 = Array2::zeros((n, d));
    let mut e2 = Array2::zeros((n, d));
    for (i, (r1, r2)) in rows.into_iter().enumerate() {
        e1.row_mut(i).assign(&r1);
        e2.row_mut(i).assign(&r2);
    }
    let m = w_in.nrows() as f64;
    let pre = a.dot(&w_in.t());
    let phi = pre.mapv(|x| act.eval(x));
    let mut mix = y.dot(&y.t().dot(&phi));
    ndarray::Zip::from(&mut mix).and(&pre).for_each(|g, &p| *g *= act.eval_d1(p));
    let e3 = mix.dot(w_in) / m - &e1 - &e2;
    Ok((e1, e2, e3))
}

/// `g_i = ∂(logits)ᵀ/∂h · y_i` through `V¹`: `V¹ᵀ y_i` or
/// `W_inᵀ(φ′(W_in a_i) ⊙ V¹ᵀ y_i)`.
fn value_backprop(
    v1: &Array2<f64>,
    a: &Array2<f64>,
    y: &Array2<f64>,
    emb: &EmbeddingSet,
    act: Option<&Activation>,
) -> Array2<f64> {
    let back = y.dot(v1);
    match (act, emb.w_in()) {
        (Some(act), Some(w_in)) => {
            let pre = a.dot(&w_in.t());
            let mut g = back;
            ndarray::Zip::from(&mut g).and(&pre).for_each(|g, &p| *g *= act.eval_d1(p));
            g.dot(w_in)
        }
        _ => back,
    }
}

/// `(1/(NL)) Σ_i Σ_l v_il (v_ilᵀ g_i)`.
fn non_informative_direction(examples: &[Example], emb: &EmbeddingSet, g: &Array2<f64>) -> Array1<f64> {
    let mut acc = Array1::<f64>::zeros(emb.embed_dim());
    let mut l = 1.0;
    for (ex, gi) in examples.iter().zip(g.outer_iter()) {
        l = ex.tokens.len() as f64;
        for &t in &ex.tokens {
            let v = emb.embed_in(t);
            acc.scaled_add(v.dot(&gi), &v);
        }
    }
    acc / (examples.len() as f64 * l)
}

impl ScoreModel {
    pub fn new(
        trace: &ThreeStepTrace,
        dataset: &Dataset,
        emb: &EmbeddingSet,
        act: Option<&Activation>,
        mode: NeuronAverage,
    ) -> Result<Self> {
        let arch = emb.arch();
        let d = emb.embed_dim();
        let width = if arch == Arch::AttentionMlp { emb.mlp_width() } else { d };
        if trace.v1.dim() != (d, width) || trace.w1.dim() != (d, d) {
            return Err(Error::DimensionMismatch(format!(
                "trace iterates {:?} and {:?} do not match d={d}, width={width}",
                trace.v1.dim(),
                trace.w1.dim()
            )));
        }
        if (arch == Arch::AttentionMlp) != act.is_some() {
            return Err(Error::ArchMismatch("activation must be given exactly for Attention-MLP".into()));
        }
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let ex = &dataset.examples;
        let a = aggregates(ex, emb);
        let y = centred_targets(ex, emb);
        let (e1, e2, e3) = pair_terms(&a, &y, emb, act)?;
        let eos2 = emb.z_eos().dot(emb.z_eos());
        let r3 = key_sum(ex, emb, &e3) * eos2;
        let (r3, fw_r) = match mode {
            NeuronAverage::Empirical => (r3, None),
            NeuronAverage::Expected => (Array1::zeros(d), Some(r3)),
        };
        let r = [key_sum(ex, emb, &e1) * eos2, key_sum(ex, emb, &e2) * eos2, r3];
        let g = value_backprop(&trace.v1, &a, &y, emb, act);
        let n = ex.len() as f64;
        let trig2 = emb.z_trig().dot(emb.z_trig());
        let informative = trig2
            * ex.iter()
                .zip(g.outer_iter())
                .map(|(e, gi)| emb.embed_in(e.informative_token()).dot(&gi))
                .sum::<f64>()
            / (n * ex[0].tokens.len() as f64);
        let non_informative = non_informative_direction(ex, emb, &g);
        let kappa = if arch == Arch::AttentionMlp { emb.mlp_width() as f64 } else { 1.0 };
        Ok(Self {
            arch,
            eta: trace.eta,
            gamma: trace.gamma,
            kappa,
            query: trace.w1.dot(emb.z_eos()),
            r,
            informative,
            non_informative,
            mode,
            fw_r,
            emb: emb.clone(),
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    /// Informative term at `ℓ` over `ηγ`.
    pub fn signal(&self) -> f64 {
        self.informative / self.eta
    }

    fn keys(&self, fresh: &Example) -> Result<Vec<Array1<f64>>> {
        let v = self.emb.vocab_size();
        if fresh.tokens.iter().any(|&t| t as usize >= v) || fresh.informative_pos >= fresh.tokens.len() {
            return Err(Error::DimensionMismatch("fresh example does not fit the embeddings".into()));
        }
        Ok(fresh
            .tokens
            .iter()
            .enumerate()
            .map(|(pos, &t)| {
                let mut k = self.emb.embed_in(t).to_owned();
                if pos == fresh.informative_pos {
                    k += self.emb.z_trig();
                }
                k
            })
            .collect())
    }

    pub fn decompose(&self, fresh: &Example) -> Result<ScoreDecomposition> {
        let keys = self.keys(fresh)?;
        let normalizer = self.eta * self.gamma * self.kappa;
        let proj = |r: &Array1<f64>| keys.iter().map(|k| k.dot(r)).collect::<Vec<f64>>();
        let s1 = proj(&self.r[0]);
        let s2 = proj(&self.r[1]);
        let s3 = proj(&self.r[2]);
        let mut scores = proj(&self.query);
        if self.mode == NeuronAverage::Expected {
            // Remove the finite-width fluctuation from the scores as well.
            let fw = self.empirical_fw(&keys);
            for (s, f) in scores.iter_mut().zip(fw) {
                *s -= normalizer * f;
            }
        }
        let residual = (0..keys.len()).map(|l| scores[l] / normalizer - s1[l] - s2[l] - s3[l]).collect();
        let mut informative = vec![0.0; keys.len()];
        informative[fresh.informative_pos] = self.gamma * self.informative;
        let non_informative = fresh
            .tokens
            .iter()
            .map(|&t| self.gamma * self.emb.embed_in(t).dot(&self.non_informative))
            .collect();
        Ok(ScoreDecomposition { scores, informative, non_informative, s1, s2, s3, residual, normalizer })
    }

    fn empirical_fw(&self, keys: &[Array1<f64>]) -> Vec<f64> {
        match &self.fw_r {
            Some(r) => keys.iter().map(|k| k.dot(r)).collect(),
            None => vec![0.0; keys.len()],
        }
    }
}

/// Scores and their split on one fresh example.
pub fn decompose_scores(
    fresh: &Example,
    trace: &ThreeStepTrace,
    dataset: &Dataset,
    emb: &EmbeddingSet,
    act: Option<&Activation>,
) -> Result<ScoreDecomposition> {
    ScoreModel::new(trace, dataset, emb, act, NeuronAverage::Empirical)?.decompose(fresh)
}

/// Non-informative term over `ηγ` with `V¹/η` replaced by one component of
/// the value split (Attention-only).
pub fn substituted_non_informative(
    split: &ValueSplit,
    component: ValueComponent,
    dataset: &Dataset,
    emb: &EmbeddingSet,
    fresh: &Example,
) -> Result<Vec<f64>> {
    if emb.arch() != Arch::AttentionOnly {
        return Err(Error::ArchMismatch("the value split is defined for Attention-only".into()));
    }
    let a = aggregates(&dataset.examples, emb);
    let y = centred_targets(&dataset.examples, emb);
    let g = value_backprop(split.part(component), &a, &y, emb, None);
    let dir = non_informative_direction(&dataset.examples, emb, &g);
    Ok(fresh.tokens.iter().map(|&t| emb.embed_in(t).dot(&dir)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingTerm {
    Signal,
    GradNoise,
    MeanBias,
    MlpNoise,
}

impl ScalingTerm {
    pub fn name(self) -> &'static str {
        match self {
            ScalingTerm::Signal => "signal",
            ScalingTerm::GradNoise => "grad_noise",
            ScalingTerm::MeanBias => "mean_bias",
            ScalingTerm::MlpNoise => "mlp_noise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "signal" => Ok(ScalingTerm::Signal),
            "grad_noise" => Ok(ScalingTerm::GradNoise),
            "mean_bias" => Ok(ScalingTerm::MeanBias),
            "mlp_noise" => Ok(ScalingTerm::MlpNoise),
            other => Err(Error::InvalidArgument(format!("unknown scaling term `{other}`"))),
        }
    }
}

/// One grid point: the swept value and the task at that point (its seed is
/// replaced per repetition).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCell {
    pub x: f64,
    pub task: TaskConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub term: ScalingTerm,
    pub x_name: String,
    pub x: f64,
    pub y_median: f64,
    pub y_q25: f64,
    pub y_q75: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingProtocol {
    pub x_name: String,
    pub cells: Vec<ScalingCell>,
    pub seeds: Vec<u64>,
    /// Fresh examples averaged per seed for position-wise terms.
    pub n_fresh: usize,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// One magnitude for one task instance.
pub fn measure_term(term: ScalingTerm, task: &TaskConfig, n_fresh: usize) -> Result<f64> {
    task.validate()?;
    let data = build_task(task, false)?;
    let emb = embeddings_for(task)?;
    let act = (task.arch() == Arch::AttentionMlp).then(crate::activation::build_paper_activation);
    let fresh_seed = derive_seed(task.master_seed, Role::Fresh, 0);
    match term {
        ScalingTerm::Signal | ScalingTerm::MlpNoise => {
            if term == ScalingTerm::MlpNoise && act.is_none() {
                return Err(Error::ArchMismatch("mlp_noise needs Attention-MLP".into()));
            }
            let run = three_step_train(&data, &emb, act.as_ref(), &ThreeStepHyper::auto(), task.arch())?;
            let model = ScoreModel::new(&run.trace, &data, &emb, act.as_ref(), NeuronAverage::Empirical)?;
            if term == ScalingTerm::Signal {
                return Ok(model.signal());
            }
            let fresh = sample_fresh(task, &data.perm, n_fresh.max(1), fresh_seed)?;
            let mut total = 0.0;
            for ex in &fresh {
                total += max_abs(&model.decompose(ex)?.s3);
            }
            Ok(total / fresh.len() as f64)
        }
        ScalingTerm::GradNoise | ScalingTerm::MeanBias => {
            let split = split_value_first_step(&data, &emb, 1.0, task.arch())?;
            let comp = if term == ScalingTerm::GradNoise { ValueComponent::Noise } else { ValueComponent::Bias };
            let fresh = sample_fresh(task, &data.perm, n_fresh.max(1), fresh_seed)?;
            let mut total = 0.0;
            for ex in &fresh {
                total += max_abs(&substituted_non_informative(&split, comp, &data, &emb, ex)?);
            }
            Ok(total / fresh.len() as f64)
        }
    }
}

/// Median and quartiles over seeds of one term at every grid cell.
pub fn measure_scaling(term: ScalingTerm, protocol: &ScalingProtocol) -> Result<Vec<ScalingPoint>> {
    if protocol.cells.len() < 3 {
        return Err(Error::CannotFit(format!("{} grid points, need at least 3", protocol.cells.len())));
    }
    if protocol.seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds".into()));
    }
    let xs: Vec<f64> = protocol.cells.iter().map(|c| c.x).collect();
    if !xs.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidArgument("scaling grid must be strictly increasing".into()));
    }
    let jobs: Vec<(usize, u64)> =
        (0..protocol.cells.len()).flat_map(|c| protocol.seeds.iter().map(move |&s| (c, s))).collect();
    let values: Vec<f64> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            // One task seed per repetition, shared by all cells, so cells differ
            // only in the swept parameter where shapes allow.
            let task = protocol.cells[c].task.clone().with_seed(derive_seed(seed, Role::Cell, 0));
            measure_term(term, &task, protocol.n_fresh)
        })
        .collect::<Result<_>>()?;
    let k = protocol.seeds.len();
    Ok(protocol
        .cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let mut ys = values[c * k..(c + 1) * k].to_vec();
            ys.sort_by(f64::total_cmp);
            ScalingPoint {
                term,
                x_name: protocol.x_name.clone(),
                x: cell.x,
                y_median: quantile(&ys, 0.5),
                y_q25: quantile(&ys, 0.25),
                y_q75: quantile(&ys, 0.75),
                n_seeds: k,
            }
        })
        .collect())
}

pub const SCALING_CSV_HEADER: &str = "term,x_name,x,y_median,y_q25,y_q75,n_seeds";

pub fn scaling_csv(points: &[ScalingPoint]) -> String {
    let mut out = String::from(SCALING_CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.term.name(),
            p.x_name,
            p.x,
            p.y_median,
            p.y_q25,
            p.y_q75,
            p.n_seeds
        ));
    }
    out
}
