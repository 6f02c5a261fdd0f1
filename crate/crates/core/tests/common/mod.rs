#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use recall_core::activation::{build_paper_activation, Activation};
use recall_core::embed::{embeddings_for, EmbeddingSet};
use recall_core::model::ModelParams;
use recall_core::rng::{rng_from_seed, Gaussian};
use recall_core::taskgen::{build_task, Arch, Dataset, TaskConfig};

pub struct Setup {
    pub cfg: TaskConfig,
    pub data: Dataset,
    pub emb: EmbeddingSet,
    pub act: Option<Activation>,
}

pub fn setup(v: usize, l: usize, n: usize, d: usize, m: usize, seed: u64) -> Setup {
    let cfg = TaskConfig::new(v, l, n, d, m).with_seed(seed);
    let data = build_task(&cfg, false).unwrap();
    let emb = embeddings_for(&cfg).unwrap();
    let act = (m > 0).then(build_paper_activation);
    Setup { cfg, data, emb, act }
}

pub fn gaussian_matrix(rows: usize, cols: usize, sd: f64, seed: u64) -> Array2<f64> {
    let mut rng = rng_from_seed(seed);
    let mut g = Gaussian::new();
    let mut a = Array2::zeros((rows, cols));
    g.fill(&mut rng, a.as_slice_mut().unwrap(), sd);
    a
}

/// Random parameters large enough that attention is far from uniform.
pub fn random_params(s: &Setup, seed: u64) -> ModelParams {
    let d = s.cfg.embed_dim;
    let width = if s.cfg.arch() == Arch::AttentionMlp { s.cfg.mlp_width } else { d };
    let mut rng = rng_from_seed(seed ^ 0xabcdef);
    let scale_w: f64 = rng.gen_range(0.5..3.0);
    ModelParams {
        arch: s.cfg.arch(),
        value: gaussian_matrix(d, width, 1.0 / (width as f64).sqrt(), seed),
        key_query: gaussian_matrix(d, d, scale_w, seed.wrapping_add(1)),
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}
