//! The synthetic factual-recall task: a hidden permutation of the vocabulary,
//! uniform noise sequences, one informative position per sequence, and the
//! permuted informative token as label.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, derived_rng, rng_from_seed, Role};

pub type TokenId = u32;

/// Upper bound on `N·L` token slots held by one dataset.
pub const DEFAULT_TOKEN_CAP: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    AttentionOnly,
    AttentionMlp,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::AttentionOnly => "attention_only",
            Arch::AttentionMlp => "attention_mlp",
        }
    }
}

/// Problem-scale parameters. The architecture is implied by `mlp_width`:
/// zero means Attention-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_samples: usize,
    pub embed_dim: usize,
    pub mlp_width: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub fix_informative_pos: bool,
}

impl TaskConfig {
    pub fn new(vocab_size: usize, seq_len: usize, n_samples: usize, embed_dim: usize, mlp_width: usize) -> Self {
        Self { vocab_size, seq_len, n_samples, embed_dim, mlp_width, master_seed: 0, fix_informative_pos: false }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self
    }

    pub fn with_fixed_position(mut self, fixed: bool) -> Self {
        self.fix_informative_pos = fixed;
        self
    }

    pub fn arch(&self) -> Arch {
        if self.mlp_width == 0 {
            Arch::AttentionOnly
        } else {
            Arch::AttentionMlp
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig(format!("vocab_size must be >= 2, got {}", self.vocab_size)));
        }
        if self.seq_len == 0 {
            return Err(Error::InvalidConfig("seq_len must be >= 1".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be >= 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim must be >= 1".into()));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::InvalidConfig("vocab_size does not fit a 32-bit token id".into()));
        }
        Ok(())
    }

    pub fn perm_seed(&self) -> u64 {
        derive_seed(self.master_seed, Role::Permutation, 0)
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.master_seed, Role::Data, 0)
    }

    pub fn embed_seed(&self) -> u64 {
        derive_seed(self.master_seed, Role::Embedding, 0)
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.master_seed, Role::Eval, 0)
    }

    pub fn manifest_entry(&self) -> ManifestEntry {
        ManifestEntry {
            v: self.vocab_size,
            l: self.seq_len,
            n: self.n_samples,
            d: self.embed_dim,
            m: self.mlp_width,
            master_seed: self.master_seed,
            perm_seed: self.perm_seed(),
            data_seed: self.data_seed(),
            fix_informative_pos: self.fix_informative_pos,
        }
    }
}

/// Provenance record from which a dataset is regenerated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub master_seed: u64,
    pub perm_seed: u64,
    pub data_seed: u64,
    pub fix_informative_pos: bool,
}

/// Bijection on `[0, V)`; `apply(t)` is the label of informative token `t`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Permutation {
    mapping: Vec<TokenId>,
}

impl Permutation {
    pub fn identity(v: usize) -> Self {
        Self { mapping: (0..v as TokenId).collect() }
    }

    pub fn from_mapping(mapping: Vec<TokenId>) -> Result<Self> {
        let v = mapping.len();
        let mut seen = vec![false; v];
        for &t in &mapping {
            let t = t as usize;
            if t >= v || seen[t] {
                return Err(Error::InvalidArgument(format!("mapping is not a bijection on [0, {v})")));
            }
            seen[t] = true;
        }
        Ok(Self { mapping })
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[TokenId] {
        &self.mapping
    }

    #[inline]
    pub fn apply(&self, t: TokenId) -> TokenId {
        self.mapping[t as usize]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &t) in self.mapping.iter().enumerate() {
            inv[t as usize] = i as TokenId;
        }
        Self { mapping: inv }
    }

    /// `(self ∘ other)(t) = self(other(t))`.
    pub fn compose(&self, other: &Self) -> Self {
        assert_eq!(self.len(), other.len(), "composing permutations of different sizes");
        Self { mapping: other.mapping.iter().map(|&t| self.apply(t)).collect() }
    }
}

/// Uniform permutation by Fisher–Yates (`SliceRandom::shuffle`).
pub fn sample_permutation<R: Rng + ?Sized>(v: usize, rng: &mut R) -> Result<Permutation> {
    if v < 2 {
        return Err(Error::InvalidConfig(format!("vocab_size must be >= 2, got {v}")));
    }
    let mut mapping: Vec<TokenId> = (0..v as TokenId).collect();
    mapping.shuffle(rng);
    Ok(Permutation { mapping })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub informative_pos: usize,
    pub label: TokenId,
}

impl Example {
    pub fn informative_token(&self) -> TokenId {
        self.tokens[self.informative_pos]
    }
}

/// Tokens first (L uniform draws), then the informative position.
pub fn sample_example<R: Rng + ?Sized>(cfg: &TaskConfig, perm: &Permutation, rng: &mut R) -> Result<Example> {
    cfg.validate()?;
    if perm.len() != cfg.vocab_size {
        return Err(Error::DimensionMismatch(format!(
            "permutation has size {}, vocab_size is {}",
            perm.len(),
            cfg.vocab_size
        )));
    }
    Ok(draw_example(cfg, perm, rng))
}

fn draw_example<R: Rng + ?Sized>(cfg: &TaskConfig, perm: &Permutation, rng: &mut R) -> Example {
    let v = cfg.vocab_size as TokenId;
    let tokens: Vec<TokenId> = (0..cfg.seq_len).map(|_| rng.gen_range(0..v)).collect();
    let informative_pos = if cfg.fix_informative_pos { 0 } else { rng.gen_range(0..cfg.seq_len) };
    let label = perm.apply(tokens[informative_pos]);
    Example { tokens, informative_pos, label }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub config: TaskConfig,
    pub perm: Permutation,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Builds a dataset around examples that were produced elsewhere (fresh
    /// evaluation draws, hand-built fixtures). `seed` is kept for provenance only.
    pub fn from_examples(config: TaskConfig, perm: Permutation, examples: Vec<Example>, seed: u64) -> Self {
        Self { examples, config, perm, seed }
    }
}

/// Seed of example `index` in a dataset generated from `seed`.
pub fn example_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, Role::Example, index as u64)
}

/// Regenerates example `index` of `sample_dataset(cfg, perm, seed)` alone.
pub fn regenerate_example(cfg: &TaskConfig, perm: &Permutation, seed: u64, index: usize) -> Result<Example> {
    let mut rng = rng_from_seed(example_seed(seed, index));
    sample_example(cfg, perm, &mut rng)
}

pub fn sample_dataset(cfg: &TaskConfig, perm: &Permutation, seed: u64) -> Result<Dataset> {
    sample_dataset_capped(cfg, perm, seed, DEFAULT_TOKEN_CAP)
}

pub fn sample_dataset_capped(cfg: &TaskConfig, perm: &Permutation, seed: u64, token_cap: usize) -> Result<Dataset> {
    cfg.validate()?;
    if perm.len() != cfg.vocab_size {
        return Err(Error::DimensionMismatch(format!(
            "permutation has size {}, vocab_size is {}",
            perm.len(),
            cfg.vocab_size
        )));
    }
    let slots = cfg.n_samples.checked_mul(cfg.seq_len).unwrap_or(usize::MAX);
    if slots > token_cap {
        return Err(Error::ResourceCap(format!("N*L = {slots} exceeds token cap {token_cap}")));
    }
    let examples = (0..cfg.n_samples)
        .map(|i| {
            let mut rng = rng_from_seed(example_seed(seed, i));
            draw_example(cfg, perm, &mut rng)
        })
        .collect();
    Ok(Dataset { examples, config: *cfg, perm: perm.clone(), seed })
}

/// `n` fresh examples from an independent stream, for evaluation.
pub fn sample_fresh(cfg: &TaskConfig, perm: &Permutation, n: usize, seed: u64) -> Result<Vec<Example>> {
    cfg.validate()?;
    let mut rng = derived_rng(seed, Role::Fresh, 0);
    (0..n).map(|_| sample_example(cfg, perm, &mut rng)).collect()
}

/// Permutation, dataset and their seeds, all derived from `cfg.master_seed`.
pub fn build_task(cfg: &TaskConfig, identity_perm: bool) -> Result<Dataset> {
    cfg.validate()?;
    let perm = if identity_perm {
        Permutation::identity(cfg.vocab_size)
    } else {
        sample_permutation(cfg.vocab_size, &mut rng_from_seed(cfg.perm_seed()))?
    };
    sample_dataset(cfg, &perm, cfg.data_seed())
}
