//! Frozen random parameters: token embeddings/unembeddings, trigger and EOS
//! directions, and the MLP input weights.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Gaussian};
use crate::taskgen::{Arch, TaskConfig, TokenId};

const DUMP_MAGIC: &[u8; 8] = b"RCEMB001";

/// Read-only after construction. Token vectors are stored row-wise
/// (`V×d`): row `t` is column `t` of the `d×V` matrix `Z_in` (resp. `Z_out`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    tok_in: Array2<f64>,
    tok_out: Array2<f64>,
    z_trig: Array1<f64>,
    z_eos: Array1<f64>,
    w_in: Option<Array2<f64>>,
}

impl EmbeddingSet {
    /// Assembles an embedding set from explicit parts; `tok_in`/`tok_out` are `V×d`.
    pub fn from_parts(
        tok_in: Array2<f64>,
        tok_out: Array2<f64>,
        z_trig: Array1<f64>,
        z_eos: Array1<f64>,
        w_in: Option<Array2<f64>>,
    ) -> Result<Self> {
        let (v, d) = tok_in.dim();
        if d == 0 || v == 0 {
            return Err(Error::InvalidConfig("empty embedding matrix".into()));
        }
        if tok_out.dim() != (v, d) || z_trig.len() != d || z_eos.len() != d {
            return Err(Error::DimensionMismatch("embedding parts disagree on (V, d)".into()));
        }
        if let Some(w) = &w_in {
            if w.ncols() != d || w.nrows() == 0 {
                return Err(Error::DimensionMismatch(format!("W_in must be m×{d} with m >= 1")));
            }
        }
        Ok(Self { tok_in, tok_out, z_trig, z_eos, w_in })
    }

    pub fn vocab_size(&self) -> usize {
        self.tok_in.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.tok_in.ncols()
    }

    pub fn mlp_width(&self) -> usize {
        self.w_in.as_ref().map_or(0, |w| w.nrows())
    }

    pub fn arch(&self) -> Arch {
        if self.w_in.is_some() {
            Arch::AttentionMlp
        } else {
            Arch::AttentionOnly
        }
    }

    /// `Z_in` as a `d×V` view.
    pub fn z_in(&self) -> ArrayView2<'_, f64> {
        self.tok_in.t()
    }

    /// `Z_out` as a `d×V` view.
    pub fn z_out(&self) -> ArrayView2<'_, f64> {
        self.tok_out.t()
    }

    pub fn token_in_rows(&self) -> &Array2<f64> {
        &self.tok_in
    }

    pub fn token_out_rows(&self) -> &Array2<f64> {
        &self.tok_out
    }

    #[inline]
    pub fn embed_in(&self, t: TokenId) -> ArrayView1<'_, f64> {
        self.tok_in.row(t as usize)
    }

    #[inline]
    pub fn embed_out(&self, t: TokenId) -> ArrayView1<'_, f64> {
        self.tok_out.row(t as usize)
    }

    pub fn z_trig(&self) -> &Array1<f64> {
        &self.z_trig
    }

    pub fn z_eos(&self) -> &Array1<f64> {
        &self.z_eos
    }

    pub fn w_in(&self) -> Option<&Array2<f64>> {
        self.w_in.as_ref()
    }

    /// Copy with `Z_out` multiplied by `out_scale`.
    pub fn with_out_scale(&self, out_scale: f64) -> Self {
        let mut c = self.clone();
        c.tok_out *= out_scale;
        c
    }

    /// Copy with `z_trig` multiplied by `c`.
    pub fn with_trigger_scale(&self, c: f64) -> Self {
        let mut e = self.clone();
        e.z_trig *= c;
        e
    }

    /// Little-endian dump: magic, then `V, d, m` as u64, then `Z_in` (d×V),
    /// `Z_out` (d×V), `z_trig`, `z_EOS`, `W_in` (m×d), all row-major f64.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        for n in [self.vocab_size(), self.embed_dim(), self.mlp_width()] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        let mut put = |x: f64| w.write_all(&x.to_le_bytes());
        for x in self.z_in().iter() {
            put(*x)?;
        }
        for x in self.z_out().iter() {
            put(*x)?;
        }
        for x in self.z_trig.iter().chain(self.z_eos.iter()) {
            put(*x)?;
        }
        if let Some(win) = &self.w_in {
            for x in win.iter() {
                put(*x)?;
            }
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::Parse("not an embedding dump".into()));
        }
        let mut u = [0u8; 8];
        let mut dims = [0usize; 3];
        for n in dims.iter_mut() {
            r.read_exact(&mut u)?;
            *n = u64::from_le_bytes(u) as usize;
        }
        let [v, d, m] = dims;
        let mut take = |count: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                r.read_exact(&mut u)?;
                out.push(f64::from_le_bytes(u));
            }
            Ok(out)
        };
        let shape = |data: Vec<f64>, rows, cols| {
            Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Parse(e.to_string()))
        };
        let z_in = shape(take(d * v)?, d, v)?;
        let z_out = shape(take(d * v)?, d, v)?;
        let z_trig = Array1::from(take(d)?);
        let z_eos = Array1::from(take(d)?);
        let w_in = if m > 0 { Some(shape(take(m * d)?, m, d)?) } else { None };
        Self::from_parts(
            z_in.t().as_standard_layout().into_owned(),
            z_out.t().as_standard_layout().into_owned(),
            z_trig,
            z_eos,
            w_in,
        )
    }
}

/// Samples `Z_in`, `Z_out` (token by token), `z_trig`, `z_EOS` with entries
/// `N(0, 1/d)` and, for Attention-MLP, `W_in` row by row with entries `N(0, 1)`,
/// in that order from one Box–Muller stream.
pub fn sample_embeddings<R: Rng + ?Sized>(cfg: &TaskConfig, rng: &mut R) -> Result<EmbeddingSet> {
    let (v, d, m) = (cfg.vocab_size, cfg.embed_dim, cfg.mlp_width);
    if d == 0 {
        return Err(Error::InvalidConfig("embed_dim must be >= 1".into()));
    }
    if v == 0 {
        return Err(Error::InvalidConfig("vocab_size must be >= 1".into()));
    }
    let sd = 1.0 / (d as f64).sqrt();
    let mut g = Gaussian::new();
    let mut tok_in = Array2::zeros((v, d));
    g.fill(rng, tok_in.as_slice_mut().expect("standard layout"), sd);
    let mut tok_out = Array2::zeros((v, d));
    g.fill(rng, tok_out.as_slice_mut().expect("standard layout"), sd);
    let mut z_trig = Array1::zeros(d);
    g.fill(rng, z_trig.as_slice_mut().expect("contiguous"), sd);
    let mut z_eos = Array1::zeros(d);
    g.fill(rng, z_eos.as_slice_mut().expect("contiguous"), sd);
    let w_in = if m > 0 {
        let mut w = Array2::zeros((m, d));
        g.fill(rng, w.as_slice_mut().expect("standard layout"), 1.0);
        Some(w)
    } else {
        None
    };
    Ok(EmbeddingSet { tok_in, tok_out, z_trig, z_eos, w_in })
}

/// Embeddings for `cfg` from its derived embedding seed.
pub fn embeddings_for(cfg: &TaskConfig) -> Result<EmbeddingSet> {
    sample_embeddings(cfg, &mut rng_from_seed(cfg.embed_seed()))
}
