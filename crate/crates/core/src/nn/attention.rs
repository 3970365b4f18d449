use rand::Rng;

use super::layers::{Linear, ProjKind};
use super::params::{Group, ParamStore};
use super::Bound;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub d_model: usize,
    pub n_heads: usize,
    /// Width of the key/value source tokens.
    pub kv_dim: usize,
}

impl AttentionSpec {
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self> {
        Self::with_kv_dim(d_model, n_heads, d_model)
    }

    pub fn with_kv_dim(d_model: usize, n_heads: usize, kv_dim: usize) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            d_model,
            n_heads,
            kv_dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub spec: AttentionSpec,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        spec: AttentionSpec,
    ) -> Result<Self> {
        let d = spec.d_model;
        // A key bias shifts every score of a query by the same amount, which
        // softmax cancels, so K carries no bias.
        let mut proj = |suffix: &str, d_in: usize, kind| {
            let bias = kind != ProjKind::K;
            Linear::new(
                store,
                rng,
                &format!("{name}.{suffix}"),
                group,
                d_in,
                d,
                bias,
                Some(kind),
            )
        };
        Ok(Self {
            q: proj("q", d, ProjKind::Q)?,
            k: proj("k", spec.kv_dim, ProjKind::K)?,
            v: proj("v", spec.kv_dim, ProjKind::V)?,
            o: proj("o", d, ProjKind::O)?,
            spec,
        })
    }

    pub fn projections(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    /// Scaled dot-product attention of `q_tokens[n_q×d]` over
    /// `kv_tokens[n_kv×kv_dim]`, softmax along the key axis.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        q_tokens: Var,
        kv_tokens: Var,
    ) -> Result<Var> {
        let (qs, ks) = (
            tape.shape(q_tokens).to_vec(),
            tape.shape(kv_tokens).to_vec(),
        );
        if qs.len() != 2 || qs[1] != self.spec.d_model || ks.len() != 2 || ks[1] != self.spec.kv_dim
        {
            return Err(Error::shape(format!(
                "attention expects q [n×{}] and kv [m×{}], got {qs:?} and {ks:?}",
                self.spec.d_model, self.spec.kv_dim
            )));
        }
        let hd = self.spec.head_dim();
        let q = self.q.forward(tape, bound, q_tokens)?;
        let q = tape.scale(q, 1.0 / (hd as f64).sqrt());
        let k = self.k.forward(tape, bound, kv_tokens)?;
        let v = self.v.forward(tape, bound, kv_tokens)?;
        let mut heads = Vec::with_capacity(self.spec.n_heads);
        for h in 0..self.spec.n_heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let weights = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(weights, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        self.o.forward(tape, bound, merged)
    }
}
