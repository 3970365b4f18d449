use rand::Rng;

use super::attention::{AttentionSpec, MultiHeadAttention};
use super::layers::{LayerNorm, Linear};
use super::params::{Group, ParamStore};
use super::Bound;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

/// Pre-norm residual block: self-attention, optional cross-attention, MLP
/// with hidden width `4·d`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub norm_mlp: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    /// `cross_kv_dim`: width of the context tokens, or `None` for a
    /// self-attention-only block.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        d_model: usize,
        n_heads: usize,
        cross_kv_dim: Option<usize>,
    ) -> Result<Self> {
        let spec = AttentionSpec::new(d_model, n_heads)?;
        let norm_self = LayerNorm::new(store, &format!("{name}.norm_self"), group, d_model)?;
        let self_attn =
            MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), group, spec)?;
        let cross = match cross_kv_dim {
            Some(kv) => {
                let spec = AttentionSpec::with_kv_dim(d_model, n_heads, kv)?;
                Some((
                    LayerNorm::new(store, &format!("{name}.norm_cross"), group, d_model)?,
                    MultiHeadAttention::new(
                        store,
                        rng,
                        &format!("{name}.cross_attn"),
                        group,
                        spec,
                    )?,
                ))
            }
            None => None,
        };
        let norm_mlp = LayerNorm::new(store, &format!("{name}.norm_mlp"), group, d_model)?;
        let hidden = 4 * d_model;
        let fc1 = Linear::new(
            store,
            rng,
            &format!("{name}.mlp.fc1"),
            group,
            d_model,
            hidden,
            true,
            None,
        )?;
        let fc2 = Linear::new(
            store,
            rng,
            &format!("{name}.mlp.fc2"),
            group,
            hidden,
            d_model,
            true,
            None,
        )?;
        Ok(Self {
            norm_self,
            self_attn,
            cross,
            norm_mlp,
            fc1,
            fc2,
        })
    }

    pub fn attentions(&self) -> impl Iterator<Item = &MultiHeadAttention> {
        std::iter::once(&self.self_attn).chain(self.cross.as_ref().map(|(_, a)| a))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        context: Option<Var>,
    ) -> Result<Var> {
        let h = self.norm_self.forward(tape, bound, x)?;
        let a = self.self_attn.forward(tape, bound, h, h)?;
        let mut x = tape.add(x, a)?;
        match (&self.cross, context) {
            (Some((norm, attn)), Some(ctx)) => {
                let h = norm.forward(tape, bound, x)?;
                let a = attn.forward(tape, bound, h, ctx)?;
                x = tape.add(x, a)?;
            }
            (None, Some(_)) => {
                return Err(Error::Contract(
                    "context passed to a block without cross-attention".into(),
                ))
            }
            _ => {}
        }
        let h = self.norm_mlp.forward(tape, bound, x)?;
        let h = self.fc1.forward(tape, bound, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, bound, h)?;
        tape.add(x, h)
    }
}
