//! Reusable layers built on the autograd tape.

mod attention;
mod decoder;
mod layers;
mod params;
mod patch;
mod positions;
mod transformer;

use std::collections::HashMap;

pub use attention::{AttentionSpec, MultiHeadAttention};
pub use decoder::UpsampleStack;
pub use layers::{
    grid_to_tokens, tokens_to_grid, Conv2d, ConvTranspose2d, LayerNorm, Linear, ProjKind,
};
pub use params::{Group, Param, ParamId, ParamStore};
pub use patch::patchify;
pub use positions::sinusoidal_positions;
pub use transformer::TransformerBlock;

pub(crate) use layers::uniform;

use crate::autograd::{Tape, Var};

/// Low-rank adapter tensors recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundAdapter {
    pub target: String,
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

/// Parameter handles for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: Vec<Var>,
    adapters: HashMap<String, BoundAdapter>,
}

impl Bound {
    pub fn new(vars: Vec<Var>) -> Self {
        Self {
            vars,
            adapters: HashMap::new(),
        }
    }

    /// Binds every parameter of `store` on `tape`.
    pub fn from_store(store: &ParamStore, tape: &mut Tape) -> Self {
        Self::new(store.bind(tape))
    }

    pub fn with_adapter(mut self, adapter: BoundAdapter) -> Self {
        self.adapters.insert(adapter.target.clone(), adapter);
        self
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn adapter(&self, layer: &str) -> Option<&BoundAdapter> {
        self.adapters.get(layer)
    }
}
