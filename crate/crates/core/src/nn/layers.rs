use rand::Rng;

use super::params::{Group, ParamId, ParamStore};
use super::Bound;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Attention projection role, the unit LoRA targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProjKind {
    Q,
    K,
    V,
    O,
}

impl ProjKind {
    pub const ALL: [ProjKind; 4] = [ProjKind::Q, ProjKind::K, ProjKind::V, ProjKind::O];
}

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub kind: Option<ProjKind>,
    pub group: Group,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        d_in: usize,
        d_out: usize,
        bias: bool,
        kind: Option<ProjKind>,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[d_out, d_in], bound),
            group,
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), group)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            d_in,
            d_out,
            kind,
            group,
        })
    }

    /// `x·Wᵀ + b` over the trailing axis, plus the low-rank path when an
    /// adapter is bound to this layer.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let base = self.forward_base(tape, bound, x)?;
        match bound.adapter(&self.name) {
            Some(adapter) => crate::lora::add_low_rank(tape, adapter, x, base),
            None => Ok(base),
        }
    }

    pub(crate) fn forward_base(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.d_in) {
            return Err(Error::shape(format!(
                "linear `{}` expects trailing dim {}, got {shape:?}",
                self.name, self.d_in
            )));
        }
        let flat = if shape.len() == 2 {
            x
        } else {
            tape.reshape(x, &[shape.iter().product::<usize>() / self.d_in, self.d_in])?
        };
        let mut y = tape.matmul_nt(flat, bound.var(self.weight))?;
        if let Some(b) = self.bias {
            y = tape.add_bias(y, bound.var(b))?;
        }
        if shape.len() != 2 {
            let mut out = shape;
            *out.last_mut().unwrap() = self.d_out;
            y = tape.reshape(y, &out)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[d]), group)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d]), group)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound.var(self.gamma), bound.var(self.beta), self.eps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                uniform(rng, &[c_out, c_in, k, k], bound),
                group,
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), group)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, bound.var(self.weight), self.stride, self.padding)?;
        tape.add_channel_bias(y, bound.var(self.bias))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64 / (stride * stride) as f64).sqrt();
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                uniform(rng, &[c_in, c_out, k, k], bound),
                group,
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), group)?,
            stride,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv_transpose2d(x, bound.var(self.weight), self.stride)?;
        tape.add_channel_bias(y, bound.var(self.bias))
    }
}

/// `[(h·w)×d]` tokens to a `[d×h×w]` grid.
pub fn tokens_to_grid(tape: &mut Tape, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 2 || shape[0] != h * w {
        return Err(Error::shape(format!("tokens {shape:?} for a {h}×{w} grid")));
    }
    let t = tape.transpose(tokens)?;
    tape.reshape(t, &[shape[1], h, w])
}

/// `[d×h×w]` grid to `[(h·w)×d]` tokens.
pub fn grid_to_tokens(tape: &mut Tape, grid: Var) -> Result<Var> {
    let shape = tape.shape(grid).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(format!("grid {shape:?} is not C×H×W")));
    }
    let flat = tape.reshape(grid, &[shape[0], shape[1] * shape[2]])?;
    tape.transpose(flat)
}
