use rand::Rng;

use super::layers::{tokens_to_grid, Conv2d, ConvTranspose2d};
use super::params::{Group, ParamStore};
use super::Bound;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

/// Tokens → two stride-2 transposed convolutions (halving channels, ReLU
/// between) → 1-channel projection → bilinear resize.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleStack {
    pub up1: ConvTranspose2d,
    pub up2: ConvTranspose2d,
    pub proj: Conv2d,
    pub d_model: usize,
}

impl UpsampleStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        d_model: usize,
    ) -> Result<Self> {
        if d_model < 4 || d_model % 4 != 0 {
            return Err(Error::Config(format!(
                "upsampling needs d_model divisible by 4, got {d_model}"
            )));
        }
        let (c1, c2) = (d_model / 2, d_model / 4);
        Ok(Self {
            up1: ConvTranspose2d::new(
                store,
                rng,
                &format!("{name}.up1"),
                group,
                d_model,
                c1,
                2,
                2,
            )?,
            up2: ConvTranspose2d::new(store, rng, &format!("{name}.up2"), group, c1, c2, 2, 2)?,
            proj: Conv2d::new(store, rng, &format!("{name}.proj"), group, c2, 1, 1, 1, 0)?,
            d_model,
        })
    }

    /// Returns mask logits `[1×target_h×target_w]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: Var,
        (h, w): (usize, usize),
        (target_h, target_w): (usize, usize),
    ) -> Result<Var> {
        if target_h < h || target_w < w {
            return Err(Error::shape(format!(
                "target {target_h}×{target_w} smaller than grid {h}×{w}"
            )));
        }
        let grid = tokens_to_grid(tape, tokens, h, w)?;
        let x = self.up1.forward(tape, bound, grid)?;
        let x = tape.relu(x);
        let x = self.up2.forward(tape, bound, x)?;
        let x = self.proj.forward(tape, bound, x)?;
        if tape.shape(x)[1..] == [target_h, target_w] {
            Ok(x)
        } else {
            tape.resize_bilinear(x, target_h, target_w)
        }
    }
}
