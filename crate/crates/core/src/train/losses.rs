use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1.0;

fn target_tensor(tape: &Tape, logits: Var, target: &BinaryMask) -> Result<crate::tensor::Tensor> {
    let t = target.to_tensor();
    if tape.shape(logits) != t.shape() {
        return Err(Error::shape(format!(
            "logits {:?} do not match target {:?}",
            tape.shape(logits),
            t.shape()
        )));
    }
    Ok(t)
}

/// Mean binary cross-entropy over pixels, in the stable logit form.
pub fn bce_loss(tape: &mut Tape, logits: Var, target: &BinaryMask) -> Result<Var> {
    let t = target_tensor(tape, logits, target)?;
    tape.bce_with_logits(logits, &t)
}

/// `1 − (2·Σ p·t + s) / (Σ p + Σ t + s)` with `p = σ(z)`.
pub fn dice_loss(tape: &mut Tape, logits: Var, target: &BinaryMask) -> Result<Var> {
    let t = target_tensor(tape, logits, target)?;
    let t_sum = target.count() as f64;
    let p = tape.sigmoid(logits);
    let tv = tape.constant(t);
    let pt = tape.mul(p, tv)?;
    let inter = tape.sum(pt);
    let num = tape.affine(inter, 2.0, DICE_SMOOTH);
    let p_sum = tape.sum(p);
    let den = tape.affine(p_sum, 1.0, t_sum + DICE_SMOOTH);
    let ratio = tape.div(num, den)?;
    Ok(tape.affine(ratio, -1.0, 1.0))
}

/// `w_bce·bce + w_dice·dice`.
pub fn combined_loss(
    tape: &mut Tape,
    logits: Var,
    target: &BinaryMask,
    w_bce: f64,
    w_dice: f64,
) -> Result<Var> {
    if !(w_bce >= 0.0 && w_dice >= 0.0) {
        return Err(Error::Config(format!(
            "loss weights must be ≥ 0, got {w_bce}, {w_dice}"
        )));
    }
    let bce = bce_loss(tape, logits, target)?;
    let dice = dice_loss(tape, logits, target)?;
    let a = tape.scale(bce, w_bce);
    let b = tape.scale(dice, w_dice);
    tape.add(a, b)
}
