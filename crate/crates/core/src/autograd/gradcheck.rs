//! Central finite-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates whose probes straddle a ReLU kink.
    pub skipped: usize,
    /// `(param index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

struct Probe {
    value: f64,
    kinks: u64,
}

fn evaluate<F>(f: &F, params: &[Tensor], track: bool) -> Result<(Probe, Tape, Var, Vec<Var>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), track)).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradcheck function must return a scalar, got {:?}",
            value.shape()
        )));
    }
    let probe = Probe {
        value: value.data()[0],
        kinks: tape.kink_signature(),
    };
    Ok((probe, tape, out, vars))
}

/// Compares the tape gradient of `f` at `params` against
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` for every coordinate.
///
/// Relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
/// Coordinates where the two probes take a different ReLU branch than the
/// base point are skipped.
pub fn finite_difference_gradcheck<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!(
            "gradcheck eps {eps} outside (0, 1e-2]"
        )));
    }
    let (base, tape, out, vars) = evaluate(&f, params, true)?;
    let (again, ..) = evaluate(&f, params, false)?;
    if base.value.to_bits() != again.value.to_bits() {
        return Err(Error::CheckInvalid(format!(
            "function is not deterministic: {} vs {}",
            base.value, again.value
        )));
    }
    let grads = tape.backward(out)?;
    drop(tape);

    let mut report = GradcheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    let mut probe_params = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.data().to_vec());
        for j in 0..params[pi].numel() {
            let orig = params[pi].data()[j];
            probe_params[pi].data_mut()[j] = orig + eps;
            let (plus, ..) = evaluate(&f, &probe_params, false)?;
            probe_params[pi].data_mut()[j] = orig - eps;
            let (minus, ..) = evaluate(&f, &probe_params, false)?;
            probe_params[pi].data_mut()[j] = orig;

            if plus.kinks != base.kinks || minus.kinks != base.kinks {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |g| g[j]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_relative_error || rel.is_nan() {
                report.max_relative_error = rel;
                report.worst = Some((pi, j));
            }
        }
    }
    Ok(report)
}
