//! Central finite-difference checks against the reverse sweep.

use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)` over all checked
    /// entries; `None` when there were no parameters.
    pub max_rel_error: Option<f64>,
    pub checked: usize,
    /// `(parameter index, flat entry)` of the worst entry.
    pub worst: Option<(usize, usize)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error.is_none_or(|e| e < tol)
    }
}

pub fn rel_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8)
}

/// Builds the graph once with `params` registered as leaves, then compares
/// the reverse-mode gradient against `(f(θ + h e_k) - f(θ - h e_k)) / 2h`
/// for every parameter entry.
///
/// Perturbed losses are obtained by replaying the tape, so anything the
/// builder inserted as a constant (for example stop-gradient importance
/// weights computed from a forward pass) stays frozen at its base value.
pub fn finite_diff_check<F>(params: &[Array], h: f64, build: F) -> Result<GradCheck>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    check_with(params, h, Stencil::Central, build)
}

/// Same as [`finite_diff_check`] with the fourth-order five-point stencil
/// `(-f(θ+2h) + 8f(θ+h) - 8f(θ-h) + f(θ-2h)) / 12h`. Its truncation error is
/// small enough to resolve gradients well below the central stencil's floor.
pub fn finite_diff_check_five_point<F>(params: &[Array], h: f64, build: F) -> Result<GradCheck>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    check_with(params, h, Stencil::FivePoint, build)
}

#[derive(Clone, Copy)]
enum Stencil {
    Central,
    FivePoint,
}

fn check_with<F>(params: &[Array], h: f64, stencil: Stencil, build: F) -> Result<GradCheck>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let base = tape.value(loss).item();
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss {base}")));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Array> = vars
        .iter()
        .map(|&v| grads.get(&tape, v))
        .collect::<Result<_>>()?;

    let mut out = GradCheck {
        max_rel_error: None,
        checked: 0,
        worst: None,
    };
    for (pi, &v) in vars.iter().enumerate() {
        for k in 0..params[pi].len() {
            let x0 = params[pi].data()[k];
            let mut eval = |x: f64| -> Result<f64> {
                tape.leaf_value_mut(v)?.data_mut()[k] = x;
                tape.replay()?;
                let f = tape.value(loss).item();
                if !f.is_finite() {
                    return Err(Error::NonFinite(format!("perturbed loss {f}")));
                }
                Ok(f)
            };
            let fd = match stencil {
                Stencil::Central => (eval(x0 + h)? - eval(x0 - h)?) / (2.0 * h),
                Stencil::FivePoint => {
                    let (p1, m1) = (eval(x0 + h)?, eval(x0 - h)?);
                    let (p2, m2) = (eval(x0 + 2.0 * h)?, eval(x0 - 2.0 * h)?);
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
                }
            };
            tape.leaf_value_mut(v)?.data_mut()[k] = x0;
            let err = rel_error(analytic[pi].data()[k], fd);
            out.checked += 1;
            if out.max_rel_error.is_none_or(|e| err > e) {
                out.max_rel_error = Some(err);
                out.worst = Some((pi, k));
            }
        }
    }
    tape.replay()?;
    Ok(out)
}
