//! Collapse-avoidance operators: Sinkhorn-Knopp normalization and centering
//! of teacher predictions, and the mean-entropy-maximization (ME-MAX) term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels::logsumexp, Array, Tape, Var};

/// How teacher predictions are adjusted before they become targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Renorm {
    #[default]
    None,
    Center,
    Sinkhorn,
}

impl std::str::FromStr for Renorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Renorm::None),
            "center" => Ok(Renorm::Center),
            "sinkhorn" => Ok(Renorm::Sinkhorn),
            _ => Err(Error::Config(format!(
                "unknown renorm '{s}', expected one of none, center, sinkhorn"
            ))),
        }
    }
}

impl std::fmt::Display for Renorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Renorm::None => "none",
            Renorm::Center => "center",
            Renorm::Sinkhorn => "sinkhorn",
        })
    }
}

pub const DEFAULT_SINKHORN_ITERS: usize = 3;
pub const DEFAULT_CENTER_RATE: f64 = 0.9;

/// Sinkhorn-Knopp on a positive `b×c` matrix. Each iteration scales columns
/// to sum `b/c` and then rows to sum 1, so the output rows are distributions.
pub fn sinkhorn(p: &Array, iters: usize) -> Result<Array> {
    if p.ndim() != 2 {
        return Err(Error::shape("sinkhorn", format!("{:?}", p.shape())));
    }
    if iters == 0 {
        return Err(Error::Domain("sinkhorn needs at least one iteration".into()));
    }
    if let Some(x) = p.data().iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
        return Err(Error::Domain(format!("sinkhorn entries must be positive, found {x}")));
    }
    let (b, c) = (p.shape()[0], p.shape()[1]);
    let col_target = b as f64 / c as f64;
    let mut q = p.clone();
    let mut col_sums = vec![0.0; c];
    for _ in 0..iters {
        col_sums.iter_mut().for_each(|s| *s = 0.0);
        for r in 0..b {
            for (s, x) in col_sums.iter_mut().zip(q.row(r)) {
                *s += x;
            }
        }
        for r in 0..b {
            for (x, s) in q.row_mut(r).iter_mut().zip(&col_sums) {
                *x = *x / s * col_target;
            }
        }
        for r in 0..b {
            let row = q.row_mut(r);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
    Ok(q)
}

/// Sinkhorn-Knopp on `exp(scores)`, carried out in the log domain.
/// Returns row-normalized log-probabilities.
pub fn sinkhorn_log(scores: &Array, iters: usize) -> Result<Array> {
    if scores.ndim() != 2 {
        return Err(Error::shape("sinkhorn_log", format!("{:?}", scores.shape())));
    }
    if iters == 0 {
        return Err(Error::Domain("sinkhorn needs at least one iteration".into()));
    }
    if !scores.all_finite() {
        return Err(Error::Domain("sinkhorn scores must be finite".into()));
    }
    let (b, c) = (scores.shape()[0], scores.shape()[1]);
    let log_col_target = (b as f64 / c as f64).ln();
    let mut l = scores.clone();
    for _ in 0..iters {
        let col_lse: Vec<f64> = (0..c)
            .map(|y| logsumexp((0..b).map(|r| l.get2(r, y))))
            .collect();
        for r in 0..b {
            for (x, s) in l.row_mut(r).iter_mut().zip(&col_lse) {
                *x += log_col_target - s;
            }
        }
        for r in 0..b {
            let row = l.row_mut(r);
            let s = logsumexp(row.iter().copied());
            row.iter_mut().for_each(|x| *x -= s);
        }
    }
    Ok(l)
}

/// Running mean of teacher logits for one head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterState {
    pub center: Vec<f64>,
    pub rate: f64,
}

impl CenterState {
    pub fn new(c: usize, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain(format!("center rate must be in [0,1), got {rate}")));
        }
        Ok(Self {
            center: vec![0.0; c],
            rate,
        })
    }

    /// Subtracts the center from every row.
    pub fn apply(&self, logits: &Array) -> Result<Array> {
        if logits.cols() != self.center.len() {
            return Err(Error::shape(
                "center_apply",
                format!("{:?} vs center of {}", logits.shape(), self.center.len()),
            ));
        }
        let mut out = logits.clone();
        for r in 0..out.rows() {
            for (x, c) in out.row_mut(r).iter_mut().zip(&self.center) {
                *x -= c;
            }
        }
        Ok(out)
    }

    /// `center ← rate·center + (1 − rate)·mean(rows of logits)`
    pub fn update(&mut self, logits: &Array) -> Result<()> {
        if logits.cols() != self.center.len() || logits.rows() == 0 {
            return Err(Error::shape(
                "center_update",
                format!("{:?} vs center of {}", logits.shape(), self.center.len()),
            ));
        }
        let n = logits.rows() as f64;
        let mut mean = vec![0.0; self.center.len()];
        for r in 0..logits.rows() {
            for (m, x) in mean.iter_mut().zip(logits.row(r)) {
                *m += x;
            }
        }
        for (c, m) in self.center.iter_mut().zip(mean) {
            *c = self.rate * *c + (1.0 - self.rate) * (m / n);
        }
        Ok(())
    }
}

/// `-λ·(1/m)·Σ_j H[p̄_j]` where `p̄_j` is the mean over all rows of the
/// student probabilities of head `j`. Each entry of `head_logprobs` is the
/// `N×c` log-probability block of one head over every student view.
pub fn memax_term(tape: &mut Tape, head_logprobs: &[Var], lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("ME-MAX weight must be >= 0, got {lambda}")));
    }
    if head_logprobs.is_empty() {
        return Err(Error::shape("memax_term", "no heads"));
    }
    let m = head_logprobs.len() as f64;
    let mut entropies = Vec::with_capacity(head_logprobs.len());
    for &lp in head_logprobs {
        let p = tape.exp(lp)?;
        let mean = tape.mean_axis(p, 0)?;
        let log_mean = tape.log(mean)?;
        let plogp = tape.mul(mean, log_mean)?;
        entropies.push(tape.sum(plogp)?); // -H
    }
    let mut total = entropies[0];
    for &e in &entropies[1..] {
        total = tape.add(total, e)?;
    }
    // Σ_j (-H_j) · λ/m
    tape.scale(total, lambda / m)
}
