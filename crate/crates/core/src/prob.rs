//! Unnormalized cross-entropy, entropy and KL divergence over finite outcome
//! spaces, plus the entropy/variance relation used by variance weighting.
//!
//! For non-negative `p`, `q`:
//!
//! ```text
//! H×[p, q] = -Σ p log q + Σ q - 1
//! H[p]     = H×[p, p]
//! K[p, q]  = H×[p, q] - H[p]
//! ```
//!
//! with `0 log 0 = 0`. A positive `p_y` against `q_y = 0` yields `+inf`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Non-negative weights over `c` outcomes; need not be normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(**w >= 0.0) || !w.is_finite())
        {
            return Err(Error::Domain(format!("weight {i} is {w}, expected finite >= 0")));
        }
        Ok(Self { weights })
    }

    /// Builds the measure `exp(log_weights)`.
    pub fn from_log(log_weights: &[f64]) -> Result<Self> {
        Self::new(log_weights.iter().map(|l| l.exp()).collect())
    }

    pub fn uniform(c: usize) -> Self {
        Self {
            weights: vec![1.0 / c as f64; c],
        }
    }

    pub fn one_hot(c: usize, at: usize) -> Self {
        let mut weights = vec![0.0; c];
        weights[at] = 1.0;
        Self { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_normalized(&self) -> bool {
        (self.mass() - 1.0).abs() <= 1e-9
    }
}

fn same_support(p: &DiscreteMeasure, q: &DiscreteMeasure) {
    assert_eq!(p.len(), q.len(), "measures over different outcome counts");
}

pub fn unnorm_cross_entropy(p: &DiscreteMeasure, q: &DiscreteMeasure) -> f64 {
    same_support(p, q);
    let mut acc = 0.0;
    for (&pi, &qi) in p.weights.iter().zip(&q.weights) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        acc -= pi * qi.ln();
    }
    acc + q.mass() - 1.0
}

pub fn entropy(p: &DiscreteMeasure) -> f64 {
    unnorm_cross_entropy(p, p)
}

pub fn unnorm_kl(p: &DiscreteMeasure, q: &DiscreteMeasure) -> f64 {
    let ce = unnorm_cross_entropy(p, q);
    if ce.is_infinite() {
        return ce;
    }
    ce - entropy(p)
}

/// `-Σ exp(l) l` for a normalized log-distribution; masked `-inf` entries
/// contribute zero.
pub fn entropy_from_log(log_p: &[f64]) -> f64 {
    -log_p
        .iter()
        .filter(|l| **l != f64::NEG_INFINITY)
        .map(|&l| l.exp() * l)
        .sum::<f64>()
}

/// `-Σ exp(log_p) log_q` (normalized arguments, log domain).
pub fn cross_entropy_from_log(log_p: &[f64], log_q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&lp, &lq) in log_p.iter().zip(log_q) {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        if lq == f64::NEG_INFINITY {
            return f64::INFINITY;
        }
        acc -= lp.exp() * lq;
    }
    acc
}

/// `K[p, q]` for normalized log-distributions.
pub fn kl_from_log(log_p: &[f64], log_q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&lp, &lq) in log_p.iter().zip(log_q) {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        if lq == f64::NEG_INFINITY {
            return f64::INFINITY;
        }
        acc += lp.exp() * (lp - lq);
    }
    acc
}

/// Mean and variance of the outcome index under `p`, with outcomes
/// numbered `1..=c`.
pub fn index_moments(p: &[f64]) -> (f64, f64) {
    let mean: f64 = p.iter().enumerate().map(|(i, w)| w * (i + 1) as f64).sum();
    let var = p
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let d = (i + 1) as f64 - mean;
            w * d * d
        })
        .sum();
    (mean, var)
}

/// `½ log(Var_p[X] + 1/12) + ½ log(2πe) - H[p]`, which is non-negative for
/// every normalized `p` on the integers `1..=c`.
pub fn entropy_variance_bound_gap(p: &DiscreteMeasure) -> f64 {
    let (_, var) = index_moments(&p.weights);
    let rhs = 0.5 * (var + 1.0 / 12.0).ln() + 0.5 * (2.0 * PI * std::f64::consts::E).ln();
    rhs - entropy(p)
}
