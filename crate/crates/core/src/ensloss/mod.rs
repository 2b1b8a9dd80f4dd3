//! Weighted ensemble cross-entropy.
//!
//! For `m` teacher heads `t_i` and `m` student heads `s_j` the loss is
//!
//! ```text
//! L = (1/b) Σ_x Σ_{i,j} H×[w_ijY ⊙ t_i(Y|x), s_j(Y|x)]
//! w_ijy = softmax over (i,j) of f_ijy / γ
//! ```
//!
//! with the score `f` chosen by a [`WeightingScheme`]. Weights are always
//! computed from plain values, so they never carry gradient.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::prob::{entropy_from_log, index_moments, kl_from_log, unnorm_kl, DiscreteMeasure};
use crate::tensor::{kernels::logsumexp, rel_error, Array, Tape, Var};

/// Loss values above this abort training.
pub const DIVERGENCE_THRESHOLD: f64 = 1e4;
/// Variance floor of the low-variance-teacher score.
pub const LOW_VAR_EPSILON: f64 = 1.0 / 12.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Student,
    Teacher,
}

/// `b×m×c` log-probabilities with normalized `(sample, head)` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbCube {
    values: Array,
    source: Source,
}

impl LogProbCube {
    pub fn new(values: Array, source: Source) -> Result<Self> {
        if values.ndim() != 3 || values.is_empty() {
            return Err(Error::shape("LogProbCube", format!("{:?}", values.shape())));
        }
        let c = values.shape()[2];
        for (r, row) in values.data().chunks(c).enumerate() {
            let lse = logsumexp(row.iter().copied());
            if !(lse.abs() <= 1e-9) {
                return Err(Error::Domain(format!(
                    "row {r} of the log-probability cube is not normalized (logsumexp {lse})"
                )));
            }
        }
        Ok(Self { values, source })
    }

    /// Stacks per-head `b×c` blocks.
    pub fn from_heads(heads: &[&Array], source: Source) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| Error::shape("LogProbCube", "no heads"))?;
        if first.ndim() != 2 {
            return Err(Error::shape("LogProbCube", format!("{:?}", first.shape())));
        }
        let (b, c) = (first.shape()[0], first.shape()[1]);
        let m = heads.len();
        let mut data = vec![0.0; b * m * c];
        for (j, h) in heads.iter().enumerate() {
            if h.shape() != [b, c] {
                return Err(Error::shape(
                    "LogProbCube",
                    format!("head {j} is {:?}, expected [{b}, {c}]", h.shape()),
                ));
            }
            for x in 0..b {
                data[(x * m + j) * c..(x * m + j + 1) * c].copy_from_slice(h.row(x));
            }
        }
        Self::new(Array::new(vec![b, m, c], data)?, source)
    }

    /// Cube of the current values of per-head tape nodes.
    pub fn from_tape(tape: &Tape, heads: &[Var], source: Source) -> Result<Self> {
        let values: Vec<&Array> = heads.iter().map(|&v| tape.value(v)).collect();
        Self::from_heads(&values, source)
    }

    pub fn values(&self) -> &Array {
        &self.values
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn codes(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn row(&self, x: usize, j: usize) -> &[f64] {
        let (m, c) = (self.heads(), self.codes());
        &self.values.data()[(x * m + j) * c..(x * m + j + 1) * c]
    }

    /// `b×c` block of head `j`.
    pub fn head(&self, j: usize) -> Array {
        let (b, c) = (self.batch(), self.codes());
        let data = (0..b).flat_map(|x| self.row(x, j).iter().copied()).collect();
        Array::new(vec![b, c], data).expect("shape matches data")
    }

    /// `b×m` entropies of every row.
    pub fn entropies(&self) -> Array {
        let (b, m) = (self.batch(), self.heads());
        let data = (0..b)
            .flat_map(|x| (0..m).map(move |j| (x, j)))
            .map(|(x, j)| entropy_from_log(self.row(x, j)))
            .collect();
        Array::new(vec![b, m], data).expect("shape matches data")
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.values.shape() != other.values.shape() {
            return Err(Error::shape(
                "ensemble_loss",
                format!(
                    "teacher {:?} vs student {:?}",
                    self.values.shape(),
                    other.values.shape()
                ),
            ));
        }
        Ok(())
    }
}

/// `b×m×m×c` weights `w[x, i, j, y]`; every `(x, y)` slice sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightCube {
    values: Array,
}

impl WeightCube {
    pub fn values(&self) -> &Array {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[3])
    }

    pub fn get(&self, x: usize, i: usize, j: usize, y: usize) -> f64 {
        let (_, m, c) = self.dims();
        self.values.data()[((x * m + i) * m + j) * c + y]
    }

    /// Mean over samples and codes of `Σ_i w_ijy`, per student head `j`.
    pub fn student_mass(&self) -> Vec<f64> {
        let (b, m, c) = self.dims();
        let mut mass = vec![0.0; m];
        for (k, &w) in self.values.data().iter().enumerate() {
            mass[(k / c) % m] += w;
        }
        let n = (b * c) as f64;
        mass.iter_mut().for_each(|v| *v /= n);
        mass
    }

    /// Largest `|Σ_{i,j} w_ijy − 1|` over all `(x, y)`.
    pub fn max_normalization_error(&self) -> f64 {
        let (b, m, c) = self.dims();
        let mut worst: f64 = 0.0;
        for x in 0..b {
            for y in 0..c {
                let mut s = 0.0;
                for i in 0..m {
                    for j in 0..m {
                        s += self.get(x, i, j, y);
                    }
                }
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SchemeKind {
    /// Matching pairs only, equal weight.
    Unif,
    /// Every pair, equal weight.
    UnifAll,
    /// Student probability of the outcome.
    Prob,
    /// Teacher probability of the outcome.
    ProbTe,
    /// Hard selection by student probability.
    ProbMax,
    /// Hard selection by teacher probability.
    ProbMaxTe,
    /// Low teacher entropy, matching pairs.
    Ent,
    /// Low student entropy, matching pairs.
    EntSt,
    /// Large teacher/student divergence.
    Disagree,
    /// Low outcome-index variance of the teacher.
    LowVarTeacher,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 10] = [
        SchemeKind::Unif,
        SchemeKind::UnifAll,
        SchemeKind::Prob,
        SchemeKind::ProbTe,
        SchemeKind::ProbMax,
        SchemeKind::ProbMaxTe,
        SchemeKind::Ent,
        SchemeKind::EntSt,
        SchemeKind::Disagree,
        SchemeKind::LowVarTeacher,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Unif => "Unif",
            SchemeKind::UnifAll => "UnifAll",
            SchemeKind::Prob => "Prob",
            SchemeKind::ProbTe => "ProbTe",
            SchemeKind::ProbMax => "ProbMax",
            SchemeKind::ProbMaxTe => "ProbMaxTe",
            SchemeKind::Ent => "Ent",
            SchemeKind::EntSt => "EntSt",
            SchemeKind::Disagree => "Disagree",
            SchemeKind::LowVarTeacher => "LowVarTeacher",
        }
    }

    /// Schemes whose score already restricts to matching pairs.
    pub fn inherently_aligned(self) -> bool {
        matches!(self, SchemeKind::Unif | SchemeKind::Ent | SchemeKind::EntSt)
    }

    pub fn is_hard(self) -> bool {
        matches!(self, SchemeKind::ProbMax | SchemeKind::ProbMaxTe)
    }
}

/// Softmax temperature `γ`, or the `γ → 0` limit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Temperature {
    Soft(f64),
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightingScheme {
    pub kind: SchemeKind,
    /// Adds `log δ(i − j)` to the score.
    pub aligned: bool,
    pub gamma: f64,
    pub epsilon: f64,
}

impl WeightingScheme {
    pub fn new(kind: SchemeKind) -> Self {
        Self {
            kind,
            aligned: false,
            gamma: 1.0,
            epsilon: LOW_VAR_EPSILON,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn aligned(mut self) -> Self {
        self.aligned = true;
        self
    }

    pub fn masks_off_diagonal(&self) -> bool {
        self.aligned || self.kind.inherently_aligned()
    }

    pub fn temperature(&self) -> Temperature {
        if self.kind.is_hard() {
            Temperature::Hard
        } else {
            Temperature::Soft(self.gamma)
        }
    }

    pub fn name(&self) -> String {
        if self.aligned && !self.kind.inherently_aligned() {
            format!("{}-aligned", self.kind.name())
        } else {
            self.kind.name().to_string()
        }
    }

    /// Every scheme, plus the aligned variant of each scheme that has one.
    pub fn all_variants() -> Vec<WeightingScheme> {
        let mut out = Vec::new();
        for k in SchemeKind::ALL {
            out.push(WeightingScheme::new(k));
            if !k.inherently_aligned() && k != SchemeKind::UnifAll {
                out.push(WeightingScheme::new(k).aligned());
            }
        }
        out
    }

    pub fn valid_names() -> String {
        SchemeKind::ALL
            .iter()
            .map(|k| k.name())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl fmt::Display for WeightingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for WeightingScheme {
    type Err = Error;

    /// `Name` or `Name-aligned`.
    fn from_str(s: &str) -> Result<Self> {
        let (base, aligned) = match s.strip_suffix("-aligned") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let kind = SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == base)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown scheme '{s}'; valid schemes: {} (optionally with suffix -aligned)",
                    WeightingScheme::valid_names()
                ))
            })?;
        let mut scheme = WeightingScheme::new(kind);
        scheme.aligned = aligned;
        Ok(scheme)
    }
}

/// Score cube `f[x, i, j, y]` from stop-gradient values.
pub fn scheme_f(scheme: &WeightingScheme, log_pt: &LogProbCube, log_ps: &LogProbCube) -> Result<Array> {
    log_pt.check_compatible(log_ps)?;
    let (b, m, c) = (log_pt.batch(), log_pt.heads(), log_pt.codes());
    let mut f = vec![0.0; b * m * m * c];
    let t_ent = log_pt.entropies();
    let s_ent = log_ps.entropies();
    for x in 0..b {
        let low_var: Vec<f64> = match scheme.kind {
            SchemeKind::LowVarTeacher => (0..m)
                .map(|i| {
                    let p: Vec<f64> = log_pt.row(x, i).iter().map(|l| l.exp()).collect();
                    let (_, var) = index_moments(&p);
                    -0.5 * (var + scheme.epsilon).ln()
                })
                .collect(),
            _ => Vec::new(),
        };
        for i in 0..m {
            for j in 0..m {
                let block = &mut f[((x * m + i) * m + j) * c..((x * m + i) * m + j + 1) * c];
                if scheme.masks_off_diagonal() && i != j {
                    block.fill(f64::NEG_INFINITY);
                    continue;
                }
                match scheme.kind {
                    SchemeKind::Unif | SchemeKind::UnifAll => block.fill(0.0),
                    SchemeKind::Prob | SchemeKind::ProbMax => {
                        block.copy_from_slice(log_ps.row(x, j))
                    }
                    SchemeKind::ProbTe | SchemeKind::ProbMaxTe => {
                        block.copy_from_slice(log_pt.row(x, i))
                    }
                    SchemeKind::Ent => block.fill(-t_ent.get2(x, i)),
                    SchemeKind::EntSt => block.fill(-s_ent.get2(x, j)),
                    SchemeKind::Disagree => {
                        block.fill(kl_from_log(log_pt.row(x, i), log_ps.row(x, j)))
                    }
                    SchemeKind::LowVarTeacher => block.fill(low_var[i]),
                }
            }
        }
    }
    Array::new(vec![b, m, m, c], f)
}

/// Softmax of `f / γ` over the `m²` pairs of every `(x, y)`. `-inf` scores
/// get weight exactly zero. In hard mode the largest score takes all the
/// weight, ties going to the lexicographically smallest `(i, j)`.
pub fn compute_weights(f: &Array, temperature: Temperature) -> Result<WeightCube> {
    if f.ndim() != 4 || f.shape()[1] != f.shape()[2] {
        return Err(Error::shape("compute_weights", format!("{:?}", f.shape())));
    }
    if let Temperature::Soft(g) = temperature {
        if !(g > 0.0) {
            return Err(Error::Domain(format!("weight temperature must be positive, got {g}")));
        }
    }
    let (b, m, c) = (f.shape()[0], f.shape()[1], f.shape()[3]);
    let fd = f.data();
    let mut w = vec![0.0; fd.len()];
    let idx = |x: usize, p: usize, y: usize| (x * m * m + p) * c + y;
    for x in 0..b {
        for y in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut best_pair = None;
            for p in 0..m * m {
                let v = fd[idx(x, p, y)];
                if v.is_nan() {
                    return Err(Error::NonFinite(format!("score at sample {x}, code {y}")));
                }
                if v > best {
                    best = v;
                    best_pair = Some(p);
                }
            }
            let Some(arg) = best_pair else {
                return Err(Error::InvalidMask { group: x * c + y });
            };
            match temperature {
                Temperature::Hard => w[idx(x, arg, y)] = 1.0,
                Temperature::Soft(g) => {
                    let mut z = 0.0;
                    for p in 0..m * m {
                        let v = fd[idx(x, p, y)];
                        let e = if v == f64::NEG_INFINITY {
                            0.0
                        } else {
                            ((v - best) / g).exp()
                        };
                        w[idx(x, p, y)] = e;
                        z += e;
                    }
                    for p in 0..m * m {
                        w[idx(x, p, y)] /= z;
                    }
                }
            }
        }
    }
    Ok(WeightCube {
        values: Array::new(f.shape().to_vec(), w)?,
    })
}

pub fn scheme_weights(
    scheme: &WeightingScheme,
    log_pt: &LogProbCube,
    log_ps: &LogProbCube,
) -> Result<WeightCube> {
    compute_weights(&scheme_f(scheme, log_pt, log_ps)?, scheme.temperature())
}

/// `C_j[x, y] = Σ_i w_ijy t_i(y|x)` for every student head.
fn target_coefficients(w: &WeightCube, log_pt: &LogProbCube) -> Vec<Array> {
    let (b, m, c) = w.dims();
    (0..m)
        .map(|j| {
            let mut coef = Array::zeros(&[b, c]);
            for x in 0..b {
                let row = coef.row_mut(x);
                for i in 0..m {
                    for (y, (r, lt)) in row.iter_mut().zip(log_pt.row(x, i)).enumerate() {
                        *r += w.get(x, i, j, y) * lt.exp();
                    }
                }
            }
            coef
        })
        .collect()
}

/// `-(1/b) Σ_j Σ_{x,y} C_j[x,y] · log_ps_j[x,y]` on the tape.
fn weighted_log_likelihood(tape: &mut Tape, coefs: Vec<Array>, log_ps: &[Var], b: usize) -> Result<Var> {
    let mut total = None;
    for (coef, &lp) in coefs.into_iter().zip(log_ps) {
        let cv = tape.constant(coef);
        let prod = tape.mul(cv, lp)?;
        let s = tape.sum(prod)?;
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let total = total.ok_or_else(|| Error::shape("ensemble_loss", "no heads"))?;
    tape.scale(total, -1.0 / b as f64)
}

fn student_cube(tape: &Tape, log_pt: &LogProbCube, log_ps: &[Var]) -> Result<LogProbCube> {
    if log_ps.len() != log_pt.heads() {
        return Err(Error::shape(
            "ensemble_loss",
            format!("{} student heads vs {} teacher heads", log_ps.len(), log_pt.heads()),
        ));
    }
    let cube = LogProbCube::from_tape(tape, log_ps, Source::Student)?;
    log_pt.check_compatible(&cube)?;
    Ok(cube)
}

/// General weighted path. `log_ps` holds one `b×c` node per student head.
/// Returns the loss node and the weights used.
pub fn ensemble_loss(
    tape: &mut Tape,
    log_pt: &LogProbCube,
    log_ps: &[Var],
    scheme: &WeightingScheme,
) -> Result<(Var, WeightCube)> {
    let ps = student_cube(tape, log_pt, log_ps)?;
    let w = scheme_weights(scheme, log_pt, &ps)?;
    let coefs = target_coefficients(&w, log_pt);
    let loss = weighted_log_likelihood(tape, coefs, log_ps, log_pt.batch())?;
    Ok((loss, w))
}

/// Exact value of the weighted unnormalized cross-entropy, including the
/// `Σq − 1` term of every pair that carries weight.
pub fn ensemble_loss_value(
    log_pt: &LogProbCube,
    log_ps: &LogProbCube,
    scheme: &WeightingScheme,
) -> Result<f64> {
    let w = scheme_weights(scheme, log_pt, log_ps)?;
    let (b, m, c) = w.dims();
    let mut total = 0.0;
    for x in 0..b {
        for i in 0..m {
            let lt = log_pt.row(x, i);
            for j in 0..m {
                let ls = log_ps.row(x, j);
                let mut mass = 0.0;
                for y in 0..c {
                    let wy = w.get(x, i, j, y);
                    mass += wy;
                    if wy > 0.0 {
                        total -= wy * lt[y].exp() * ls[y];
                    }
                }
                if mass > 0.0 {
                    total += ls.iter().map(|l| l.exp()).sum::<f64>() - 1.0;
                }
            }
        }
    }
    Ok(total / b as f64)
}

/// Mean over heads of the per-head cross-entropy.
pub fn loss_unif_fast(tape: &mut Tape, log_pt: &LogProbCube, log_ps: &[Var]) -> Result<Var> {
    student_cube(tape, log_pt, log_ps)?;
    let m = log_pt.heads() as f64;
    let coefs = (0..log_pt.heads())
        .map(|j| log_pt.head(j).map(|l| l.exp() / m))
        .collect();
    weighted_log_likelihood(tape, coefs, log_ps, log_pt.batch())
}

/// Cross-entropy of the head-averaged teacher against the head-averaged
/// student, both averaged in probability space.
pub fn loss_prob_fast(tape: &mut Tape, log_pt: &LogProbCube, log_ps: &[Var]) -> Result<Var> {
    student_cube(tape, log_pt, log_ps)?;
    let (b, m, c) = (log_pt.batch(), log_pt.heads(), log_pt.codes());
    let mut mean_pt = Array::zeros(&[b, c]);
    for x in 0..b {
        let row = mean_pt.row_mut(x);
        for i in 0..m {
            for (r, l) in row.iter_mut().zip(log_pt.row(x, i)) {
                *r += l.exp() / m as f64;
            }
        }
    }
    let stacked = tape.concat(log_ps, 1)?;
    let cube = tape.reshape(stacked, &[b, m, c])?;
    let lse = tape.logsumexp_axis(cube, 1)?;
    let log_mean_ps = tape.add_scalar(lse, -(m as f64).ln())?;
    weighted_log_likelihood(tape, vec![mean_pt], &[log_mean_ps], b)
}

/// Per-sample softmax of `-H[t_i]/γ` over heads, weighting each head's
/// cross-entropy.
pub fn loss_ent_fast(tape: &mut Tape, log_pt: &LogProbCube, log_ps: &[Var], gamma: f64) -> Result<Var> {
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("entropy temperature must be positive, got {gamma}")));
    }
    student_cube(tape, log_pt, log_ps)?;
    let weights = entropy_weights(log_pt, gamma);
    let coefs = (0..log_pt.heads())
        .map(|j| {
            let mut coef = log_pt.head(j).map(f64::exp);
            for x in 0..coef.rows() {
                let wx = weights.get2(x, j);
                coef.row_mut(x).iter_mut().for_each(|v| *v *= wx);
            }
            coef
        })
        .collect();
    weighted_log_likelihood(tape, coefs, log_ps, log_pt.batch())
}

/// `b×m` softmax over heads of `-H[t_i]/γ`.
pub fn entropy_weights(log_pt: &LogProbCube, gamma: f64) -> Array {
    let mut w = log_pt.entropies().map(|h| -h / gamma);
    for x in 0..w.rows() {
        let row = w.row_mut(x);
        let lse = logsumexp(row.iter().copied());
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    w
}

/// Which implementation [`scheme_loss`] uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossPath {
    UnifFast,
    ProbFast,
    EntFast,
    General,
}

pub fn loss_path(scheme: &WeightingScheme) -> LossPath {
    match (scheme.kind, scheme.aligned) {
        (SchemeKind::Unif, _) => LossPath::UnifFast,
        (SchemeKind::Ent, _) => LossPath::EntFast,
        // the fast path shares the general path's gradient only at γ = 1
        (SchemeKind::Prob, false) if scheme.gamma == 1.0 => LossPath::ProbFast,
        _ => LossPath::General,
    }
}

/// Training loss for `scheme`, using a fast path where one exists.
pub fn scheme_loss(
    tape: &mut Tape,
    log_pt: &LogProbCube,
    log_ps: &[Var],
    scheme: &WeightingScheme,
) -> Result<Var> {
    match loss_path(scheme) {
        LossPath::UnifFast => loss_unif_fast(tape, log_pt, log_ps),
        LossPath::ProbFast => loss_prob_fast(tape, log_pt, log_ps),
        LossPath::EntFast => loss_ent_fast(tape, log_pt, log_ps, scheme.gamma),
        LossPath::General => ensemble_loss(tape, log_pt, log_ps, scheme).map(|(l, _)| l),
    }
}

/// Per-student-head weight mass of `scheme` without building the loss.
pub fn weight_mass(scheme: &WeightingScheme, log_pt: &LogProbCube, log_ps: &LogProbCube) -> Result<Vec<f64>> {
    let m = log_pt.heads();
    match scheme.kind {
        SchemeKind::Unif | SchemeKind::UnifAll => Ok(vec![1.0 / m as f64; m]),
        SchemeKind::Ent => {
            let w = entropy_weights(log_pt, scheme.gamma);
            let b = w.rows() as f64;
            Ok((0..m)
                .map(|j| (0..w.rows()).map(|x| w.get2(x, j)).sum::<f64>() / b)
                .collect())
        }
        _ => Ok(scheme_weights(scheme, log_pt, log_ps)?.student_mass()),
    }
}

/// Builds per-head student log-probabilities from raw logits on a fresh
/// tape, so both loss paths see identical parameters.
fn student_on_tape(tape: &mut Tape, logits: &LogProbCube) -> Result<(Vec<Var>, Vec<Var>)> {
    let leaves: Vec<Var> = (0..logits.heads()).map(|j| tape.leaf(logits.head(j))).collect();
    let lps = leaves
        .iter()
        .map(|&v| tape.log_softmax_rows(v, 1.0))
        .collect::<Result<Vec<_>>>()?;
    Ok((leaves, lps))
}

/// Largest relative discrepancy between the gradients of the `Prob` fast
/// path and of the general path with `Prob` weights at `γ = 1`.
pub fn verify_prob_identity(log_pt: &LogProbCube, log_ps: &LogProbCube) -> Result<f64> {
    let scheme = WeightingScheme::new(SchemeKind::Prob);
    let mut fast = Tape::new();
    let (fast_leaves, fast_lps) = student_on_tape(&mut fast, log_ps)?;
    let fast_loss = loss_prob_fast(&mut fast, log_pt, &fast_lps)?;
    let fast_grads = fast.backward(fast_loss)?;

    let mut general = Tape::new();
    let (gen_leaves, gen_lps) = student_on_tape(&mut general, log_ps)?;
    let (gen_loss, _) = ensemble_loss(&mut general, log_pt, &gen_lps, &scheme)?;
    let gen_grads = general.backward(gen_loss)?;

    let mut worst: f64 = 0.0;
    for (&a, &b) in fast_leaves.iter().zip(&gen_leaves) {
        let ga = fast_grads.get(&fast, a)?;
        let gb = gen_grads.get(&general, b)?;
        for (x, y) in ga.data().iter().zip(gb.data()) {
            worst = worst.max(rel_error(*x, *y));
        }
    }
    Ok(worst)
}

/// Sample-averaged slacks of the two joint-convexity bounds:
/// `(1/m) Σ_i K[t_i, s_i] − K[t̄, s̄]` and `(1/m²) Σ_{i,j} K[t_i, s_j] − K[t̄, s̄]`.
pub fn verify_bound_ordering(log_pt: &LogProbCube, log_ps: &LogProbCube) -> Result<(f64, f64)> {
    log_pt.check_compatible(log_ps)?;
    let (b, m, c) = (log_pt.batch(), log_pt.heads(), log_pt.codes());
    let mf = m as f64;
    let (mut s1, mut s2) = (0.0, 0.0);
    for x in 0..b {
        let mean = |cube: &LogProbCube| -> Result<DiscreteMeasure> {
            let mut p = vec![0.0; c];
            for j in 0..m {
                for (a, l) in p.iter_mut().zip(cube.row(x, j)) {
                    *a += l.exp() / mf;
                }
            }
            DiscreteMeasure::new(p)
        };
        let k_mean = unnorm_kl(&mean(log_pt)?, &mean(log_ps)?);
        let diag: f64 = (0..m)
            .map(|i| kl_from_log(log_pt.row(x, i), log_ps.row(x, i)))
            .sum::<f64>()
            / mf;
        let all: f64 = (0..m)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .map(|(i, j)| kl_from_log(log_pt.row(x, i), log_ps.row(x, j)))
            .sum::<f64>()
            / (mf * mf);
        s1 += diag - k_mean;
        s2 += all - k_mean;
    }
    Ok((s1 / b as f64, s2 / b as f64))
}

/// Fails loudly on non-finite or exploding losses.
pub fn check_divergence(loss: f64, threshold: f64, scheme: &str) -> Result<()> {
    if !loss.is_finite() || loss > threshold {
        return Err(Error::Divergence(format!(
            "scheme {scheme}: loss {loss} exceeded threshold {threshold}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
