//! Frozen-representation evaluation and ensemble-diversity analysis.

mod hungarian;

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use hungarian::{max_score_assignment, min_cost_assignment};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{derive_seed, renormalize_teacher, Checkpoint, ModelParams, TeacherRenorm};
use crate::regularize::{CenterState, Renorm};
use crate::tensor::Array;

/// k-NN vote temperature.
pub const KNN_TAU: f64 = 0.07;
/// Probe inputs for the diversity analysis.
pub const DEFAULT_PROBE_INPUTS: usize = 4096;
/// L2 strengths searched by the linear probe.
pub const DEFAULT_L2_GRID: [f64; 11] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0, 3.0, 10.0];

/// Frozen encoder outputs with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ReprBank {
    pub z: Array,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl ReprBank {
    pub fn new(z: Array, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if z.ndim() != 2 || z.rows() != labels.len() {
            return Err(Error::shape(
                "ReprBank::new",
                format!("{} labels for representations {:?}", labels.len(), z.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Dataset(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { z, labels, classes })
    }

    /// Encodes the clean, un-augmented samples of `ds`.
    pub fn from_model(params: &ModelParams, ds: &Dataset) -> Result<Self> {
        let z = params.encode(ds.features())?;
        Self::new(z, ds.eval_labels().to_vec(), ds.num_classes())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Weighted k-NN: the `k` most cosine-similar bank entries vote with weight
/// `exp(cos/τ)`. Similarity ties rank the lower bank index first; vote ties
/// go to the smallest label.
pub fn knn_predict(bank: &ReprBank, query: &[f64], k: usize, tau: f64) -> Result<usize> {
    if bank.is_empty() {
        return Err(Error::Dataset("k-NN bank is empty".into()));
    }
    if k == 0 || k > bank.len() {
        return Err(Error::Config(format!("k must lie in 1..={}, got {k}", bank.len())));
    }
    if query.len() != bank.z.cols() {
        return Err(Error::shape(
            "knn_predict",
            format!("query width {} vs bank width {}", query.len(), bank.z.cols()),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("k-NN temperature must be positive, got {tau}")));
    }
    let sims: Vec<f64> = (0..bank.len()).map(|i| cosine(query, bank.z.row(i))).collect();
    let order = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..bank.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    let mut votes = vec![0.0; bank.classes];
    for &i in &idx {
        votes[bank.labels[i]] += (sims[i] / tau).exp();
    }
    Ok(argmax_first(&votes))
}

/// Index of the largest value; the first one on ties.
fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `queries` whose k-NN prediction matches their label.
pub fn knn_accuracy(bank: &ReprBank, queries: &ReprBank, k: usize, tau: f64, exec: Exec) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Dataset("no k-NN queries".into()));
    }
    let preds = exec.map(queries.len(), |i| knn_predict(bank, queries.z.row(i), k, tau));
    let mut hits = 0usize;
    for (p, &y) in preds.into_iter().zip(&queries.labels) {
        hits += usize::from(p? == y);
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Labeled and test parts of a few-shot split.
pub struct FewShotSplit {
    pub labeled: Dataset,
    pub test: Dataset,
}

/// Exactly `shots` labeled samples per class, chosen per seed; everything
/// else becomes the test part.
pub fn fewshot_split(ds: &Dataset, shots: usize, seed: u64) -> Result<FewShotSplit> {
    let (train, test) = fewshot_indices(ds.eval_labels(), ds.num_classes(), shots, seed)?;
    Ok(FewShotSplit {
        labeled: ds.subset(&train)?,
        test: ds.subset(&test)?,
    })
}

/// Index form of [`fewshot_split`]: labeled indices grouped by class,
/// test indices ascending.
pub fn fewshot_indices(labels: &[usize], classes: usize, shots: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if shots == 0 {
        return Err(Error::Config("shots must be positive".into()));
    }
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut labeled = Vec::with_capacity(shots * classes);
    let mut in_train = vec![false; labels.len()];
    for (y, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < shots + 1 {
            return Err(Error::Dataset(format!(
                "class {y} has {} samples, a {shots}-shot split needs {}",
                idx.len(),
                shots + 1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, y as u64));
        idx.shuffle(&mut rng);
        for &i in &idx[..shots] {
            labeled.push(i);
            in_train[i] = true;
        }
    }
    let test = (0..labels.len()).filter(|&i| !in_train[i]).collect();
    Ok((labeled, test))
}

/// Multinomial logistic regression with an unregularized bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LogReg {
    /// `[l×K]`
    pub weight: Array,
    pub bias: Vec<f64>,
}

impl LogReg {
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax_first(&self.logits(x))
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let k = self.bias.len();
        let mut out = self.bias.clone();
        for (f, &xf) in x.iter().enumerate() {
            let w = &self.weight.data()[f * k..(f + 1) * k];
            for (o, &wv) in out.iter_mut().zip(w) {
                *o += xf * wv;
            }
        }
        out
    }

    pub fn accuracy(&self, bank: &ReprBank) -> f64 {
        let hits = (0..bank.len())
            .filter(|&i| self.predict(bank.z.row(i)) == bank.labels[i])
            .count();
        hits as f64 / bank.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOptions {
    pub grid: Vec<f64>,
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
    /// Gaussian initial weights (std 0.01) from this seed; zeros otherwise.
    pub init_seed: Option<u64>,
    /// Seed of the held-out fifth used to pick λ.
    pub split_seed: u64,
    /// λ used when the labeled set is too small to hold anything out.
    pub fallback_lambda: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            grid: DEFAULT_L2_GRID.to_vec(),
            max_iters: 5000,
            tol: 1e-6,
            init_seed: None,
            split_seed: 0,
            fallback_lambda: 1e-2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub lambda: f64,
    /// False when λ fell back to the fixed default.
    pub selected_on_holdout: bool,
    /// Solver iterations of the final fit.
    pub iterations: usize,
}

fn logreg_objective(x: &Array, y: &[usize], lambda: f64, w: &[f64], b: &[f64]) -> f64 {
    let (n, l, k) = (x.rows(), x.cols(), b.len());
    let mut loss = 0.0;
    let mut z = vec![0.0; k];
    for i in 0..n {
        z.copy_from_slice(b);
        for (f, &xf) in x.row(i).iter().enumerate() {
            for (zc, &wv) in z.iter_mut().zip(&w[f * k..(f + 1) * k]) {
                *zc += xf * wv;
            }
        }
        let lse = crate::tensor::kernels::logsumexp(z.iter().copied());
        loss += lse - z[y[i]];
    }
    debug_assert_eq!(w.len(), l * k);
    loss / n as f64 + lambda * w.iter().map(|v| v * v).sum::<f64>()
}

fn logreg_gradient(x: &Array, y: &[usize], lambda: f64, w: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, k) = (x.rows(), b.len());
    let mut gw: Vec<f64> = w.iter().map(|v| 2.0 * lambda * v).collect();
    let mut gb = vec![0.0; k];
    let mut z = vec![0.0; k];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let row = x.row(i);
        z.copy_from_slice(b);
        for (f, &xf) in row.iter().enumerate() {
            for (zc, &wv) in z.iter_mut().zip(&w[f * k..(f + 1) * k]) {
                *zc += xf * wv;
            }
        }
        let lse = crate::tensor::kernels::logsumexp(z.iter().copied());
        for (c, zc) in z.iter_mut().enumerate() {
            *zc = ((*zc - lse).exp() - f64::from(u8::from(c == y[i]))) * inv_n;
        }
        for (g, &d) in gb.iter_mut().zip(&z) {
            *g += d;
        }
        for (f, &xf) in row.iter().enumerate() {
            for (g, &d) in gw[f * k..(f + 1) * k].iter_mut().zip(&z) {
                *g += xf * d;
            }
        }
    }
    (gw, gb)
}

/// Full-batch gradient descent with backtracking line search on the mean
/// cross-entropy plus `λ‖W‖²`. Returns the model and the iteration count.
pub fn fit_logreg(bank: &ReprBank, lambda: f64, opts: &ProbeOptions) -> Result<(LogReg, usize)> {
    if bank.is_empty() {
        return Err(Error::Dataset("cannot fit a probe on no samples".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("L2 strength must be >= 0, got {lambda}")));
    }
    let (l, k) = (bank.z.cols(), bank.classes);
    let mut w = match opts.init_seed {
        Some(s) => {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            (0..l * k).map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect()
        }
        None => vec![0.0; l * k],
    };
    let mut b = vec![0.0; k];
    let (x, y) = (&bank.z, &bank.labels[..]);
    let mut f = logreg_objective(x, y, lambda, &w, &b);
    let mut step = 1.0;
    let mut iters = 0;
    while iters < opts.max_iters {
        let (gw, gb) = logreg_gradient(x, y, lambda, &w, &b);
        let g2: f64 = gw.iter().chain(&gb).map(|v| v * v).sum();
        if g2.sqrt() < opts.tol {
            break;
        }
        iters += 1;
        let mut accepted = false;
        while step > 1e-20 {
            let w2: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - step * g).collect();
            let b2: Vec<f64> = b.iter().zip(&gb).map(|(a, g)| a - step * g).collect();
            let f2 = logreg_objective(x, y, lambda, &w2, &b2);
            if f2 <= f - 0.5 * step * g2 {
                (w, b, f) = (w2, b2, f2);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        step = (step * 2.0).min(1e6);
    }
    if !f.is_finite() {
        return Err(Error::NonFinite("linear probe objective".into()));
    }
    Ok((
        LogReg {
            weight: Array::new(vec![l, k], w)?,
            bias: b,
        },
        iters,
    ))
}

/// Stratified hold-out: `round(n_c/5)` samples per class, at most `n_c − 1`.
fn holdout_indices(labels: &[usize], classes: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut fit = Vec::new();
    let mut held = Vec::new();
    for (y, idx) in by_class.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, y as u64));
        idx.shuffle(&mut rng);
        let h = ((idx.len() as f64 / 5.0).round() as usize).min(idx.len().saturating_sub(1));
        held.extend_from_slice(&idx[..h]);
        fit.extend_from_slice(&idx[h..]);
    }
    fit.sort_unstable();
    held.sort_unstable();
    (fit, held)
}

fn bank_subset(bank: &ReprBank, idx: &[usize]) -> ReprBank {
    let l = bank.z.cols();
    let mut data = Vec::with_capacity(idx.len() * l);
    for &i in idx {
        data.extend_from_slice(bank.z.row(i));
    }
    ReprBank {
        z: Array::new(vec![idx.len(), l], data).expect("rows match data"),
        labels: idx.iter().map(|&i| bank.labels[i]).collect(),
        classes: bank.classes,
    }
}

/// Picks λ on a held-out fifth of `train` (ties favour the stronger
/// penalty), refits on all of `train` and reports accuracy on `test`.
pub fn linear_probe(train: &ReprBank, test: &ReprBank, opts: &ProbeOptions) -> Result<ProbeResult> {
    let mut seen = vec![false; train.classes];
    for &y in &train.labels {
        seen[y] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::Dataset(format!("class {missing} has no training example")));
    }
    if test.is_empty() {
        return Err(Error::Dataset("probe test set is empty".into()));
    }
    if opts.grid.is_empty() {
        return Err(Error::Config("L2 grid is empty".into()));
    }
    let (fit_idx, held_idx) = holdout_indices(&train.labels, train.classes, opts.split_seed);
    let (lambda, selected) = if held_idx.is_empty() {
        (opts.fallback_lambda, false)
    } else {
        let fit_bank = bank_subset(train, &fit_idx);
        let held_bank = bank_subset(train, &held_idx);
        let mut best = (f64::NEG_INFINITY, opts.grid[0]);
        for &lam in &opts.grid {
            let (model, _) = fit_logreg(&fit_bank, lam, opts)?;
            let acc = model.accuracy(&held_bank);
            if acc > best.0 || (acc == best.0 && lam > best.1) {
                best = (acc, lam);
            }
        }
        (best.1, true)
    };
    let (model, iterations) = fit_logreg(train, lambda, opts)?;
    Ok(ProbeResult {
        accuracy: model.accuracy(test),
        lambda,
        selected_on_holdout: selected,
        iterations,
    })
}

/// Empirical code assignments `[N×c]` of one head; rows are distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix {
    probs: Array,
}

impl AssignmentMatrix {
    pub fn new(probs: Array) -> Result<Self> {
        if probs.ndim() != 2 || probs.rows() == 0 || probs.cols() == 0 {
            return Err(Error::shape("AssignmentMatrix::new", format!("{:?}", probs.shape())));
        }
        for r in 0..probs.rows() {
            let row = probs.row(r);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::Domain(format!("assignment row {r} is not a distribution (sum {s})")));
            }
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Array {
        &self.probs
    }
}

/// Teacher assignments of every head on `x` at temperature `tau`, centered
/// when the teacher carries centers.
pub fn teacher_assignments(
    params: &ModelParams,
    centers: Option<&[CenterState]>,
    x: &Array,
    tau: f64,
) -> Result<Vec<AssignmentMatrix>> {
    let z = params.encode(x)?;
    let renorm = TeacherRenorm {
        mode: if centers.is_some() { Renorm::Center } else { Renorm::None },
        ..TeacherRenorm::default()
    };
    (0..params.dims.heads)
        .map(|j| {
            let cos = params.head_cosines(&z, j)?;
            let lp = renormalize_teacher(&cos, j, tau, renorm, centers)?;
            AssignmentMatrix::new(lp.map(f64::exp))
        })
        .collect()
}

/// `S[a,b]`: cosine between column `a` of `a_j` and column `b` of `a_k`.
pub fn column_similarity(a_j: &AssignmentMatrix, a_k: &AssignmentMatrix) -> Result<Array> {
    let (x, y) = (a_j.probs.transpose2(), a_k.probs.transpose2());
    if x.shape() != y.shape() {
        return Err(Error::shape(
            "column_similarity",
            format!("{:?} vs {:?}", a_j.probs.shape(), a_k.probs.shape()),
        ));
    }
    let c = x.rows();
    let mut s = Array::zeros(&[c, c]);
    for a in 0..c {
        for b in 0..c {
            s.set2(a, b, cosine(x.row(a), y.row(b)));
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// `perm[a]`: code of the second head matched to code `a` of the first.
    pub perm: Vec<usize>,
    /// Matched similarities, sorted descending.
    pub diagonal: Vec<f64>,
    pub similarity: Array,
}

impl Alignment {
    pub fn total(&self) -> f64 {
        self.diagonal.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.total() / self.diagonal.len() as f64
    }
}

/// Matches codes of two heads to maximize total column similarity.
pub fn code_alignment(a_j: &AssignmentMatrix, a_k: &AssignmentMatrix) -> Result<Alignment> {
    let similarity = column_similarity(a_j, a_k)?;
    let perm = max_score_assignment(&similarity)?;
    let mut diagonal: Vec<f64> = perm.iter().enumerate().map(|(a, &b)| similarity.get2(a, b)).collect();
    diagonal.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(Alignment {
        perm,
        diagonal,
        similarity,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairDiversity {
    pub head_i: usize,
    pub head_j: usize,
    pub diagonal: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiversityReport {
    pub pairs: Vec<PairDiversity>,
}

impl DiversityReport {
    /// Mean aligned similarity over all head pairs; `None` with one head.
    pub fn mean_similarity(&self) -> Option<f64> {
        if self.pairs.is_empty() {
            return None;
        }
        Some(self.pairs.iter().map(|p| p.mean).sum::<f64>() / self.pairs.len() as f64)
    }

    /// `head_i,head_j,rank,similarity`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("head_i,head_j,rank,similarity\n");
        for p in &self.pairs {
            for (rank, v) in p.diagonal.iter().enumerate() {
                writeln!(s, "{},{},{rank},{v}", p.head_i, p.head_j).expect("string write");
            }
        }
        s
    }
}

/// Aligned similarity curves for every head pair of the checkpoint teacher.
pub fn diversity_report(ckpt: &Checkpoint, probe: &Array, tau: f64, exec: Exec) -> Result<DiversityReport> {
    let teacher = &ckpt.teacher;
    let mats = teacher_assignments(&teacher.params, teacher.centers.as_deref(), probe, tau)?;
    let m = mats.len();
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
    let aligned = exec.map(pairs.len(), |p| code_alignment(&mats[pairs[p].0], &mats[pairs[p].1]));
    let mut out = Vec::with_capacity(pairs.len());
    for ((i, j), al) in pairs.into_iter().zip(aligned) {
        let al = al?;
        out.push(PairDiversity {
            head_i: i,
            head_j: j,
            mean: al.mean(),
            diagonal: al.diagonal,
        });
    }
    Ok(DiversityReport { pairs: out })
}

/// `n` distinct rows of `x` chosen by `seed`, in ascending order; all rows
/// when `n ≥ rows`.
pub fn probe_rows(x: &Array, n: usize, seed: u64) -> Array {
    let total = x.rows();
    let mut idx: Vec<usize> = if n >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, total, n).into_vec()
    };
    idx.sort_unstable();
    let d = x.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for i in idx {
        data.extend_from_slice(x.row(i));
    }
    Array::new(vec![data.len() / d.max(1), d], data).expect("rows match data")
}

/// One line of the evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub split: String,
    pub metric: String,
    pub value: f64,
    /// λ for probes, k for k-NN.
    pub lambda_or_k: f64,
    pub seed: u64,
}

/// `split,metric,value,lambda_or_k,seed`
pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("split,metric,value,lambda_or_k,seed\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.split, r.metric, r.value, r.lambda_or_k, r.seed).expect("string write");
    }
    s
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Median; the mean of the middle pair for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
