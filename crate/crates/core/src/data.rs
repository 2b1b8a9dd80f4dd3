//! Synthetic Gaussian-mixture data, CSV ingestion and multi-view
//! augmentation (additive noise plus coordinate masking).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::derive_seed;
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub n: usize,
    pub class_sep: f64,
    pub within_std: f64,
}

/// Features plus labels. Labels are reachable only through
/// [`Dataset::eval_labels`]; training code takes bare feature matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Array,
    labels: Vec<usize>,
    classes: usize,
    pub meta: Option<MixtureParams>,
}

impl Dataset {
    pub fn new(features: Array, labels: Vec<usize>) -> Result<Self> {
        if features.ndim() != 2 || features.rows() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} labels for features of shape {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if features.rows() == 0 {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        if !features.all_finite() {
            return Err(Error::Dataset("features contain non-finite values".into()));
        }
        let classes = labels.iter().max().map_or(0, |&m| m + 1);
        Ok(Self {
            features,
            labels,
            classes,
            meta: None,
        })
    }

    pub fn features(&self) -> &Array {
        &self.features
    }

    /// Labels, for evaluation only.
    pub fn eval_labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// `1 + max label`.
    pub fn num_classes(&self) -> usize {
        self.classes
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dataset(format!("index {i} out of range {}", self.len())));
            }
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        let mut out = Self::new(Array::new(vec![indices.len(), d], data)?, labels)?;
        out.classes = self.classes;
        Ok(out)
    }
}

/// `classes` means on a sphere of radius `class_sep`, balanced labels in a
/// seeded random order, samples `mean + within_std · N(0, I)`.
pub fn gen_gaussian_mixture(p: &MixtureParams) -> Result<Dataset> {
    if p.classes < 2 || p.dim < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes and 2 dimensions (got {} and {})",
            p.classes, p.dim
        )));
    }
    if p.n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }
    if !(p.class_sep >= 0.0) || !(p.within_std >= 0.0) {
        return Err(Error::Config("class_sep and within_std must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut means = Vec::with_capacity(p.classes);
    for _ in 0..p.classes {
        let v: Vec<f64> = (0..p.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        means.push(v.into_iter().map(|x| x / norm * p.class_sep).collect::<Vec<f64>>());
    }
    let mut labels: Vec<usize> = (0..p.n).map(|i| i % p.classes).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(p.n * p.dim);
    for &y in &labels {
        for &mu in &means[y] {
            let eps: f64 = rng.sample(StandardNormal);
            data.push(if p.within_std == 0.0 { mu } else { mu + p.within_std * eps });
        }
    }
    let mut ds = Dataset::new(Array::new(vec![p.n, p.dim], data)?, labels)?;
    ds.classes = p.classes;
    ds.meta = Some(p.clone());
    Ok(ds)
}

/// Augmentation settings. Local views are masked; global views only when
/// `mask_global` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewParams {
    pub global: usize,
    pub local: usize,
    pub noise_global: f64,
    pub noise_local: f64,
    pub mask_ratio: f64,
    pub mask_global: bool,
}

impl Default for ViewParams {
    fn default() -> Self {
        Self {
            global: 2,
            local: 4,
            noise_global: 0.3,
            noise_local: 0.6,
            mask_ratio: 0.2,
            mask_global: false,
        }
    }
}

impl ViewParams {
    pub fn validate(&self) -> Result<()> {
        if self.global == 0 {
            return Err(Error::Config("at least one global view is required".into()));
        }
        if !(self.noise_global >= 0.0) || !(self.noise_local >= 0.0) {
            return Err(Error::Config("view noise must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask ratio must be in [0,1), got {}",
                self.mask_ratio
            )));
        }
        Ok(())
    }

    /// Number of coordinates zeroed in a masked view: `⌈ρ·D⌉`.
    pub fn masked_count(&self, dim: usize) -> usize {
        // tolerance absorbs products like 0.7 * 10 = 7.000000000000001
        let k = (self.mask_ratio * dim as f64 - 1e-9).ceil().max(0.0) as usize;
        k.min(dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub global: Vec<Array>,
    pub local: Vec<Array>,
    pub masked: bool,
}

impl ViewBatch {
    /// Global views first, then local views.
    pub fn all(&self) -> impl Iterator<Item = &Array> {
        self.global.iter().chain(&self.local)
    }

    pub fn count(&self) -> usize {
        self.global.len() + self.local.len()
    }
}

fn make_view(batch: &Array, seed: u64, noise: f64, mask: usize) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = batch.clone();
    let d = batch.cols();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        if noise > 0.0 {
            for x in row.iter_mut() {
                let eps: f64 = rng.sample(StandardNormal);
                *x += noise * eps;
            }
        }
        if mask > 0 {
            for k in rand::seq::index::sample(&mut rng, d, mask) {
                row[k] = 0.0;
            }
        }
    }
    out
}

/// Noisy, optionally masked copies of `batch`; view `k` uses stream `k`
/// of `seed`.
pub fn make_views(batch: &Array, seed: u64, p: &ViewParams) -> Result<ViewBatch> {
    p.validate()?;
    if batch.ndim() != 2 {
        return Err(Error::shape("make_views", format!("{:?}", batch.shape())));
    }
    let mask = p.masked_count(batch.cols());
    let global = (0..p.global)
        .map(|k| {
            let m = if p.mask_global { mask } else { 0 };
            make_view(batch, derive_seed(seed, k as u64), p.noise_global, m)
        })
        .collect();
    let local = (0..p.local)
        .map(|k| make_view(batch, derive_seed(seed, (p.global + k) as u64), p.noise_local, mask))
        .collect();
    Ok(ViewBatch {
        global,
        local,
        masked: mask > 0,
    })
}

/// Header `label,f0,f1,…`; values use the shortest round-trip formatting.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("label");
    for k in 0..ds.dim() {
        write!(s, ",f{k}").expect("string write");
    }
    s.push('\n');
    for (i, &y) in ds.eval_labels().iter().enumerate() {
        write!(s, "{y}").expect("string write");
        for x in ds.features().row(i) {
            write!(s, ",{x}").expect("string write");
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_csv(&fs::read_to_string(path)?)
}

pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Dataset("empty file: no header and no rows".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"label") || cols.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            reason: format!("header must be 'label,f0,f1,...', got '{header}'"),
        });
    }
    let d = cols.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(Error::Parse {
                line: lineno,
                reason: format!("expected {} fields, found {}", d + 1, fields.len()),
            });
        }
        let label = fields[0].parse::<usize>().map_err(|_| Error::Parse {
            line: lineno,
            reason: format!("label '{}' is not a non-negative integer", fields[0]),
        })?;
        labels.push(label);
        for f in &fields[1..] {
            let v = f.parse::<f64>().map_err(|_| Error::Parse {
                line: lineno,
                reason: format!("'{f}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    reason: format!("non-finite value '{f}'"),
                });
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::Dataset("empty dataset: header only".into()));
    }
    Dataset::new(Array::new(vec![labels.len(), d], data)?, labels)
}
