//! Command-line surface: data generation, training, evaluation, diversity
//! analysis and gradient self-checks.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or config error,
//! 3 divergence.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gen_gaussian_mixture, load_csv, write_csv, Dataset, MixtureParams};
use crate::ensloss::{scheme_loss, LogProbCube, Source, WeightingScheme};
use crate::error::{Error, Result};
use crate::evalkit::{
    diversity_report, eval_csv, fewshot_split, knn_accuracy, linear_probe, mean_std, probe_rows, EvalRow,
    ProbeOptions, ReprBank, DEFAULT_L2_GRID, DEFAULT_PROBE_INPUTS, KNN_TAU,
};
use crate::exec::{init_threads, Exec};
use crate::model::{
    head_logprobs, init_params, load_checkpoint, renormalize_teacher, BoundParams, ModelDims, TeacherRenorm,
};
use crate::tensor::{finite_diff_check, Array};
use crate::train::{fit, TrainConfig, CURVE_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence(_) => EXIT_DIVERGENCE,
        Error::Config(_)
        | Error::Format { .. }
        | Error::Parse { .. }
        | Error::Dataset(_)
        | Error::Io(_)
        | Error::Json(_) => EXIT_USAGE,
        _ => EXIT_CHECK_FAILED,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[default]
    All,
    Knn,
    Linear,
    Fewshot,
}

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub protocol: Protocol,
    /// Neighbours for k-NN.
    pub k: usize,
    pub knn_tau: f64,
    pub shots: Vec<usize>,
    /// Split seeds; results are reported as mean ± std over them.
    pub seeds: Vec<u64>,
    /// Test fraction of the full-data k-NN and linear protocols.
    pub test_fraction: f64,
    pub l2_grid: Vec<f64>,
    pub probe_iters: usize,
    /// Inputs used for the diversity analysis.
    pub probe_inputs: usize,
    /// Teacher temperature of the assignment matrices.
    pub assignment_tau: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            protocol: Protocol::All,
            k: 20,
            knn_tau: KNN_TAU,
            shots: vec![1, 2, 5],
            seeds: vec![0, 1, 2],
            test_fraction: 0.2,
            l2_grid: DEFAULT_L2_GRID.to_vec(),
            probe_iters: 5000,
            probe_inputs: DEFAULT_PROBE_INPUTS,
            assignment_tau: TrainConfig::default().tau_t_target,
        }
    }
}

/// JSON run description. Unknown keys are rejected at every level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalOptions,
    /// CSV with a `label,f0,f1,…` header.
    pub data: Option<PathBuf>,
    /// Generated data, used when no CSV is given.
    pub synthetic: Option<MixtureParams>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match (&self.data, &self.synthetic) {
            (Some(p), _) => load_csv(p),
            (None, Some(m)) => gen_gaussian_mixture(m),
            (None, None) => Err(Error::Config("no data: pass --data or set \"data\"/\"synthetic\"".into())),
        }
    }
}

/// The 16-class synthetic benchmark.
pub fn benchmark_mixture(seed: u64) -> MixtureParams {
    MixtureParams {
        seed,
        classes: 16,
        dim: 32,
        n: 8192,
        class_sep: 4.0,
        within_std: 1.0,
    }
}

#[derive(Debug, Parser)]
#[command(name = "ensd", version, about = "Weighted-ensemble self-distillation at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a labeled Gaussian-mixture CSV.
    GenData(GenDataArgs),
    /// Train a model; writes checkpoint.ensd, curve.csv and config.json.
    Train(TrainArgs),
    /// Frozen-representation evaluation; writes eval.csv.
    Eval(EvalArgs),
    /// Head-diversity analysis; writes diversity.csv and diversity_summary.csv.
    Analyze(AnalyzeArgs),
    /// Autodiff against finite differences for every weighting scheme.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 4.0)]
    pub class_sep: f64,
    #[arg(long, default_value_t = 1.0)]
    pub within_std: f64,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Overrides applied on top of the JSON config.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// JSON run config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input CSV, overriding the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weighting scheme, e.g. Ent, Unif, Prob-aligned.
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_parser = ["none", "center", "sinkhorn"])]
    pub renorm: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.data {
            cfg.data = Some(p.clone());
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(s) = &self.scheme {
            cfg.train.scheme = s.clone();
        }
        if let Some(m) = self.heads {
            cfg.train.model.heads = m;
        }
        if let Some(g) = self.gamma {
            cfg.train.gamma = Some(g);
        }
        if let Some(r) = &self.renorm {
            cfg.train.renorm = r.parse()?;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub run: Overrides,
    #[arg(long, value_enum)]
    pub protocol: Option<Protocol>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated shot counts.
    #[arg(long, value_delimiter = ',')]
    pub shots: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub run: Overrides,
    /// Number of probe inputs.
    #[arg(long)]
    pub probe_inputs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Check a single scheme instead of all of them.
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args`, runs the command and returns the exit code. Usage errors
/// print clap's message.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_threads(std::env::var("ENSD_THREADS").ok().and_then(|v| v.parse().ok()));
    match run(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::GenData(a) => cmd_gen_data(a).map(|_| EXIT_OK),
        Command::Train(a) => cmd_train(&a.run.resolve()?).map(|_| EXIT_OK),
        Command::Eval(a) => {
            let mut cfg = a.run.resolve()?;
            if let Some(p) = a.protocol {
                cfg.eval.protocol = p;
            }
            if let Some(k) = a.k {
                cfg.eval.k = k;
            }
            if let Some(s) = &a.shots {
                cfg.eval.shots = s.clone();
            }
            let rows = cmd_eval(&a.checkpoint, &cfg)?;
            print!("{}", eval_table(&rows));
            Ok(EXIT_OK)
        }
        Command::Analyze(a) => {
            let mut cfg = a.run.resolve()?;
            if let Some(n) = a.probe_inputs {
                cfg.eval.probe_inputs = n;
            }
            cmd_analyze(&a.checkpoint, &cfg).map(|_| EXIT_OK)
        }
        Command::GradCheck(a) => {
            let schemes = match &a.scheme {
                Some(s) => vec![s.parse::<WeightingScheme>()?],
                None => WeightingScheme::all_variants(),
            };
            let report = grad_suite(&schemes, a.seed)?;
            for r in &report {
                println!(
                    "{:<16} max rel err {:.3e}  {}",
                    r.scheme,
                    r.max_rel_error,
                    if r.passed { "pass" } else { "FAIL" }
                );
            }
            Ok(if report.iter().all(|r| r.passed) {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            })
        }
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let ds = gen_gaussian_mixture(&MixtureParams {
        seed: a.seed,
        classes: a.classes,
        dim: a.dim,
        n: a.n,
        class_sep: a.class_sep,
        within_std: a.within_std,
    })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_csv(&ds, &a.out)
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.out
        .as_deref()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set \"out\"".into()))
}

pub const CONFIG_FILE: &str = "config.json";
pub const EVAL_FILE: &str = "eval.csv";
pub const DIVERSITY_FILE: &str = "diversity.csv";
pub const DIVERSITY_SUMMARY_FILE: &str = "diversity_summary.csv";

/// Trains on the configured data. Labels are dropped before training.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let ds = cfg.dataset()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)? + "\n")?;
    let out = fit(&cfg.train, ds.features(), Some(dir))?;
    let last = out.curve.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {} steps, final loss {last:.6}; wrote {}",
        out.curve.len(),
        dir.join(CURVE_FILE).display()
    );
    Ok(())
}

/// Stratification-free random split; `(train, test)` indices ascending.
pub fn holdout_split(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = rand::seq::index::sample(&mut rng, n, n_test).into_vec();
    test.sort_unstable();
    let mut is_test = vec![false; n];
    test.iter().for_each(|&i| is_test[i] = true);
    ((0..n).filter(|&i| !is_test[i]).collect(), test)
}

fn probe_options(cfg: &RunConfig, seed: u64) -> ProbeOptions {
    ProbeOptions {
        grid: cfg.eval.l2_grid.clone(),
        max_iters: cfg.eval.probe_iters,
        split_seed: seed,
        ..ProbeOptions::default()
    }
}

/// Evaluates the frozen teacher encoder; writes `eval.csv` when an output
/// directory is configured.
pub fn cmd_eval(checkpoint: &Path, cfg: &RunConfig) -> Result<Vec<EvalRow>> {
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = cfg.dataset()?;
    if ds.dim() != ckpt.teacher.params.dims.input_dim {
        return Err(Error::Config(format!(
            "data has {} features, checkpoint expects {}",
            ds.dim(),
            ckpt.teacher.params.dims.input_dim
        )));
    }
    let bank = ReprBank::from_model(&ckpt.teacher.params, &ds)?;
    let ev = &cfg.eval;
    let mut rows = Vec::new();
    let want = |p: Protocol| ev.protocol == Protocol::All || ev.protocol == p;
    for &seed in &ev.seeds {
        if want(Protocol::Knn) || want(Protocol::Linear) {
            let (tr, te) = holdout_split(ds.len(), ev.test_fraction, seed);
            let (tr, te) = (sub_bank(&bank, &tr), sub_bank(&bank, &te));
            if want(Protocol::Knn) {
                rows.push(EvalRow {
                    split: "full".into(),
                    metric: "knn".into(),
                    value: knn_accuracy(&tr, &te, ev.k, ev.knn_tau, Exec::default())?,
                    lambda_or_k: ev.k as f64,
                    seed,
                });
            }
            if want(Protocol::Linear) {
                let res = linear_probe(&tr, &te, &probe_options(cfg, seed))?;
                rows.push(EvalRow {
                    split: "full".into(),
                    metric: "linear".into(),
                    value: res.accuracy,
                    lambda_or_k: res.lambda,
                    seed,
                });
            }
        }
        if want(Protocol::Fewshot) {
            for &shots in &ev.shots {
                let split = fewshot_split(&ds, shots, seed)?;
                let tr = ReprBank::from_model(&ckpt.teacher.params, &split.labeled)?;
                let te = ReprBank::from_model(&ckpt.teacher.params, &split.test)?;
                let res = linear_probe(&tr, &te, &probe_options(cfg, seed))?;
                rows.push(EvalRow {
                    split: format!("{shots}-shot"),
                    metric: "linear".into(),
                    value: res.accuracy,
                    lambda_or_k: res.lambda,
                    seed,
                });
            }
        }
    }
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(EVAL_FILE), eval_csv(&rows))?;
    }
    Ok(rows)
}

fn sub_bank(bank: &ReprBank, idx: &[usize]) -> ReprBank {
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

/// `split metric mean ± std (n)` per group, in first-seen order.
pub fn eval_table(rows: &[EvalRow]) -> String {
    let mut groups: Vec<((String, String), Vec<f64>)> = Vec::new();
    for r in rows {
        let key = (r.split.clone(), r.metric.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.value),
            None => groups.push((key, vec![r.value])),
        }
    }
    let mut s = format!("{:<10} {:<8} {:>18}\n", "split", "metric", "accuracy (%)");
    for ((split, metric), vals) in groups {
        let (m, sd) = mean_std(&vals);
        writeln!(s, "{split:<10} {metric:<8} {:>9.2} ± {:<5.2} (n={})", 100.0 * m, 100.0 * sd, vals.len())
            .expect("string write");
    }
    s
}

/// Writes the diversity curves and per-pair summary. With one head the
/// curve file holds only its header.
pub fn cmd_analyze(checkpoint: &Path, cfg: &RunConfig) -> Result<crate::evalkit::DiversityReport> {
    let dir = out_dir(cfg)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = cfg.dataset()?;
    if ckpt.teacher.params.dims.heads < 2 {
        eprintln!("warning: checkpoint has a single head; no head pairs to compare");
    }
    let probe = probe_rows(ds.features(), cfg.eval.probe_inputs, 0);
    let report = diversity_report(&ckpt, &probe, cfg.eval.assignment_tau, Exec::default())?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(DIVERSITY_FILE), report.to_csv())?;
    let mut summary = String::from("head_i,head_j,mean_similarity\n");
    for p in &report.pairs {
        writeln!(summary, "{},{},{}", p.head_i, p.head_j, p.mean).expect("string write");
    }
    fs::write(dir.join(DIVERSITY_SUMMARY_FILE), summary)?;
    if let Some(m) = report.mean_similarity() {
        println!("mean aligned similarity over {} head pairs: {m:.6}", report.pairs.len());
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSuiteResult {
    pub scheme: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub const GRAD_SUITE_TOL: f64 = 1e-4;

/// Dimensions of the gradient-suite model.
pub fn grad_suite_dims() -> ModelDims {
    ModelDims {
        input_dim: 8,
        encoder_hidden: vec![6],
        repr_dim: 6,
        head_hidden: vec![6],
        embed_dim: 6,
        codes: 5,
        heads: 3,
    }
}

/// Compares the training-loss gradient w.r.t. every student parameter
/// against central finite differences, once per scheme.
pub fn grad_suite(schemes: &[WeightingScheme], seed: u64) -> Result<Vec<GradSuiteResult>> {
    let dims = grad_suite_dims();
    let (b, tau_s, tau_t) = (4, 0.5, 0.25);
    let student = init_params(seed, &dims)?;
    let teacher = init_params(seed.wrapping_add(1), &dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array::new(vec![b, dims.input_dim], (0..b * dims.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let tz = teacher.encode(&x)?;
    let heads = (0..dims.heads)
        .map(|j| renormalize_teacher(&teacher.head_cosines(&tz, j)?, j, tau_t, TeacherRenorm::default(), None))
        .collect::<Result<Vec<_>>>()?;
    let cube = LogProbCube::from_heads(&heads.iter().collect::<Vec<_>>(), Source::Teacher)?;
    let tensors: Vec<Array> = student.tensors().into_iter().map(|(_, a)| a.clone()).collect();
    let mut out = Vec::with_capacity(schemes.len());
    for scheme in schemes {
        let check = finite_diff_check(&tensors, 1e-6, |t, leaves| {
            let bound = BoundParams::from_leaves(&student, leaves);
            let xv = t.constant(x.clone());
            let z = crate::model::encode(t, &bound, xv)?;
            let lps = (0..dims.heads)
                .map(|j| head_logprobs(t, &bound, z, j, tau_s))
                .collect::<Result<Vec<_>>>()?;
            scheme_loss(t, &cube, &lps, scheme)
        })?;
        let err = check.max_rel_error.unwrap_or(0.0);
        out.push(GradSuiteResult {
            scheme: scheme.name(),
            max_rel_error: err,
            passed: check.passes(GRAD_SUITE_TOL),
        });
    }
    Ok(out)
}
