//! Self-distillation training loop.
//!
//! Each step draws augmented views of a batch, runs the EMA teacher on the
//! global views and the student on every view, averages the ensemble loss
//! over all (teacher view, student view) pairs with different views, then
//! updates the student with AdamW and the teacher by EMA.
//!
//! Training sees only a feature matrix; labels never enter this module.

mod optim;
mod schedule;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{adamw_step, clip_grad_norm, AdamParams, OptState};
pub use schedule::{cosine_schedule, linear_schedule};

use crate::data::{make_views, ViewParams};
use crate::ensloss::{
    check_divergence, scheme_loss, weight_mass, LogProbCube, SchemeKind, Source, WeightingScheme,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{
    derive_seed, encode, ema_update, head_logprobs, init_params, renormalize_teacher,
    save_checkpoint, BoundParams, Checkpoint, CheckpointMeta, ModelDims, ModelParams, Seeds,
    TeacherRenorm, TeacherState,
};
use crate::prob::entropy_from_log;
use crate::regularize::{memax_term, Renorm};
use crate::tensor::{concat, Array, Tape, Var};

/// Architecture options; the input width comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub heads: usize,
    pub codes: usize,
    pub embed_dim: usize,
    pub repr_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            codes: 64,
            embed_dim: 16,
            repr_dim: 32,
            encoder_hidden: vec![256, 256],
            head_hidden: vec![64, 64],
        }
    }
}

impl ModelConfig {
    pub fn dims(&self, input_dim: usize) -> ModelDims {
        ModelDims {
            input_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            repr_dim: self.repr_dim,
            head_hidden: self.head_hidden.clone(),
            embed_dim: self.embed_dim,
            codes: self.codes,
            heads: self.heads,
        }
    }
}

/// Multiplies the learning rate at one step; used to exercise the
/// divergence guard.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSpike {
    pub step: u64,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub weight_decay_start: f64,
    pub weight_decay_end: f64,
    pub momentum_start: f64,
    pub momentum_end: f64,
    pub tau_s: f64,
    pub tau_t_warm: f64,
    pub tau_t_target: f64,
    pub tau_t_decay_epochs: f64,
    /// Scheme name, optionally with the `-aligned` suffix.
    pub scheme: String,
    /// Fixed weighting temperature. When absent, Ent decays from
    /// `gamma_init_scale·ln c` to `gamma_target_scale·ln c` and every other
    /// scheme uses 1.
    pub gamma: Option<f64>,
    pub gamma_init_scale: f64,
    pub gamma_target_scale: f64,
    pub gamma_decay_epochs: f64,
    pub renorm: Renorm,
    pub sinkhorn_iters: usize,
    pub center_rate: f64,
    pub memax_weight: f64,
    pub clip_grad: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub views: ViewParams,
    pub model: ModelConfig,
    pub save_every: Option<usize>,
    pub divergence_threshold: f64,
    pub lr_spike: Option<LrSpike>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 200,
            batch_size: 128,
            base_lr: 1e-3,
            min_lr: 1e-6,
            warmup_epochs: 10.0,
            weight_decay_start: 0.04,
            weight_decay_end: 0.4,
            momentum_start: 0.996,
            momentum_end: 1.0,
            tau_s: 0.1,
            tau_t_warm: 0.05,
            tau_t_target: 0.025,
            tau_t_decay_epochs: 30.0,
            scheme: "Ent".into(),
            gamma: None,
            gamma_init_scale: 0.5,
            gamma_target_scale: 0.05,
            gamma_decay_epochs: 30.0,
            renorm: Renorm::None,
            sinkhorn_iters: crate::regularize::DEFAULT_SINKHORN_ITERS,
            center_rate: crate::regularize::DEFAULT_CENTER_RATE,
            memax_weight: 0.0,
            clip_grad: Some(3.0),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            views: ViewParams::default(),
            model: ModelConfig::default(),
            save_every: None,
            divergence_threshold: crate::ensloss::DIVERGENCE_THRESHOLD,
            lr_spike: None,
        }
    }
}

impl TrainConfig {
    pub fn weighting_scheme(&self) -> Result<WeightingScheme> {
        let mut s: WeightingScheme = self.scheme.parse()?;
        if let Some(g) = self.gamma {
            s.gamma = g;
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        self.weighting_scheme()?;
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.base_lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.base_lr {
            return bad("need 0 <= min_lr <= base_lr and base_lr > 0");
        }
        if !(self.warmup_epochs >= 0.0) || !(self.tau_t_decay_epochs >= 0.0) || !(self.gamma_decay_epochs >= 0.0)
        {
            return bad("epoch counts must be >= 0");
        }
        if !(self.weight_decay_start >= 0.0) || !(self.weight_decay_end >= 0.0) {
            return bad("weight decay must be >= 0");
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.momentum_start) || !unit.contains(&self.momentum_end) {
            return bad("teacher momentum must lie in [0,1]");
        }
        if !(self.tau_s > 0.0) || !(self.tau_t_target > 0.0) {
            return bad("temperatures must be positive");
        }
        if !(self.tau_t_warm > self.tau_t_target) {
            return bad("tau_t_warm must exceed tau_t_target");
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0) {
                return bad("gamma must be positive");
            }
        }
        if !(self.gamma_init_scale > 0.0) || !(self.gamma_target_scale > 0.0) {
            return bad("gamma scales must be positive");
        }
        if self.sinkhorn_iters == 0 {
            return bad("sinkhorn_iters must be >= 1");
        }
        if !(0.0..1.0).contains(&self.center_rate) {
            return bad("center_rate must lie in [0,1)");
        }
        if !(self.memax_weight >= 0.0) {
            return bad("memax_weight must be >= 0");
        }
        if let Some(c) = self.clip_grad {
            if !(c > 0.0) {
                return bad("clip_grad must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0)
        {
            return bad("invalid Adam hyperparameters");
        }
        if !(self.divergence_threshold > 0.0) {
            return bad("divergence_threshold must be positive");
        }
        self.views.validate()?;
        self.model.dims(2).validate()
    }
}

/// Scheduled quantities at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSchedule {
    pub lr: f64,
    pub weight_decay: f64,
    pub eta: f64,
    pub tau_t: f64,
    pub gamma: f64,
}

/// Diagnostics of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub schedule: StepSchedule,
    /// Mean teacher prediction entropy per head.
    pub head_entropy: Vec<f64>,
    /// Mean weight mass per student head, on the first view pair only;
    /// the general weight cube is too costly to build for every pair.
    pub weight_mass: Vec<f64>,
}

/// Student, teacher and optimizer state plus the step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub student: ModelParams,
    pub teacher: TeacherState,
    pub opt: OptState,
    pub scheme: WeightingScheme,
    pub steps_per_epoch: u64,
    pub total_steps: u64,
    pub step: u64,
    pub exec: Exec,
}

fn epochs_to_steps(epochs: f64, steps_per_epoch: u64) -> u64 {
    (epochs * steps_per_epoch as f64).round() as u64
}

impl Trainer {
    /// Fresh state for `n` rows of width `input_dim`.
    pub fn new(cfg: &TrainConfig, input_dim: usize, n: usize) -> Result<Self> {
        cfg.validate()?;
        if n == 0 {
            return Err(Error::Config("training data is empty".into()));
        }
        let dims = cfg.model.dims(input_dim);
        let student = init_params(cfg.seed, &dims)?;
        let center_rate = (cfg.renorm == Renorm::Center).then_some(cfg.center_rate);
        let teacher = TeacherState::from_student(&student, cfg.momentum_start, center_rate)?;
        let opt = OptState::new(student.tensors().into_iter().map(|(_, a)| a));
        let steps_per_epoch = (n / cfg.batch_size.min(n)) as u64;
        Ok(Self {
            scheme: cfg.weighting_scheme()?,
            cfg: cfg.clone(),
            student,
            teacher,
            opt,
            steps_per_epoch,
            total_steps: steps_per_epoch * cfg.epochs as u64,
            step: 0,
            exec: Exec::default(),
        })
    }

    pub fn schedule(&self, step: u64) -> StepSchedule {
        let cfg = &self.cfg;
        let total = self.total_steps;
        let warm = epochs_to_steps(cfg.warmup_epochs, self.steps_per_epoch).min(total);
        let mut lr = if step < warm {
            cfg.base_lr * step as f64 / warm as f64
        } else {
            cosine_schedule(cfg.base_lr, cfg.min_lr, step - warm, total - warm)
        };
        if let Some(spike) = cfg.lr_spike {
            if spike.step == step {
                lr *= spike.factor;
            }
        }
        let tau_steps = epochs_to_steps(cfg.tau_t_decay_epochs, self.steps_per_epoch);
        let gamma = match (cfg.gamma, self.scheme.kind) {
            (Some(g), _) => g,
            (None, SchemeKind::Ent) => {
                let log_c = (cfg.model.codes as f64).ln();
                let steps = epochs_to_steps(cfg.gamma_decay_epochs, self.steps_per_epoch);
                linear_schedule(cfg.gamma_init_scale * log_c, cfg.gamma_target_scale * log_c, step, steps)
            }
            (None, _) => 1.0,
        };
        StepSchedule {
            lr,
            weight_decay: cosine_schedule(cfg.weight_decay_start, cfg.weight_decay_end, step, total),
            // evaluated one step ahead so the final update uses the end value
            eta: cosine_schedule(cfg.momentum_start, cfg.momentum_end, step + 1, total),
            tau_t: linear_schedule(cfg.tau_t_warm, cfg.tau_t_target, step, tau_steps),
            gamma,
        }
    }

    /// Non-finite activations mean the parameters have blown up.
    fn blowup(&self, e: Error) -> Error {
        match e {
            Error::Degenerate { norm, op, .. } if !norm.is_finite() => Error::Divergence(format!(
                "scheme {}: non-finite activations in {op} at step {}",
                self.scheme.name(),
                self.step
            )),
            other => other,
        }
    }

    fn teacher_renorm(&self) -> TeacherRenorm {
        TeacherRenorm {
            mode: self.cfg.renorm,
            sinkhorn_iters: self.cfg.sinkhorn_iters,
        }
    }

    /// One optimization step on `batch` (`b×D`).
    pub fn train_step(&mut self, batch: &Array) -> Result<StepRecord> {
        let sched = self.schedule(self.step);
        let mut scheme = self.scheme;
        scheme.gamma = sched.gamma;
        let b = batch.rows();
        let m = self.student.dims.heads;
        let view_seed = derive_seed(derive_seed(self.cfg.seed, 0x7669_6577), self.step);
        let views = make_views(batch, view_seed, &self.cfg.views)?;
        let (g, nv) = (views.global.len(), views.count());

        // student on every view, in one pass
        let mut tape = Tape::with_exec(self.exec);
        let sp = BoundParams::bind(&mut tape, &self.student, true);
        let all_views = concat(&views.all().collect::<Vec<_>>(), 0)?;
        let x = tape.constant(all_views);
        let z = encode(&mut tape, &sp, x).map_err(|e| self.blowup(e))?;
        let head_lp = (0..m)
            .map(|j| head_logprobs(&mut tape, &sp, z, j, self.cfg.tau_s))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| self.blowup(e))?;
        let mut student_views: Vec<Vec<Var>> = Vec::with_capacity(nv);
        for v in 0..nv {
            let heads = head_lp
                .iter()
                .map(|&lp| tape.slice_rows(lp, v * b, b))
                .collect::<Result<Vec<_>>>()?;
            student_views.push(heads);
        }

        // teacher on global views only
        let global = concat(&views.global.iter().collect::<Vec<_>>(), 0)?;
        let tz = self.teacher.params.encode(&global).map_err(|e| self.blowup(e))?;
        let teacher_cos = (0..m)
            .map(|j| self.teacher.params.head_cosines(&tz, j))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| self.blowup(e))?;
        let centers = self.teacher.centers.as_deref();
        let mut teacher_views = Vec::with_capacity(g);
        let mut head_entropy = vec![0.0; m];
        for tv in 0..g {
            let heads = teacher_cos
                .iter()
                .enumerate()
                .map(|(j, cos)| {
                    renormalize_teacher(&cos.slice_rows(tv * b, b), j, sched.tau_t, self.teacher_renorm(), centers)
                })
                .collect::<Result<Vec<_>>>()?;
            for (j, h) in heads.iter().enumerate() {
                let total: f64 = (0..b).map(|r| entropy_from_log(h.row(r))).sum();
                head_entropy[j] += total / (b * g) as f64;
            }
            teacher_views.push(LogProbCube::from_heads(&heads.iter().collect::<Vec<_>>(), Source::Teacher)?);
        }

        // average over (teacher view, student view) pairs with distinct views
        let mut pair_losses = Vec::new();
        let mut mass = Vec::new();
        for (tv, cube) in teacher_views.iter().enumerate() {
            for (sv, heads) in student_views.iter().enumerate() {
                if sv == tv {
                    continue;
                }
                if pair_losses.is_empty() {
                    let ps = LogProbCube::from_tape(&tape, heads, Source::Student)?;
                    mass = weight_mass(&scheme, cube, &ps)?;
                }
                pair_losses.push(scheme_loss(&mut tape, cube, heads, &scheme)?);
            }
        }
        if pair_losses.is_empty() {
            return Err(Error::Config("need at least two views to form a pair".into()));
        }
        let npairs = pair_losses.len() as f64;
        let mut loss = pair_losses[0];
        for &l in &pair_losses[1..] {
            loss = tape.add(loss, l)?;
        }
        loss = tape.scale(loss, 1.0 / npairs)?;
        if self.cfg.memax_weight > 0.0 {
            let reg = memax_term(&mut tape, &head_lp, self.cfg.memax_weight)?;
            loss = tape.add(loss, reg)?;
        }
        let loss_value = tape.value(loss).item();
        check_divergence(loss_value, self.cfg.divergence_threshold, &self.scheme.name())?;

        let grads = tape.backward(loss)?;
        let mut grad_arrays = sp
            .all()
            .into_iter()
            .map(|v| grads.get(&tape, v))
            .collect::<Result<Vec<_>>>()?;
        drop(tape);
        if let Some(c) = self.cfg.clip_grad {
            clip_grad_norm(&mut grad_arrays, c);
        }
        let names: Vec<String> = self.student.tensors().into_iter().map(|(n, _)| n).collect();
        let decay: Vec<bool> = names.iter().map(|n| !n.ends_with(".bias")).collect();
        let hp = AdamParams {
            lr: sched.lr,
            weight_decay: sched.weight_decay,
            beta1: self.cfg.adam_beta1,
            beta2: self.cfg.adam_beta2,
            eps: self.cfg.adam_eps,
        };
        adamw_step(
            &mut self.student.tensors_mut(),
            &grad_arrays,
            &decay,
            &names,
            &mut self.opt,
            &hp,
        )
        .map_err(|e| match e {
            Error::Divergence(msg) => Error::Divergence(format!("scheme {}: {msg}", self.scheme.name())),
            other => other,
        })?;
        if let Some((name, _)) = self
            .student
            .tensors()
            .into_iter()
            .find(|(_, t)| !t.all_finite())
        {
            return Err(Error::Divergence(format!(
                "scheme {}: parameter {name} became non-finite at step {}",
                self.scheme.name(),
                self.step
            )));
        }
        ema_update(&mut self.teacher, &self.student, sched.eta)?;
        if let Some(cs) = self.teacher.centers.as_mut() {
            for (c, cos) in cs.iter_mut().zip(&teacher_cos) {
                c.update(cos)?;
            }
        }
        let record = StepRecord {
            step: self.step,
            loss: loss_value,
            schedule: sched,
            head_entropy,
            weight_mass: mass,
        };
        self.step += 1;
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            meta: CheckpointMeta {
                step: self.step,
                scheme: self.scheme.name(),
                seeds: Seeds {
                    init: self.cfg.seed,
                    data: shuffle_seed(self.cfg.seed),
                    views: derive_seed(self.cfg.seed, 0x7669_6577),
                },
            },
        }
    }
}

fn shuffle_seed(seed: u64) -> u64 {
    derive_seed(seed, 0x7368_7566)
}

/// Row order of one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(shuffle_seed(seed), epoch as u64));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn gather_rows(x: &Array, idx: &[usize]) -> Array {
    let d = x.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Array::new(vec![idx.len(), d], data).expect("shape matches data")
}

#[derive(Debug)]
pub struct FitOutput {
    pub checkpoint: Checkpoint,
    pub curve: Vec<StepRecord>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ensd";
pub const CURVE_FILE: &str = "curve.csv";

/// Trains on the rows of `features`. With `out_dir`, writes the final
/// checkpoint, periodic checkpoints and the training curve there.
pub fn fit(cfg: &TrainConfig, features: &Array, out_dir: Option<&Path>) -> Result<FitOutput> {
    fit_with(cfg, features, out_dir, |_| {})
}

/// [`fit`] with a callback after every step.
pub fn fit_with(
    cfg: &TrainConfig,
    features: &Array,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<FitOutput> {
    if features.ndim() != 2 || features.rows() == 0 {
        return Err(Error::Config("training data is empty".into()));
    }
    let n = features.rows();
    let mut trainer = Trainer::new(cfg, features.cols(), n)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let b = cfg.batch_size.min(n);
    let mut curve = Vec::with_capacity(trainer.total_steps as usize);
    for epoch in 0..cfg.epochs {
        let perm = epoch_permutation(n, cfg.seed, epoch);
        for k in 0..trainer.steps_per_epoch as usize {
            let batch = gather_rows(features, &perm[k * b..(k + 1) * b]);
            let rec = trainer.train_step(&batch)?;
            on_step(&rec);
            curve.push(rec);
        }
        if let (Some(dir), Some(every)) = (out_dir, cfg.save_every) {
            if every > 0 && (epoch + 1) % every == 0 {
                save_checkpoint(&trainer.checkpoint(), dir.join(format!("checkpoint-epoch{}.ensd", epoch + 1)))?;
            }
        }
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out_dir {
        save_checkpoint(&checkpoint, dir.join(CHECKPOINT_FILE))?;
        fs::write(dir.join(CURVE_FILE), curve_csv(&curve, cfg.model.heads))?;
    }
    Ok(FitOutput { checkpoint, curve })
}

/// `step,loss,lr,eta,tau_t,gamma,head_entropy_0..,weight_mass_0..`
pub fn curve_csv(curve: &[StepRecord], heads: usize) -> String {
    let mut s = String::from("step,loss,lr,eta,tau_t,gamma");
    for j in 0..heads {
        write!(s, ",head_entropy_{j}").expect("string write");
    }
    for j in 0..heads {
        write!(s, ",weight_mass_{j}").expect("string write");
    }
    s.push('\n');
    for r in curve {
        let sc = &r.schedule;
        write!(s, "{},{},{},{},{},{}", r.step, r.loss, sc.lr, sc.eta, sc.tau_t, sc.gamma).expect("string write");
        for v in r.head_entropy.iter().chain(&r.weight_mass) {
            write!(s, ",{v}").expect("string write");
        }
        s.push('\n');
    }
    s
}
