//! Clustering student and EMA teacher: a shared MLP encoder, `m` projection
//! heads and `m` codebooks. Predictions are temperature-scaled softmaxes over
//! cosine similarities between a head embedding and the codebook rows.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Seeds};

use crate::error::{Error, Result};
use crate::regularize::{sinkhorn_log, CenterState, Renorm};
use crate::tensor::{log_softmax_rows, Array, Tape, Var};

/// Architecture sizes. Hidden layers use GELU; the last layer of each MLP
/// is linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    /// `l`
    pub repr_dim: usize,
    pub head_hidden: Vec<usize>,
    /// `d`
    pub embed_dim: usize,
    /// `c`
    pub codes: usize,
    /// `m`
    pub heads: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let widths = std::iter::once(self.input_dim)
            .chain(self.encoder_hidden.iter().copied())
            .chain([self.repr_dim])
            .chain(self.head_hidden.iter().copied());
        if widths.into_iter().any(|w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.heads < 1 || self.codes < 2 || self.embed_dim < 2 {
            return Err(Error::Config(format!(
                "need m >= 1, c >= 2, d >= 2 (got m={}, c={}, d={})",
                self.heads, self.codes, self.embed_dim
            )));
        }
        Ok(())
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.encoder_hidden);
        w.push(self.repr_dim);
        w
    }

    fn head_widths(&self) -> Vec<usize> {
        let mut w = vec![self.repr_dim];
        w.extend(&self.head_hidden);
        w.push(self.embed_dim);
        w
    }
}

/// Dense layer `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array,
    pub bias: Array,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let weight = Array::new(vec![fan_in, fan_out], draw(fan_in * fan_out))
            .expect("shape matches data");
        let bias = Array::vector(draw(fan_out));
        Self { weight, bias }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn init(widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Self { layers }
    }
}

/// Student or teacher parameters: one encoder `ω`, per-head MLPs `ψ_j` and
/// per-head `c×d` codebooks `μ_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub encoder: Mlp,
    pub heads: Vec<Mlp>,
    pub codebooks: Vec<Array>,
}

/// Derives the RNG seed of stream `k` from a base seed.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic initialization. The encoder uses stream 0 and head `j`
/// (MLP and codebook) uses stream `j + 1`, so heads are independent of `m`.
pub fn init_params(seed: u64, dims: &ModelDims) -> Result<ModelParams> {
    dims.validate()?;
    let mut enc_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let encoder = Mlp::init(&dims.encoder_widths(), &mut enc_rng);
    let head_widths = dims.head_widths();
    let mut heads = Vec::with_capacity(dims.heads);
    let mut codebooks = Vec::with_capacity(dims.heads);
    for j in 0..dims.heads {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, j as u64 + 1));
        heads.push(Mlp::init(&head_widths, &mut rng));
        let n = dims.codes * dims.embed_dim;
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        codebooks.push(Array::new(vec![dims.codes, dims.embed_dim], data)?);
    }
    Ok(ModelParams {
        dims: dims.clone(),
        encoder,
        heads,
        codebooks,
    })
}

impl ModelParams {
    /// Every tensor with a stable name, in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Array)> {
        let mut out = Vec::new();
        for (k, l) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.{k}.weight"), &l.weight));
            out.push((format!("encoder.{k}.bias"), &l.bias));
        }
        for (j, h) in self.heads.iter().enumerate() {
            for (k, l) in h.layers.iter().enumerate() {
                out.push((format!("head.{j}.{k}.weight"), &l.weight));
                out.push((format!("head.{j}.{k}.bias"), &l.bias));
            }
        }
        for (j, mu) in self.codebooks.iter().enumerate() {
            out.push((format!("codebook.{j}"), mu));
        }
        out
    }

    /// Mutable tensors in the order of [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Array> {
        let mut out = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for h in &mut self.heads {
            for l in &mut h.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.extend(self.codebooks.iter_mut());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Encoder outputs for a batch, without recording gradients.
    pub fn encode(&self, x: &Array) -> Result<Array> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind_encoder(&mut tape, self, false);
        let xv = tape.constant(x.clone());
        let z = encode(&mut tape, &bound, xv)?;
        Ok(tape.value(z).clone())
    }

    /// Cosine similarities `[b×c]` between head-`j` embeddings and codes.
    pub fn head_cosines(&self, z: &Array, j: usize) -> Result<Array> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, self, false);
        let zv = tape.constant(z.clone());
        let cos = head_cosines(&mut tape, &bound, zv, j)?;
        Ok(tape.value(cos).clone())
    }
}

/// Tape handles for every parameter tensor.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub encoder: Vec<(Var, Var)>,
    pub heads: Vec<Vec<(Var, Var)>>,
    pub codebooks: Vec<Var>,
}

impl BoundParams {
    /// Records all parameters as leaves (`trainable`) or constants.
    pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let mut put = |a: &Array| {
            if trainable {
                tape.leaf(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        let mut bind_mlp = |mlp: &Mlp| -> Vec<(Var, Var)> {
            mlp.layers
                .iter()
                .map(|l| (put(&l.weight), put(&l.bias)))
                .collect()
        };
        let encoder = bind_mlp(&params.encoder);
        let heads = params.heads.iter().map(&mut bind_mlp).collect();
        let codebooks = params.codebooks.iter().map(put).collect();
        Self {
            encoder,
            heads,
            codebooks,
        }
    }

    fn bind_encoder(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let encoder = params
            .encoder
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect();
        Self {
            encoder,
            heads: Vec::new(),
            codebooks: Vec::new(),
        }
    }

    /// Handles in the order of [`ModelParams::tensors`].
    /// Reassembles handles from a flat leaf list in the canonical order of
    /// [`ModelParams::tensors`].
    pub fn from_leaves(p: &ModelParams, leaves: &[Var]) -> Self {
        let mut it = leaves.iter().copied();
        let mut pairs = |n: usize| -> Vec<(Var, Var)> {
            (0..n)
                .map(|_| (it.next().expect("weight leaf"), it.next().expect("bias leaf")))
                .collect()
        };
        let encoder = pairs(p.encoder.layers.len());
        let heads = p.heads.iter().map(|h| pairs(h.layers.len())).collect();
        Self {
            encoder,
            heads,
            codebooks: it.collect(),
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in &self.encoder {
            out.extend([w, b]);
        }
        for h in &self.heads {
            for &(w, b) in h {
                out.extend([w, b]);
            }
        }
        out.extend(&self.codebooks);
        out
    }

    pub fn heads(&self) -> usize {
        self.heads.len()
    }
}

fn mlp_forward(tape: &mut Tape, layers: &[(Var, Var)], x: Var) -> Result<Var> {
    let mut h = x;
    for (k, &(w, b)) in layers.iter().enumerate() {
        let lin = tape.matmul(h, w)?;
        h = tape.add_row_vector(lin, b)?;
        if k + 1 < layers.len() {
            h = tape.gelu(h)?;
        }
    }
    Ok(h)
}

/// Shared representation `r_ω(x)`.
pub fn encode(tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
    mlp_forward(tape, &p.encoder, x)
}

/// `cos(h_ψj(z), μ_jy)` for every row of `z` and every code `y`.
pub fn head_cosines(tape: &mut Tape, p: &BoundParams, z: Var, j: usize) -> Result<Var> {
    let head = p
        .heads
        .get(j)
        .ok_or_else(|| Error::shape("head_cosines", format!("head {j} of {}", p.heads.len())))?;
    let e = mlp_forward(tape, head, z)?;
    let e = tape.row_l2_normalize(e)?;
    let mu = tape.row_l2_normalize(p.codebooks[j])?;
    let mu_t = tape.transpose(mu)?;
    tape.matmul(e, mu_t)
}

/// Student log-probabilities of head `j` from encoder outputs `z`.
pub fn head_logprobs(tape: &mut Tape, p: &BoundParams, z: Var, j: usize, tau: f64) -> Result<Var> {
    let cos = head_cosines(tape, p, z, j)?;
    tape.log_softmax_rows(cos, tau)
}

/// `log s(Y | θ_j, x)` for a batch `x`.
pub fn student_logprobs(
    tape: &mut Tape,
    p: &BoundParams,
    x: Var,
    j: usize,
    tau_s: f64,
) -> Result<Var> {
    let z = encode(tape, p, x)?;
    head_logprobs(tape, p, z, j, tau_s)
}

/// EMA copy of the student plus optional per-head logit centers.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: ModelParams,
    pub centers: Option<Vec<CenterState>>,
    pub momentum: f64,
}

impl TeacherState {
    pub fn from_student(student: &ModelParams, momentum: f64, center_rate: Option<f64>) -> Result<Self> {
        let centers = center_rate
            .map(|r| {
                (0..student.dims.heads)
                    .map(|_| CenterState::new(student.dims.codes, r))
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        Ok(Self {
            params: student.clone(),
            centers,
            momentum,
        })
    }
}

/// Teacher renormalization options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherRenorm {
    pub mode: Renorm,
    pub sinkhorn_iters: usize,
}

impl Default for TeacherRenorm {
    fn default() -> Self {
        Self {
            mode: Renorm::None,
            sinkhorn_iters: crate::regularize::DEFAULT_SINKHORN_ITERS,
        }
    }
}

/// Turns raw teacher cosines `[b×c]` of head `j` into target log-probabilities.
pub fn renormalize_teacher(
    cos: &Array,
    j: usize,
    tau_t: f64,
    renorm: TeacherRenorm,
    centers: Option<&[CenterState]>,
) -> Result<Array> {
    if !(tau_t > 0.0) {
        return Err(Error::Domain(format!("teacher temperature must be positive, got {tau_t}")));
    }
    match renorm.mode {
        Renorm::None => log_softmax_rows(cos, tau_t),
        Renorm::Center => {
            let c = centers
                .and_then(|c| c.get(j))
                .ok_or_else(|| Error::Config("centering requested but teacher has no centers".into()))?;
            log_softmax_rows(&c.apply(cos)?, tau_t)
        }
        Renorm::Sinkhorn => sinkhorn_log(&cos.map(|x| x / tau_t), renorm.sinkhorn_iters),
    }
}

/// Teacher targets for head `j` as a constant node: the forward pass runs on
/// the tape, the renormalized result is re-inserted behind a gradient stop.
pub fn teacher_logprobs(
    tape: &mut Tape,
    p: &BoundParams,
    x: Var,
    j: usize,
    tau_t: f64,
    renorm: TeacherRenorm,
    centers: Option<&[CenterState]>,
) -> Result<Var> {
    let z = encode(tape, p, x)?;
    let cos = head_cosines(tape, p, z, j)?;
    let cos = tape.stop_gradient(cos)?;
    let lp = renormalize_teacher(tape.value(cos), j, tau_t, renorm, centers)?;
    Ok(tape.constant(lp))
}

/// `teacher ← η·teacher + (1 − η)·student` for every tensor.
pub fn ema_update(teacher: &mut TeacherState, student: &ModelParams, eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Domain(format!("EMA rate must be in [0,1], got {eta}")));
    }
    if teacher.params.dims != student.dims {
        return Err(Error::shape("ema_update", "teacher and student dims differ"));
    }
    let src = student.tensors();
    let dst = teacher.params.tensors_mut();
    if src.len() != dst.len() {
        return Err(Error::shape("ema_update", "tensor count differs"));
    }
    for ((name, s), t) in src.into_iter().zip(dst) {
        if s.shape() != t.shape() {
            return Err(Error::shape(
                "ema_update",
                format!("{name}: {:?} vs {:?}", t.shape(), s.shape()),
            ));
        }
        // endpoints are exact: no arithmetic at all
        if eta == 1.0 {
            continue;
        }
        if eta == 0.0 {
            t.data_mut().copy_from_slice(s.data());
            continue;
        }
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = eta * *a + (1.0 - eta) * b;
        }
    }
    teacher.momentum = eta;
    Ok(())
}

#[cfg(test)]
mod tests;
