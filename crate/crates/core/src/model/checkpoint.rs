//! Binary checkpoint format:
//!
//! ```text
//! b"ENSD" | u32 version (LE) | u64 header length (LE) | JSON header | tensors
//! ```
//!
//! Tensors are little-endian `f32`, written in the order listed by the header.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelDims, ModelParams, TeacherState};
use crate::error::{Error, Result};
use crate::regularize::CenterState;
use crate::tensor::Array;

pub const MAGIC: &[u8; 4] = b"ENSD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub views: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub step: u64,
    pub scheme: String,
    pub seeds: Seeds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub student: ModelParams,
    pub teacher: TeacherState,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: ModelDims,
    m: usize,
    c: usize,
    d: usize,
    step: u64,
    scheme: String,
    seeds: Seeds,
    teacher_momentum: f64,
    center_rate: Option<f64>,
    tensors: Vec<TensorEntry>,
}

fn collect_tensors(ckpt: &Checkpoint) -> Vec<(String, &Array)> {
    let mut out: Vec<(String, &Array)> = ckpt
        .student
        .tensors()
        .into_iter()
        .map(|(n, a)| (format!("student.{n}"), a))
        .collect();
    out.extend(
        ckpt.teacher
            .params
            .tensors()
            .into_iter()
            .map(|(n, a)| (format!("teacher.{n}"), a)),
    );
    out
}

/// Serializes a checkpoint into its byte representation.
pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    if ckpt.student.dims != ckpt.teacher.params.dims {
        return Err(Error::shape("save_checkpoint", "teacher and student dims differ"));
    }
    let mut tensors = collect_tensors(ckpt);
    let center_arrays: Vec<Array> = ckpt
        .teacher
        .centers
        .iter()
        .flatten()
        .map(|c| Array::vector(c.center.clone()))
        .collect();
    for (j, a) in center_arrays.iter().enumerate() {
        tensors.push((format!("teacher.center.{j}"), a));
    }
    let dims = &ckpt.student.dims;
    let header = Header {
        dims: dims.clone(),
        m: dims.heads,
        c: dims.codes,
        d: dims.embed_dim,
        step: ckpt.meta.step,
        scheme: ckpt.meta.scheme.clone(),
        seeds: ckpt.meta.seeds.clone(),
        teacher_momentum: ckpt.teacher.momentum,
        center_rate: ckpt
            .teacher
            .centers
            .as_ref()
            .and_then(|c| c.first())
            .map(|c| c.rate),
        tensors: tensors
            .iter()
            .map(|(n, a)| TensorEntry {
                name: n.clone(),
                shape: a.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = tensors.iter().map(|(_, a)| a.len() * 4).sum();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, a) in &tensors {
        for &x in a.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(ckpt)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        path: "<memory>".into(),
        reason: reason.into(),
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(format_err(format!("file too short ({} bytes)", bytes.len())));
    }
    if bytes[..4] != MAGIC[..] {
        return Err(format_err(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let hend = usize::try_from(hlen)
        .ok()
        .and_then(|h| h.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err(format!("header length {hlen} exceeds file size")))?;
    let header: Header = serde_json::from_slice(&bytes[16..hend])
        .map_err(|e| format_err(format!("invalid header: {e}")))?;
    header
        .dims
        .validate()
        .map_err(|e| format_err(format!("invalid dims: {e}")))?;
    if header.m != header.dims.heads || header.c != header.dims.codes || header.d != header.dims.embed_dim {
        return Err(format_err("m/c/d disagree with dims"));
    }

    let mut offset = hend;
    let mut read = |entry: &TensorEntry| -> Result<Array> {
        let n: usize = entry.shape.iter().product();
        let end = offset + n * 4;
        if end > bytes.len() {
            return Err(format_err(format!("truncated in tensor '{}'", entry.name)));
        }
        let data = bytes[offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        offset = end;
        Array::new(entry.shape.clone(), data)
    };

    let mut student = super::init_params(0, &header.dims)?;
    let mut teacher_params = student.clone();
    let mut entries = header.tensors.iter();
    for (prefix, params) in [("student.", &mut student), ("teacher.", &mut teacher_params)] {
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let entry = entries
                .next()
                .ok_or_else(|| format_err(format!("missing tensor {prefix}{name}")))?;
            if entry.name != format!("{prefix}{name}") || entry.shape != slot.shape() {
                return Err(format_err(format!(
                    "expected {prefix}{name} {:?}, found {} {:?}",
                    slot.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            *slot = read(entry)?;
        }
    }
    let centers = match header.center_rate {
        None => None,
        Some(rate) => {
            let mut cs = Vec::with_capacity(header.m);
            for j in 0..header.m {
                let entry = entries
                    .next()
                    .ok_or_else(|| format_err(format!("missing teacher.center.{j}")))?;
                if entry.name != format!("teacher.center.{j}") || entry.shape != [header.c] {
                    return Err(format_err(format!("unexpected tensor {}", entry.name)));
                }
                let mut c = CenterState::new(header.c, rate)
                    .map_err(|e| format_err(format!("invalid center rate: {e}")))?;
                c.center = read(entry)?.into_data();
                cs.push(c);
            }
            Some(cs)
        }
    };
    if let Some(extra) = entries.next() {
        return Err(format_err(format!("unexpected tensor {}", extra.name)));
    }
    if offset != bytes.len() {
        return Err(format_err(format!(
            "{} trailing bytes after tensors",
            bytes.len() - offset
        )));
    }
    Ok(Checkpoint {
        student,
        teacher: TeacherState {
            params: teacher_params,
            centers,
            momentum: header.teacher_momentum,
        },
        meta: CheckpointMeta {
            step: header.step,
            scheme: header.scheme,
            seeds: header.seeds,
        },
    })
}
