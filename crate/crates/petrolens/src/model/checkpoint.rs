//! Bit-exact model serialization.
//!
//! Checkpoint layout: magic "FLCK", version u32 LE, header length u32 LE +
//! UTF-8 JSON (spec, trainable mask, buffer names, normalization stats),
//! tensor count u32 LE, then per tensor: name length u32 + UTF-8 name,
//! ndim u32, dims as u64 LE, dtype code u8 (0 = f32), raw little-endian
//! element bytes. Parameters come first, then buffers, each sorted by
//! name, so save -> load -> save round-trips byte-identically.
//!
//! Named-tensor files ("FLNT") use the same per-tensor layout with no
//! header block; import accepts both.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::Normalization;
use crate::tensor::Tensor;

use super::{Model, ModelError, ModelSpec};

const CHECKPOINT_MAGIC: &[u8; 4] = b"FLCK";
const TENSORS_MAGIC: &[u8; 4] = b"FLNT";
const VERSION: u32 = 1;
const MAX_NAME: usize = 4096;
const MAX_NDIM: usize = 8;

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    spec: ModelSpec,
    trainable: BTreeMap<String, bool>,
    buffers: Vec<String>,
    norm: Option<Normalization>,
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    push_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    push_u32(out, t.ndim() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(0u8); // dtype: f32
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), ModelError> {
    let header = Header {
        spec: model.spec.clone(),
        trainable: model.trainable.clone(),
        buffers: model.buffers.keys().cloned().collect(),
        norm: model.norm,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| ModelError::Import(format!("header serialization failed: {e}")))?;

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, header_json.len() as u32);
    out.extend_from_slice(&header_json);
    push_u32(&mut out, (model.params.len() + model.buffers.len()) as u32);
    for (name, t) in &model.params {
        push_tensor(&mut out, name, t);
    }
    for (name, t) in &model.buffers {
        push_tensor(&mut out, name, t);
    }
    fs::write(path, out).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
}

/// Write only the named tensors (parameters then buffers), no header: the
/// interchange format for externally produced weights.
pub fn export_named_tensors(model: &Model, path: &Path) -> Result<(), ModelError> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSORS_MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, (model.params.len() + model.buffers.len()) as u32);
    for (name, t) in &model.params {
        push_tensor(&mut out, name, t);
    }
    for (name, t) in &model.buffers {
        push_tensor(&mut out, name, t);
    }
    fs::write(path, out).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Format {
                offset: self.pos,
                reason: format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8, ModelError> {
        Ok(self.take(1, what)?[0])
    }

    fn bad(&self, reason: String) -> ModelError {
        ModelError::Format { offset: self.pos, reason }
    }
}

fn read_tensor(c: &mut Cursor) -> Result<(String, Tensor), ModelError> {
    let name_len = c.u32("tensor name length")? as usize;
    if name_len == 0 || name_len > MAX_NAME {
        return Err(c.bad(format!("implausible tensor name length {name_len}")));
    }
    let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
        .map_err(|_| c.bad("tensor name is not UTF-8".into()))?
        .to_string();
    let ndim = c.u32("tensor rank")? as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(c.bad(format!("implausible tensor rank {ndim} for {name:?}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut numel = 1usize;
    for _ in 0..ndim {
        let d = c.u64("tensor dimension")? as usize;
        numel = numel.checked_mul(d).ok_or_else(|| {
            c.bad(format!("tensor {name:?} dimensions overflow"))
        })?;
        shape.push(d);
    }
    let dtype = c.u8("dtype code")?;
    if dtype != 0 {
        return Err(c.bad(format!("unknown dtype code {dtype} for {name:?}")));
    }
    let raw = c.take(numel * 4, "tensor elements")?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let t = Tensor::from_vec(shape, data).map_err(|e| c.bad(format!("tensor {name:?}: {e}")))?;
    Ok((name, t))
}

fn read_all_tensors(c: &mut Cursor) -> Result<BTreeMap<String, Tensor>, ModelError> {
    let count = c.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor(c)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(c.bad(format!("duplicate tensor name {name:?}")));
        }
    }
    if c.pos != c.buf.len() {
        return Err(c.bad(format!("{} trailing bytes after last tensor", c.buf.len() - c.pos)));
    }
    Ok(tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
    let buf = fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let magic = c.take(4, "magic bytes")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(ModelError::Format {
            offset: 4,
            reason: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let header_len = c.u32("header length")? as usize;
    let header_start = c.pos;
    let header: Header = serde_json::from_slice(c.take(header_len, "header")?)
        .map_err(|e| ModelError::Format {
            offset: header_start,
            reason: format!("header does not parse: {e}"),
        })?;
    let tensors = read_all_tensors(&mut c)?;

    // rebuild the skeleton from the spec, then overwrite every tensor;
    // any structural drift between file and spec is an error
    header.spec.validate()?;
    let mut model = Model::build(&header.spec, 0)?;
    model.norm = header.norm;
    let expected: Vec<(String, bool)> = model
        .params
        .keys()
        .map(|k| (k.clone(), false))
        .chain(header.buffers.iter().map(|k| (k.clone(), true)))
        .collect();
    if tensors.len() != expected.len() {
        return Err(ModelError::Format {
            offset: 0,
            reason: format!(
                "file holds {} tensors, spec implies {}",
                tensors.len(),
                expected.len()
            ),
        });
    }
    for (name, is_buffer) in expected {
        let t = tensors.get(&name).ok_or_else(|| ModelError::Format {
            offset: 0,
            reason: format!("missing tensor {name:?}"),
        })?;
        let slot = if is_buffer { model.buffers.get(&name) } else { model.params.get(&name) };
        let want_shape = slot
            .ok_or_else(|| ModelError::Format {
                offset: 0,
                reason: format!("tensor {name:?} is not part of this architecture"),
            })?
            .shape();
        if t.shape() != want_shape {
            return Err(ModelError::Format {
                offset: 0,
                reason: format!(
                    "tensor {name:?} has shape {:?}, spec implies {want_shape:?}",
                    t.shape()
                ),
            });
        }
        let flag = header.trainable.get(&name).copied().unwrap_or(false);
        if is_buffer {
            model.buffers.insert(name, t.clone());
        } else {
            model.params.insert(name.clone(), t.clone().requires_grad(flag));
        }
    }
    model.trainable = header.trainable;
    Ok(model)
}

/// Overwrite model tensors from a named-tensor or checkpoint file.
/// `name_map` maps model tensor names to file tensor names; tensors not
/// mentioned keep their current values.
pub fn import_named_tensors(
    path: &Path,
    model: &mut Model,
    name_map: &BTreeMap<String, String>,
) -> Result<(), ModelError> {
    let buf = fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic bytes")?.try_into().unwrap();
    if &magic != CHECKPOINT_MAGIC && &magic != TENSORS_MAGIC {
        return Err(ModelError::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?} or {TENSORS_MAGIC:?}"),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(ModelError::Format {
            offset: 4,
            reason: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    if &magic == CHECKPOINT_MAGIC {
        let header_len = c.u32("header length")? as usize;
        c.take(header_len, "header")?;
    }
    let tensors = read_all_tensors(&mut c)?;

    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    let mut staged: Vec<(String, Tensor, bool)> = Vec::new();
    for (model_name, file_name) in name_map {
        let (want_shape, is_buffer) = if let Some(t) = model.params.get(model_name) {
            (t.shape().to_vec(), false)
        } else if let Some(t) = model.buffers.get(model_name) {
            (t.shape().to_vec(), true)
        } else {
            return Err(ModelError::Import(format!(
                "model has no tensor named {model_name:?}"
            )));
        };
        let Some(t) = tensors.get(file_name) else {
            missing.push(file_name.clone());
            continue;
        };
        if t.shape() != want_shape {
            mismatched.push(format!(
                "{model_name:?} wants {want_shape:?}, file tensor {file_name:?} has {:?}",
                t.shape()
            ));
            continue;
        }
        staged.push((model_name.clone(), t.clone(), is_buffer));
    }
    if !missing.is_empty() {
        return Err(ModelError::Import(format!(
            "file lacks mapped tensors: {missing:?}"
        )));
    }
    if !mismatched.is_empty() {
        return Err(ModelError::Import(format!(
            "shape mismatches: {}",
            mismatched.join("; ")
        )));
    }
    for (name, t, is_buffer) in staged {
        if is_buffer {
            model.buffers.insert(name, t);
        } else {
            let flag = model.trainable.get(&name).copied().unwrap_or(true);
            model.params.insert(name, t.requires_grad(flag));
        }
    }
    Ok(())
}

/// Identity name map over every parameter and buffer: import a checkpoint
/// saved by this crate without renaming.
pub fn identity_name_map(model: &Model) -> BTreeMap<String, String> {
    model
        .params
        .keys()
        .chain(model.buffers.keys())
        .map(|k| (k.clone(), k.clone()))
        .collect()
}
