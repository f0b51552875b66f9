//! Named parameters with gradient accumulators, Adam moments, and a
//! little-endian named-tensor checkpoint format.

use super::{DiffError, Result, Tensor};
use rand::Rng;
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const CKPT_MAGIC: &[u8; 4] = b"XNAV";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in +-sqrt(6 / (fan_in + fan_out)).
    XavierUniform,
    Zeros,
    Ones,
}

#[derive(Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Parameters of one network, addressed by name. Single-writer: gradient
/// accumulation and optimizer steps require exclusive access; clones are
/// independent snapshots.
#[derive(Clone)]
pub struct ParamStore {
    names: BTreeMap<String, usize>,
    entries: Vec<Entry>,
    step: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: BTreeMap::new(), entries: Vec::new(), step: 0 }
    }

    /// Registers a parameter. Weight matrices are `[fan_in, fan_out]`;
    /// convolution kernels are `[C_out, C_in, kh, kw]`.
    pub fn add_param(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<()> {
        assert!(
            !self.names.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let count: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; count],
            Init::Ones => vec![1.0; count],
            Init::XavierUniform => {
                let (fan_in, fan_out) = match shape {
                    [n] => (*n, *n),
                    [i, o] => (*i, *o),
                    [co, ci, kh, kw] => (ci * kh * kw, co * kh * kw),
                    _ => (count, count),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..count).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        let idx = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            value: Tensor::from_vec(shape, data),
            grad: Tensor::zeros(shape),
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        });
        self.names.insert(name.to_string(), idx);
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::UnknownParam { name: name.to_string() })
    }

    pub(crate) fn value_at(&self, idx: usize) -> &Tensor {
        &self.entries[idx].value
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(self.value_at(self.index_of(name)?))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entries[self.index_of(name)?].grad)
    }

    pub(crate) fn accumulate_grad(&mut self, idx: usize, g: &[f64]) {
        for (slot, gv) in self.entries[idx].grad.data_mut().iter_mut().zip(g) {
            *slot += gv;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Gradient-step counter: one increment per [`ParamStore::adam_step`].
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(|s| s.as_str())
    }

    /// FNV-1a digest over the exact parameter bytes; changes iff any
    /// parameter bit changes. Used to assert freeze points.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for name in self.names.keys() {
            let e = &self.entries[self.names[name]];
            for byte in name.as_bytes() {
                h = (h ^ *byte as u64).wrapping_mul(0x100000001b3);
            }
            for v in e.value.data() {
                for byte in v.to_le_bytes() {
                    h = (h ^ byte as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// One Adam update from the accumulated gradients, then zeroes them and
    /// increments the step counter.
    pub fn adam_step(&mut self, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for e in &mut self.entries {
            let g = e.grad.data_mut();
            let m = e.m.data_mut();
            let v = e.v.data_mut();
            let p = e.value.data_mut();
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                g[i] = 0.0;
            }
        }
    }

    /// Overwrites one parameter element (finite-difference probes).
    pub fn set_elem(&mut self, name: &str, elem: usize, v: f64) -> Result<()> {
        let idx = self.index_of(name)?;
        self.entries[idx].value.data_mut()[elem] = v;
        Ok(())
    }

    /// Replaces parameter values from checkpoint tensors under
    /// `prefix/name` keys. Every parameter must be present with its shape.
    pub fn load_values(&mut self, ckpt: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for e in &mut self.entries {
            let key = format!("{prefix}/{}", e.name);
            let t = ckpt
                .get(&key)
                .ok_or_else(|| DiffError::UnknownParam { name: key.clone() })?;
            if t.shape() != e.value.shape() {
                return Err(DiffError::ParamShapeMismatch {
                    name: key,
                    expected: e.value.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
            e.value = t.clone();
        }
        Ok(())
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Writes stores as one named-tensor container. Each parameter is stored
/// under `<section>/<param name>`, sorted by name, as raw little-endian f64.
pub fn save_checkpoint(path: &Path, sections: &[(&str, &ParamStore)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CKPT_MAGIC)?;
    write_u32(&mut w, CKPT_VERSION)?;
    let total: u64 = sections.iter().map(|(_, s)| s.entries.len() as u64).sum();
    write_u64(&mut w, total)?;
    for (section, store) in sections {
        for name in store.names.keys() {
            let e = &store.entries[store.names[name]];
            let full = format!("{section}/{name}");
            write_u32(&mut w, full.len() as u32)?;
            w.write_all(full.as_bytes())?;
            write_u32(&mut w, e.value.shape().len() as u32)?;
            for &d in e.value.shape() {
                write_u64(&mut w, d as u64)?;
            }
            for v in e.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back into name -> tensor form.
pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(DiffError::CheckpointFormat(format!(
            "bad magic {magic:?}, expected {CKPT_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(DiffError::CheckpointFormat(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u64(&mut r)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(DiffError::CheckpointFormat(format!(
                "implausible name length {name_len}"
            )));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| DiffError::CheckpointFormat(e.to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        if ndim > 8 {
            return Err(DiffError::CheckpointFormat(format!(
                "implausible rank {ndim} for {name:?}"
            )));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        if len > 100_000_000 {
            return Err(DiffError::CheckpointFormat(format!(
                "implausible size {len} for {name:?}"
            )));
        }
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.insert(name, Tensor::from_vec(&shape, data));
    }
    Ok(out)
}
