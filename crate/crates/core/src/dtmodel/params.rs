//! Named parameter tensors and the checkpoint file format.
//!
//! Checkpoint layout (little-endian):
//! `b"DTRLCKPT"`, `u32` version, `u32` kind length + kind bytes, `u32` config
//! length + config JSON bytes, `u32` tensor count, then per tensor: `u32` name
//! length + name bytes, `u64` rows, `u64` cols, `rows * cols` `f64` values.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::mat::Mat;
use super::tape::{Gradients, NodeId, Tape};
use crate::error::{Error, Result};
use crate::seed::Rng;

const MAGIC: &[u8; 8] = b"DTRLCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Mat>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
    }

    /// Normal init with standard deviation `std`.
    pub fn insert_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut Rng) {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| if std > 0.0 { dist.sample(rng) } else { 0.0 }).collect();
        self.insert(name, Mat::from_vec(rows, cols, data));
    }

    pub fn insert_const(&mut self, name: &str, rows: usize, cols: usize, value: f64) {
        self.insert(name, Mat::from_vec(rows, cols, vec![value; rows * cols]));
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> &Mat {
        let i = self.index_of(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        let i = self.index_of(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.tensors[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Input(format!("expected {} values, got {}", self.num_scalars(), flat.len())));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Put every tensor on the tape as a differentiable leaf.
    pub fn bind(&self, t: &mut Tape) -> Bound {
        Bound { ids: self.tensors.iter().map(|m| t.param(m.clone())).collect() }
    }

    /// Put every tensor on the tape as a constant.
    pub fn bind_const(&self, t: &mut Tape) -> Bound {
        Bound { ids: self.tensors.iter().map(|m| t.constant(m.clone())).collect() }
    }

    /// Gradients aligned with this parameter set, zeros where nothing flowed.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Mat> {
        bound.ids.iter().zip(&self.tensors).map(|(&id, m)| grads.take_or_zeros(id, m.shape())).collect()
    }

    /// `self = tau * other + (1 - tau) * self`, elementwise.
    pub fn polyak_from(&mut self, other: &ModelParams, tau: f64) {
        assert_eq!(self.names, other.names, "parameter layouts differ");
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x = tau * y + (1.0 - tau) * *x;
            }
        }
    }

    /// SHA-256 over names and raw value bytes.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape node ids for a bound [`ModelParams`], in insertion order.
#[derive(Debug, Clone)]
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    pub fn id(&self, params: &ModelParams, name: &str) -> NodeId {
        self.ids[params.index_of(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }
}

/// A serialized model: kind tag, config JSON and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_json: String,
    pub params: ModelParams,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len())?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.params.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.kind.as_bytes());
        put_bytes(&mut out, self.config_json.as_bytes());
        out.extend_from_slice(&(self.params.num_tensors() as u32).to_le_bytes());
        for (n, t) in self.params.names.iter().zip(&self.params.tensors) {
            put_bytes(&mut out, n.as_bytes());
            out.extend_from_slice(&(t.rows as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols as u64).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |msg: &str| Error::Format { path: path.to_path_buf(), msg: msg.to_string() };
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| err("truncated checkpoint"))? != MAGIC {
            return Err(err("not a checkpoint file"));
        }
        let truncated = || err("truncated checkpoint");
        let version = r.u32().ok_or_else(truncated)?;
        if version != VERSION {
            return Err(err(&format!("unsupported checkpoint version {version}")));
        }
        let kind = r.string().ok_or_else(truncated)?;
        let config_json = r.string().ok_or_else(truncated)?;
        let count = r.u32().ok_or_else(truncated)?;
        let mut params = ModelParams::new();
        for _ in 0..count {
            let name = r.string().ok_or_else(truncated)?;
            let rows = r.u64().ok_or_else(truncated)? as usize;
            let cols = r.u64().ok_or_else(truncated)? as usize;
            let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| err("tensor too large"))?;
            let raw = r.take(n).ok_or_else(truncated)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if params.index_of(&name).is_some() {
                return Err(err(&format!("duplicate tensor {name}")));
            }
            params.insert(name, Mat::from_vec(rows, cols, data));
        }
        if r.pos != bytes.len() {
            return Err(err("trailing bytes after checkpoint"));
        }
        Ok(Self { kind, config_json, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}
