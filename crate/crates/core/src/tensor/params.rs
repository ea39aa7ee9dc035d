//! Named parameters, ADAM state and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "GFLA"  u32 version  u32 count
//! count × {
//!     u32 path_len, path (UTF-8)
//!     u8  dtype tag (0 = f32, 1 = f64; bit 7 set for non-trainable buffers)
//!     u32 rank, rank × u32 dims
//!     values, first moments, second moments (raw little-endian floats)
//!     u64 adam step
//! }
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Gradients, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GFLA";
pub const CHECKPOINT_VERSION: u32 = 1;
const BUFFER_FLAG: u8 = 0x80;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
    /// Buffers (e.g. power-iteration vectors) are stored but never updated
    /// by the optimizer.
    pub trainable: bool,
}

impl<T: Real> ParamEntry<T> {
    fn new(value: Tensor<T>, trainable: bool) -> Self {
        let zeros = Tensor::zeros(value.shape());
        ParamEntry {
            m: zeros.clone(),
            v: zeros,
            value,
            step: 0,
            trainable,
        }
    }
}

/// Parameters keyed by path, iterated in sorted order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(path.into(), ParamEntry::new(value, true));
    }

    pub fn insert_buffer(&mut self, path: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(path.into(), ParamEntry::new(value, false));
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(path)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn entry(&self, path: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(path)
    }

    /// Overwrite a value, keeping its optimizer state.
    pub fn set(&mut self, path: &str, value: Tensor<T>) -> Result<()> {
        let e = self
            .entries
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))?;
        value.expect_shape("ParamStore::set", e.value.shape())?;
        e.value = value;
        Ok(())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Move every entry of `other` in under `prefix`, optimizer state included.
    pub fn absorb(&mut self, prefix: &str, other: &ParamStore<T>) {
        for (k, e) in &other.entries {
            self.entries.insert(format!("{prefix}{k}"), e.clone());
        }
    }

    /// Entries whose path starts with `prefix`, with the prefix removed.
    pub fn extract(&self, prefix: &str) -> ParamStore<T> {
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, e)| k.strip_prefix(prefix).map(|s| (s.to_string(), e.clone())))
            .collect();
        ParamStore { entries }
    }

    /// Error unless both stores have the same paths, shapes and kinds.
    pub fn check_layout(&self, expected: &ParamStore<T>) -> Result<()> {
        for (k, e) in &expected.entries {
            let got = self.entries.get(k).ok_or_else(|| Error::UnknownParam(k.clone()))?;
            if got.value.shape() != e.value.shape() || got.trainable != e.trainable {
                return Err(Error::Config(format!(
                    "parameter {k}: checkpoint has shape {:?}, config expects {:?}",
                    got.value.shape(),
                    e.value.shape()
                )));
            }
        }
        if let Some(extra) = self.entries.keys().find(|k| !expected.entries.contains_key(*k)) {
            return Err(Error::Config(format!("checkpoint has unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|e| e.value.all_finite() && e.m.all_finite() && e.v.all_finite())
    }

    /// Put every parameter on `tape`; trainable ones as tracked leaves.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Binding<'t, T> {
        let vars = self
            .entries
            .iter()
            .map(|(k, e)| {
                let var = if e.trainable {
                    tape.leaf(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Binding { vars }
    }

    /// Same as [`bind`](Self::bind) but nothing is tracked.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Binding<'t, T> {
        let vars = self
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), tape.constant(e.value.clone())))
            .collect();
        Binding { vars }
    }

    /// One bias-corrected ADAM update of every trainable parameter.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor<T>>, cfg: &AdamConfig) -> Result<()> {
        for (path, e) in &self.entries {
            if !e.trainable {
                continue;
            }
            let g = grads.get(path).ok_or_else(|| Error::MissingGrad(path.clone()))?;
            g.expect_shape("adam_step", e.value.shape())?;
        }
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
        for (path, e) in self.entries.iter_mut() {
            if !e.trainable {
                continue;
            }
            let g = &grads[path];
            e.step += 1;
            let t = e.step as i32;
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            let m = e.m.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g.data()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
            }
            let v = e.v.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g.data()) {
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            }
            let (m, v) = (e.m.data().to_vec(), e.v.data().to_vec());
            for ((p, mi), vi) in e.value.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mi / c1;
                let vhat = vi / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (path, e) in &self.entries {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            let flag = if e.trainable { 0 } else { BUFFER_FLAG };
            out.push(T::DTYPE.tag() | flag);
            out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for t in [&e.value, &e.m, &e.v] {
                for &x in t.data() {
                    x.write_le(&mut out);
                }
            }
            out.extend_from_slice(&e.step.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin,
        };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "bad magic, expected GFLA"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(origin, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let path = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(origin, "parameter path is not UTF-8"))?
                .to_string();
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag & !BUFFER_FLAG)
                .ok_or_else(|| Error::format(origin, format!("unknown dtype tag {tag}")))?;
            if dtype != T::DTYPE {
                return Err(Error::format(
                    origin,
                    format!("`{path}` stored as {dtype:?}, loading as {:?}", T::DTYPE),
                ));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut read_tensor = || -> Result<Tensor<T>> {
                let raw = r.take(numel * dtype.size())?;
                let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
                Tensor::new(&shape, data)
            };
            let value = read_tensor()?;
            let m = read_tensor()?;
            let v = read_tensor()?;
            let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
            entries.insert(
                path,
                ParamEntry {
                    value,
                    m,
                    v,
                    step,
                    trainable: tag & BUFFER_FLAG == 0,
                },
            );
        }
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after last entry"));
        }
        Ok(ParamStore { entries })
    }

    /// Write a checkpoint; refuses to persist non-finite state.
    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.all_finite() {
            return Err(Error::NonFinite(format!("checkpoint {}", path.display())));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.origin, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parameters placed on one tape.
pub struct Binding<'t, T> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T> FromIterator<(String, Var<'t, T>)> for Binding<'t, T> {
    fn from_iter<I: IntoIterator<Item = (String, Var<'t, T>)>>(iter: I) -> Self {
        Binding { vars: iter.into_iter().collect() }
    }
}

impl<'t, T: Real> Binding<'t, T> {
    pub fn get(&self, path: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    /// Gradients keyed by parameter path (tracked parameters only).
    pub fn grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter(|(_, v)| v.is_tracked())
            .map(|(k, &v)| (k.clone(), grads.wrt(v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0));
        s.insert("a.bias", Tensor::zeros(&[2]));
        s.insert_buffer("a.u", Tensor::ones(&[2]));
        s
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut s = store();
        let before = s.clone();
        let grads = s
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.to_string(), Tensor::zeros(e.value.shape())))
            .collect();
        s.adam_step(&grads, &AdamConfig::default()).unwrap();
        for (k, e) in s.iter() {
            assert_eq!(e.value, before.entry(k).unwrap().value);
            assert_eq!(e.step, if e.trainable { 1 } else { 0 });
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        s.insert("x", Tensor::scalar(0.0));
        let grads = BTreeMap::from([("x".to_string(), Tensor::scalar(1.0))]);
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        s.adam_step(&grads, &cfg).unwrap();
        // mhat = 1, vhat = 1, step = lr / (1 + eps)
        let moved = s.get("x").unwrap().item();
        assert!((moved + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "{moved}");
    }

    #[test]
    fn missing_gradient_names_path() {
        let mut s = store();
        let grads = BTreeMap::from([("a.weight".to_string(), Tensor::zeros(&[2, 3]))]);
        let err = s.adam_step(&grads, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(p) if p == "a.bias"));
    }

    #[test]
    fn bytes_roundtrip_is_exact() {
        let s = store();
        let back = ParamStore::<f32>::from_bytes(&s.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, s);
        assert!(ParamStore::<f64>::from_bytes(&s.to_bytes(), Path::new("mem")).is_err());
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let mut bytes = store().to_bytes();
        bytes[0] = b'X';
        assert!(ParamStore::<f32>::from_bytes(&bytes, Path::new("mem")).is_err());
        let bytes = store().to_bytes();
        assert!(ParamStore::<f32>::from_bytes(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
    }
}
