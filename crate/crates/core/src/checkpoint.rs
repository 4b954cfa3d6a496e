//! Binary weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PCMW"  u32 version  u32 count
//! count × { u32 name_len, name (UTF-8), u32 ndim, ndim × u64 dim, numel × f64 }
//! ```

use std::path::Path;

use pcm_autodiff::{ParamStore, Tensor};

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"PCMW";
const VERSION: u32 = 1;

/// Named tensors, in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Checkpoint { tensors: store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect() }
    }

    /// Copies values into a store whose names and shapes match exactly.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        for entry in store.entries_mut() {
            let t = self.get(&entry.name)?;
            if t.shape() != entry.value.shape() {
                return Err(Error::Data(format!(
                    "checkpoint tensor `{}` has shape {:?}, model expects {:?}",
                    entry.name,
                    t.shape(),
                    entry.value.shape()
                )));
            }
            entry.value = t.clone();
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Data(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn push_meta(&mut self, name: &str, value: f64) {
        self.tensors.push((format!("meta.{name}"), Tensor::scalar(value)));
    }

    pub fn meta(&self, name: &str) -> Result<f64> {
        Ok(self.get(&format!("meta.{name}"))?.item())
    }

    pub fn meta_usize(&self, name: &str) -> Result<usize> {
        let v = self.meta(name)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Data(format!("checkpoint meta `{name}` = {v} is not a count")));
        }
        Ok(v as usize)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.err(0, "bad magic; not a weight file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.err(4, &format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| r.err(at as u64, "name is not UTF-8"))?.to_string();
            let ndim = r.u32("rank")? as usize;
            if ndim > 8 {
                return Err(r.err(r.pos as u64 - 4, &format!("rank {ndim} too large")));
            }
            let mut dims = Vec::with_capacity(ndim);
            let mut numel: usize = 1;
            for _ in 0..ndim {
                let at = r.pos;
                let d = usize::try_from(r.u64("dim")?).map_err(|_| r.err(at as u64, "dimension overflow"))?;
                numel = numel.checked_mul(d).ok_or_else(|| r.err(at as u64, "dimension overflow"))?;
                dims.push(d);
            }
            let at = r.pos;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.err(at as u64, "payload overflow"))?, "values")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(&dims, data).map_err(|e| r.err(at as u64, &e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos as u64, &format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: u64, detail: &str) -> Error {
        Error::Format { what: "weight file", offset, detail: detail.to_string() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
                self.err(self.pos as u64, &format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
