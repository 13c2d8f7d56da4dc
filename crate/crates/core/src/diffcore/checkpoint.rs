//! `STW1` checkpoint files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "STW1"            4-byte magic
//! count: u32        number of records
//! per record:
//!   name_len: u32, name: utf-8 bytes
//!   ndim: u32, dims: ndim × u64
//!   values: prod(dims) × f32
//! ```

use std::fs;
use std::path::Path;

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"STW1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn encode_checkpoint<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.path,
                format!(
                    "truncated at byte {} reading {what}: need {n} bytes, {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<CheckpointRecord>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::parse(path, "bad magic at byte 0, expected \"STW1\""));
    }
    let count = r.u32("record count")?;
    let mut records = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::parse(path, format!("invalid utf-8 name at byte {at}")))?
            .to_string();
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::parse(path, format!("shape overflow for `{name}`")))?;
        let at = r.pos;
        let raw = r.take(numel.saturating_mul(4), "values")?;
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::parse(path, format!("non-finite value in `{name}` at byte {}", at + 4 * k)));
        }
        records.push(CheckpointRecord { name, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(path, format!("{} trailing bytes after last record", bytes.len() - r.pos)));
    }
    Ok(records)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<CheckpointRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

impl<T: Real> ParamStore<T> {
    /// Overwrites parameter values from checkpoint records; every parameter must be present.
    pub fn load_records(&mut self, records: &[CheckpointRecord]) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = self.iter().map(|(_, p)| (p.name.clone(), p.tensor.shape().to_vec())).collect();
        for (name, shape) in names {
            let rec = records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter `{name}`")))?;
            if rec.shape != shape {
                return Err(Error::Shape {
                    op: "load_records",
                    lhs: shape,
                    rhs: rec.shape.clone(),
                });
            }
            let id = self.id(&name).expect("name from store");
            let t = Tensor::new(&shape, rec.values.iter().map(|&v| T::lit(v as f64)).collect())?;
            self.get_mut(id).tensor = t.with_requires_grad();
        }
        Ok(())
    }
}
