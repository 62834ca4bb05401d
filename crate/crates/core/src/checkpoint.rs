//! Flat binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"NVCK"  u32 version  u64 entry_count
//! per entry: u32 name_len, name (UTF-8), u32 ndim, ndim × u64 dims, product(dims) × f64
//! ```
//!
//! Values are always stored as f64, whatever precision the run used.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{ParameterSet, Tensor};

const MAGIC: &[u8; 4] = b"NVCK";
pub const VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param.";
const STATE_PREFIX: &str = "state.";

pub fn write_entries<F: Real>(path: impl AsRef<Path>, entries: &[(String, Tensor<F>)]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn read_entries<F: Real>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<F>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_entries(&bytes)
}

pub fn parse_entries<F: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<F>)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = c.u64("entry count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let at = c.pos as u64;
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Parse {
                offset: at + 4,
                detail: "entry name is not UTF-8".into(),
            })?
            .to_string();
        let ndim = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64("dimension")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Parse {
            offset: at,
            detail: format!("shape {shape:?} of `{name}` overflows"),
        })?;
        let raw = c.take(n.checked_mul(8).unwrap_or(usize::MAX), "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| F::of(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Parse {
            offset: c.pos as u64,
            detail: "trailing bytes after the last entry".into(),
        });
    }
    Ok(out)
}

/// Writes the parameters (with their trainable flags dropped) and any optimizer state.
pub fn save<F: Real>(path: impl AsRef<Path>, params: &ParameterSet<F>, state: &[(String, Tensor<F>)]) -> Result<()> {
    let mut entries: Vec<(String, Tensor<F>)> =
        params.iter().map(|(n, t)| (format!("{PARAM_PREFIX}{n}"), t.clone())).collect();
    entries.extend(state.iter().map(|(n, t)| (format!("{STATE_PREFIX}{n}"), t.clone())));
    write_entries(path, &entries)
}

/// Parameters (all marked trainable) and optimizer state from a [`save`]d file.
pub fn load<F: Real>(path: impl AsRef<Path>) -> Result<(ParameterSet<F>, Vec<(String, Tensor<F>)>)> {
    let mut params = ParameterSet::new();
    let mut state = Vec::new();
    for (name, t) in read_entries::<F>(path)? {
        if let Some(n) = name.strip_prefix(PARAM_PREFIX) {
            params.push(n, t.with_requires_grad(true))?;
        } else if let Some(n) = name.strip_prefix(STATE_PREFIX) {
            state.push((n.to_string(), t));
        } else {
            return Err(Error::Parse {
                offset: 0,
                detail: format!("unexpected entry `{name}`"),
            });
        }
    }
    Ok((params, state))
}
