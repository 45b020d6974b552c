//! Binary checkpoint format.
//!
//! ```text
//! "PNCKPT1"                      7 bytes
//! step                           u64 LE
//! entry count                    u32 LE
//! entries:
//!   name length, name (UTF-8)    u32 LE, bytes
//!   rank, dims                   u32 LE, u64 LE * rank
//!   data                         f32 LE * prod(dims)
//! ```
//!
//! Parameters come first in store order, followed by Adam first moments
//! (`adam.m/<name>`) and second moments (`adam.v/<name>`) when present.

use std::io::{Read, Write};
use std::path::Path;

use crate::{AdamConfig, AdamState, Error, ParamId, ParamStore, Result, Tensor};

pub const MAGIC: &[u8; 7] = b"PNCKPT1";
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
}

fn write_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        let moments = self.adam.as_ref().map_or(0, |_| 2 * self.params.len());
        out.extend_from_slice(&((self.params.len() + moments) as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            write_entry(&mut out, name, t.shape(), t.data());
        }
        if let Some(adam) = &self.adam {
            for (prefix, moments) in [(M_PREFIX, &adam.m), (V_PREFIX, &adam.v)] {
                for ((_, name, t), m) in self.params.iter().zip(moments) {
                    write_entry(&mut out, &format!("{prefix}{name}"), t.shape(), m);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], adam_config: AdamConfig) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint(format!("non-UTF-8 name at byte {}", r.pos)))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("entry too large".into()))?)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                m.push((p.to_string(), data));
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                v.push((p.to_string(), data));
            } else {
                params.insert(name, Tensor::new(shape, data)?)?;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let adam = if m.is_empty() && v.is_empty() {
            None
        } else {
            let order = |list: Vec<(String, Vec<f32>)>, kind: &str| -> Result<Vec<Vec<f32>>> {
                if list.len() != params.len() {
                    return Err(Error::Checkpoint(format!("{} {kind} moments for {} params", list.len(), params.len())));
                }
                list.into_iter()
                    .enumerate()
                    .map(|(i, (name, data))| {
                        if name != params.name(ParamId(i)) || data.len() != params.get(ParamId(i)).len() {
                            Err(Error::Checkpoint(format!("{kind} moment '{name}' does not match parameter {i}")))
                        } else {
                            Ok(data)
                        }
                    })
                    .collect()
            };
            Some(AdamState { config: adam_config, step, m: order(m, "first")?, v: order(v, "second")? })
        };
        Ok(Checkpoint { step, params, adam })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, adam_config: AdamConfig) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, adam_config)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
