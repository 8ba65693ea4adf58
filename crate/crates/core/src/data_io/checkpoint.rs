//! Binary checkpoint bundles.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, JSON header,
//! u64 payload length (in values), then little-endian f64 payload. All
//! integers are little-endian.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::{Adam, AdamConfig};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"EDCKPT\0\0";

pub type OptimizerState = Adam;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle {
    /// Parameter groups by name; each keeps its own frozen flag.
    pub groups: BTreeMap<String, ParamStore>,
    pub optimizer: OptimizerState,
    pub config: serde_json::Value,
    pub step: u64,
}

impl CheckpointBundle {
    pub fn group(&self, name: &str) -> Result<&ParamStore> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::Shape(format!("checkpoint has no `{name}` group")))
    }

    /// Checks names and shapes of every group in `expected`.
    pub fn check_layout(&self, expected: &BTreeMap<String, ParamStore>) -> Result<()> {
        for (name, store) in expected {
            store.check_layout(self.group(name)?, name)?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Span {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct GroupHeader {
    name: String,
    frozen: bool,
    params: Vec<Span>,
}

#[derive(Serialize, Deserialize)]
struct OptHeader {
    cfg: AdamConfig,
    step: u64,
    /// Each span holds the first moment followed by the second.
    moments: Vec<Span>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    groups: Vec<GroupHeader>,
    optimizer: OptHeader,
    config: serde_json::Value,
    step: u64,
}

fn encode(b: &CheckpointBundle) -> Result<Vec<u8>> {
    let mut payload: Vec<f64> = Vec::new();
    let mut span = |name: &str, shape: Vec<usize>, parts: &[&[f64]]| {
        let offset = payload.len() as u64;
        for p in parts {
            payload.extend_from_slice(p);
        }
        Span {
            name: name.to_string(),
            shape,
            offset,
            len: payload.len() as u64 - offset,
        }
    };
    let mut groups = Vec::new();
    for (g, store) in &b.groups {
        let params = store
            .iter()
            .map(|(n, p)| span(n, p.shape.clone(), &[&p.data]))
            .collect();
        groups.push(GroupHeader {
            name: g.clone(),
            frozen: store.is_frozen(),
            params,
        });
    }
    let moments = b
        .optimizer
        .moments
        .iter()
        .map(|(k, (m, v))| span(k, vec![2, m.len()], &[m, v]))
        .collect();
    let header = Header {
        groups,
        optimizer: OptHeader {
            cfg: b.optimizer.cfg,
            step: b.optimizer.step,
            moments,
        },
        config: b.config.clone(),
        step: b.step,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(28 + json.len() + payload.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Writes atomically: a temporary file in the same directory is renamed
/// into place.
pub fn save_checkpoint(bundle: &CheckpointBundle, path: &Path) -> Result<()> {
    let bytes = encode(bundle)?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: u64) -> Result<&'a [u8]> {
        let have = (self.bytes.len() - self.pos) as u64;
        if n > have {
            return Err(Error::Truncated {
                expected: self.pos as u64 + n,
                found: self.bytes.len() as u64,
            });
        }
        let s: &'a [u8] = &self.bytes[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn slice<'a>(payload: &'a [f64], s: &Span) -> Result<&'a [f64]> {
    let end = s.offset.checked_add(s.len).filter(|e| *e <= payload.len() as u64);
    match end {
        Some(end) => Ok(&payload[s.offset as usize..end as usize]),
        None => Err(Error::Format(format!("`{}` points past the payload", s.name))),
    }
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointBundle> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = r.u64()?;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Format(format!("header: {e}")))?;
    let n = r.u64()?;
    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("payload length overflows".into()))?)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let payload: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut groups = BTreeMap::new();
    for g in header.groups {
        let mut store = ParamStore::new();
        for p in &g.params {
            let data = slice(&payload, p)?;
            if p.shape.iter().product::<usize>() != data.len() {
                return Err(Error::Shape(format!(
                    "{}: parameter `{}` has shape {:?} but {} values",
                    g.name,
                    p.name,
                    p.shape,
                    data.len()
                )));
            }
            if store.get(&p.name).is_some() {
                return Err(Error::Format(format!("{}: duplicate parameter `{}`", g.name, p.name)));
            }
            store.insert(&p.name, &p.shape, data.to_vec());
        }
        store.set_frozen(g.frozen);
        if groups.insert(g.name.clone(), store).is_some() {
            return Err(Error::Format(format!("duplicate group `{}`", g.name)));
        }
    }
    let mut moments = BTreeMap::new();
    for m in &header.optimizer.moments {
        let data = slice(&payload, m)?;
        if data.len() % 2 != 0 || m.shape != [2, data.len() / 2] {
            return Err(Error::Shape(format!("optimizer moment `{}` is malformed", m.name)));
        }
        let (a, b) = data.split_at(data.len() / 2);
        moments.insert(m.name.clone(), (a.to_vec(), b.to_vec()));
    }
    Ok(CheckpointBundle {
        groups,
        optimizer: Adam {
            cfg: header.optimizer.cfg,
            step: header.optimizer.step,
            moments,
        },
        config: header.config,
        step: header.step,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
