//! Binary checkpoints: `HFBCKPT\0`, a little-endian `u32` version, a `u32`
//! header length, a JSON header, then every entry's payload in header
//! order. Real tensors are little-endian floats of the header's dtype.
//! Ternary matrices are a scale followed by 2-bit codes packed four per
//! byte, row-major, lowest bits first: `00` = 0, `01` = +1, `10` = -1.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::{ArchSpec, Network, QuantPlan};
use crate::scalar::Scalar;
use crate::spn::{Lifecycle, StateRef, StateValue, TernaryMatrix};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HFBCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum EntryMeta {
    Real {
        name: String,
        shape: Vec<usize>,
    },
    Ternary {
        name: String,
        rows: usize,
        cols: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    arch: ArchSpec,
    plan: QuantPlan,
    lifecycle: Lifecycle,
    training: Option<serde_json::Value>,
    entries: Vec<EntryMeta>,
}

/// In-memory checkpoint. Network tensors live under `net/`; other
/// prefixes are free for training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub arch: ArchSpec,
    pub plan: QuantPlan,
    pub lifecycle: Lifecycle,
    pub training: Option<serde_json::Value>,
    pub entries: Vec<(String, StateValue<T>)>,
}

pub(crate) fn owned<T: Scalar>(r: StateRef<'_, T>) -> StateValue<T> {
    match r {
        StateRef::Real(t) => StateValue::Real(t.clone()),
        StateRef::Ternary(m) => StateValue::Ternary(m.clone()),
    }
}

fn dtype_of<T: Scalar>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_network(net: &Network<T>) -> Self {
        let mut ck = Self {
            arch: net.spec().clone(),
            plan: *net.plan(),
            lifecycle: net.lifecycle(),
            training: None,
            entries: Vec::new(),
        };
        ck.push_network("net/", net);
        ck
    }

    /// Appends every tensor of `net` under `prefix`.
    pub fn push_network(&mut self, prefix: &str, net: &Network<T>) {
        for (name, r) in net.state_entries() {
            self.entries.push((format!("{prefix}{name}"), owned(r)));
        }
    }

    /// Rebuilds the network stored under `prefix` with the given lifecycle.
    pub fn network_at(&self, prefix: &str, lifecycle: Lifecycle) -> Result<Network<T>> {
        let mut map: BTreeMap<&str, &StateValue<T>> = self
            .entries
            .iter()
            .filter_map(|(n, v)| n.strip_prefix(prefix).map(|s| (s, v)))
            .collect();
        let mut net = Network::new(&self.arch, &self.plan, 0)?;
        net.load_state(lifecycle, &mut |name: &str| {
            map.remove(name)
                .cloned()
                .ok_or_else(|| Error::Malformed(format!("checkpoint lacks entry '{prefix}{name}'")))
        })?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::Malformed(format!(
                "checkpoint has unexpected entry '{prefix}{extra}'"
            )));
        }
        Ok(net)
    }

    pub fn network(&self) -> Result<Network<T>> {
        self.network_at("net/", self.lifecycle)
    }

    pub fn get(&self, name: &str) -> Option<&StateValue<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            dtype: dtype_of::<T>().into(),
            arch: self.arch.clone(),
            plan: self.plan,
            lifecycle: self.lifecycle,
            training: self.training.clone(),
            entries: self
                .entries
                .iter()
                .map(|(name, v)| match v {
                    StateValue::Real(t) => EntryMeta::Real {
                        name: name.clone(),
                        shape: t.shape().to_vec(),
                    },
                    StateValue::Ternary(m) => EntryMeta::Ternary {
                        name: name.clone(),
                        rows: m.rows(),
                        cols: m.cols(),
                    },
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in &self.entries {
            match v {
                StateValue::Real(t) => t.data().iter().for_each(|&x| put_float(&mut out, x)),
                StateValue::Ternary(m) => {
                    put_float(&mut out, m.scale());
                    out.extend(pack_ternary(m.entries()));
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Malformed("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        if header.dtype != dtype_of::<T>() {
            return Err(Error::Malformed(format!(
                "checkpoint holds {} values, expected {}",
                header.dtype,
                dtype_of::<T>()
            )));
        }
        let mut entries = Vec::with_capacity(header.entries.len());
        for meta in header.entries {
            match meta {
                EntryMeta::Real { name, shape } => {
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| r.float::<T>()).collect::<Result<Vec<T>>>()?;
                    entries.push((name, StateValue::Real(Tensor::from_vec(shape, data)?)));
                }
                EntryMeta::Ternary { name, rows, cols } => {
                    let scale = r.float::<T>()?;
                    let codes = r.take((rows * cols).div_ceil(4))?;
                    let m =
                        TernaryMatrix::new(rows, cols, unpack_ternary(codes, rows * cols)?, scale)?;
                    entries.push((name, StateValue::Ternary(m)));
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            arch: header.arch,
            plan: header.plan,
            lifecycle: header.lifecycle,
            training: header.training,
            entries,
        })
    }
}

fn put_float<T: Scalar>(out: &mut Vec<u8>, x: T) {
    if std::mem::size_of::<T>() == 4 {
        out.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
    } else {
        out.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
    }
}

/// Packs ternary entries four per byte.
pub fn pack_ternary(entries: &[i8]) -> Vec<u8> {
    let mut out = vec![0u8; entries.len().div_ceil(4)];
    for (i, &e) in entries.iter().enumerate() {
        let code = match e {
            0 => 0b00,
            1 => 0b01,
            _ => 0b10,
        };
        out[i / 4] |= code << (2 * (i % 4));
    }
    out
}

/// Decodes `n` entries; code `11` is rejected.
pub fn unpack_ternary(bytes: &[u8], n: usize) -> Result<Vec<i8>> {
    if bytes.len() < n.div_ceil(4) {
        return Err(Error::Truncated(format!(
            "{n} ternary codes need {} bytes",
            n.div_ceil(4)
        )));
    }
    (0..n)
        .map(|i| match (bytes[i / 4] >> (2 * (i % 4))) & 0b11 {
            0b00 => Ok(0),
            0b01 => Ok(1),
            0b10 => Ok(-1),
            c => Err(Error::TernaryCode(c)),
        })
        .collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.saturating_add(n);
        if end > self.bytes.len() {
            return Err(Error::Truncated(format!(
                "need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn float<T: Scalar>(&mut self) -> Result<T> {
        if std::mem::size_of::<T>() == 4 {
            Ok(T::of(
                f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64,
            ))
        } else {
            Ok(T::of(f64::from_le_bytes(
                self.take(8)?.try_into().expect("8 bytes"),
            )))
        }
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    std::fs::write(path, ck.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
