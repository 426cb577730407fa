//! Flat binary container of named `f64` tensors.
//!
//! Layout (all integers little-endian):
//!
//! | field        | type            |
//! |--------------|-----------------|
//! | magic        | `b"IMSNAP"`     |
//! | version      | `u32` (= 1)     |
//! | tensor count | `u32`           |
//!
//! followed by one record per tensor:
//!
//! | field    | type                     |
//! |----------|--------------------------|
//! | name len | `u32`                    |
//! | name     | UTF-8 bytes              |
//! | rows     | `u64`                    |
//! | cols     | `u64`                    |
//! | data     | `rows * cols` `f64` (LE) |
//!
//! Values are stored as raw IEEE-754 bits, so a save/load cycle is bitwise
//! exact.

use std::path::Path;

use crate::concept::{ConceptConfig, ConceptFilterParams};
use crate::error::{Error, Result};
use crate::fusion::{BlockParams, FusionParams};
use crate::numerics::RealMatrix;
use crate::ssm::SsmParams;

pub const MAGIC: &[u8; 6] = b"IMSNAP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Snapshot {
    tensors: Vec<(String, RealMatrix)>,
}

impl Snapshot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: RealMatrix) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&RealMatrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&RealMatrix> {
        self.get(name).ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not a snapshot (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported snapshot version {version}")));
        }
        let count = cur.u32()? as usize;
        let mut snap = Snapshot::new();
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            let rows = cur.u64()? as usize;
            let cols = cur.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::Format(format!("tensor {name:?} has an impossible shape")))?;
            let data = (0..n).map(|_| cur.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            let m = RealMatrix::new(rows, cols, data).map_err(|e| Error::Format(format!("tensor {name:?}: {e}")))?;
            snap.insert(name, m)?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(snap)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("snapshot truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn scalar_row(values: &[f64]) -> RealMatrix {
    RealMatrix::row_vector(values)
}

impl BlockParams {
    /// Writes every tensor of the block under `prefix`.
    pub fn export(&self, prefix: &str, snap: &mut Snapshot) -> Result<()> {
        let s = &self.ssm;
        let f = &self.filter;
        let c = &f.config;
        let entries = [
            ("ssm.lambda", scalar_row(&s.lambda)),
            ("ssm.b", s.b.clone()),
            ("ssm.c", s.c.clone()),
            ("ssm.gate_w", scalar_row(&s.gate_w)),
            ("ssm.gate_b", scalar_row(&[s.gate_b])),
            ("ssm.stability", scalar_row(&[s.stability_bound, f64::from(u8::from(s.enforce_stability))])),
            (
                "filter.config",
                scalar_row(&[
                    c.d as f64,
                    c.d_c as f64,
                    c.k_max as f64,
                    c.b_hash as f64,
                    c.tau_assign,
                    c.tau_h,
                    c.q_min as f64,
                    c.q_max as f64,
                ]),
            ),
            ("filter.u", f.u.clone()),
            ("filter.w_r", f.w_r.clone()),
            ("filter.w_q", f.w_q.clone()),
            ("filter.w_k", f.w_k.clone()),
            ("filter.w_v", f.w_v.clone()),
            ("filter.w_u", f.w_u.clone()),
            ("filter.hash_w", f.hash_w.clone()),
            ("filter.hash_b", f.hash_b.clone()),
            ("filter.e_b", f.e_b.clone()),
            ("fusion.p", self.fusion.p.clone()),
            ("fusion.f", self.fusion.f.clone()),
        ];
        for (name, m) in entries {
            snap.insert(format!("{prefix}{name}"), m)?;
        }
        Ok(())
    }

    pub fn import(prefix: &str, snap: &Snapshot) -> Result<Self> {
        let get = |name: &str| snap.require(&format!("{prefix}{name}")).cloned();
        let row = |name: &str| get(name).map(RealMatrix::into_data);
        let cfg = row("filter.config")?;
        if cfg.len() != 8 {
            return Err(Error::Format("filter.config must hold 8 values".into()));
        }
        let count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("expected a count, got {v}")))
            }
        };
        let config = ConceptConfig {
            d: count(cfg[0])?,
            d_c: count(cfg[1])?,
            k_max: count(cfg[2])?,
            b_hash: count(cfg[3])?,
            tau_assign: cfg[4],
            tau_h: cfg[5],
            q_min: count(cfg[6])?,
            q_max: count(cfg[7])?,
        };
        let stability = row("ssm.stability")?;
        let gate_b = row("ssm.gate_b")?;
        if stability.len() != 2 || gate_b.len() != 1 {
            return Err(Error::Format("malformed SSM scalars".into()));
        }
        let ssm = SsmParams {
            lambda: row("ssm.lambda")?,
            b: get("ssm.b")?,
            c: get("ssm.c")?,
            gate_w: row("ssm.gate_w")?,
            gate_b: gate_b[0],
            stability_bound: stability[0],
            enforce_stability: stability[1] != 0.0,
        };
        let filter = ConceptFilterParams {
            config,
            u: get("filter.u")?,
            w_r: get("filter.w_r")?,
            w_q: get("filter.w_q")?,
            w_k: get("filter.w_k")?,
            w_v: get("filter.w_v")?,
            w_u: get("filter.w_u")?,
            hash_w: get("filter.hash_w")?,
            hash_b: get("filter.hash_b")?,
            e_b: get("filter.e_b")?,
        };
        let fusion = FusionParams {
            p: get("fusion.p")?,
            f: get("fusion.f")?,
        };
        let block = BlockParams { ssm, filter, fusion };
        block.validate()?;
        Ok(block)
    }
}
