//! Checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic      8 bytes  "CCMETAck"
//! version    u32
//! variant    u32 length + UTF-8
//! spec       u32 length + UTF-8 (NetworkSpec text form)
//! config     u32 length + UTF-8 (free-form echo, JSON by convention)
//! iterations u64
//! seed       u64
//! theta      u64 count + f32 values
//! alpha      u8 tag (0 scalar, 1 per-parameter, 2 per-layer-per-step)
//!            tag 0: f32
//!            tag 1: u64 count + f32 values
//!            tag 2: u32 steps, u32 layers, f32 values (steps × layers)
//! ```

use std::path::Path;

use super::params::{AlphaState, NetworkParams};
use super::spec::NetworkSpec;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CCMETAck";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `maml`, `metasgd`, `lslr` or `baseline`.
    pub variant: String,
    pub spec: NetworkSpec,
    pub theta: Vec<f32>,
    pub alpha: AlphaState,
    pub config: String,
    pub iterations: u64,
    pub seed: u64,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("length overflow")?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8".to_string())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend(x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn params(&self) -> NetworkParams {
        NetworkParams {
            spec: self.spec.clone(),
            theta: self.theta.clone(),
            seed: self.seed,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * (self.theta.len() + self.alpha.values().len()));
        out.extend(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.variant);
        put_str(&mut out, &self.spec.to_string());
        put_str(&mut out, &self.config);
        out.extend(self.iterations.to_le_bytes());
        out.extend(self.seed.to_le_bytes());
        out.extend((self.theta.len() as u64).to_le_bytes());
        put_f32s(&mut out, &self.theta);
        match &self.alpha {
            AlphaState::Scalar(a) => {
                out.push(0);
                out.extend(a.to_le_bytes());
            }
            AlphaState::PerParameter(v) => {
                out.push(1);
                out.extend((v.len() as u64).to_le_bytes());
                put_f32s(&mut out, v);
            }
            AlphaState::PerLayerPerStep { steps, layers, values } => {
                out.push(2);
                out.extend((*steps as u32).to_le_bytes());
                out.extend((*layers as u32).to_le_bytes());
                put_f32s(&mut out, values);
            }
        }
        out
    }

    /// Parses a checkpoint; `path` only labels errors.
    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let fail = |m: String| Error::format(path, m);
        let mut r = Reader { buf, pos: 0 };
        if r.take(8).map_err(&fail)? != CHECKPOINT_MAGIC {
            return Err(fail("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32().map_err(&fail)?;
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!("unsupported checkpoint version {version}")));
        }
        let variant = r.string().map_err(&fail)?;
        let spec: NetworkSpec = r.string().map_err(&fail)?.parse()?;
        let config = r.string().map_err(&fail)?;
        let iterations = r.u64().map_err(&fail)?;
        let seed = r.u64().map_err(&fail)?;
        let n = r.u64().map_err(&fail)? as usize;
        let theta = r.f32s(n).map_err(&fail)?;
        let alpha = match r.u8().map_err(&fail)? {
            0 => AlphaState::Scalar(f32::from_le_bytes(r.take(4).map_err(&fail)?.try_into().unwrap())),
            1 => {
                let n = r.u64().map_err(&fail)? as usize;
                AlphaState::PerParameter(r.f32s(n).map_err(&fail)?)
            }
            2 => {
                let steps = r.u32().map_err(&fail)? as usize;
                let layers = r.u32().map_err(&fail)? as usize;
                let values = r.f32s(steps * layers).map_err(&fail)?;
                AlphaState::PerLayerPerStep { steps, layers, values }
            }
            t => return Err(fail(format!("unknown alpha tag {t}"))),
        };
        if r.pos != buf.len() {
            return Err(fail("trailing bytes".into()));
        }
        NetworkParams::new(spec.clone(), theta.clone(), seed)?;
        alpha.validate(&spec)?;
        Ok(Self {
            variant,
            spec,
            theta,
            alpha,
            config,
            iterations,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }
}
