//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "ACKP" | version u8 | kind u8 | K u8 | W u16 | feature width u32 | token width u32
//! meta count u16 | { name len u8 | name | value f64 }*
//! param count u32 | { name len u16 | name | rank u8 | dims u32* | values f64* }*
//! ```
//!
//! Loading checks that the recorded widths match the context layout, so a
//! model is never fed features it was not trained on.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::context::ContextConfig;
use crate::nn::{ParamSet, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ACKP";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    ContextModel = 1,
    ChildCount = 2,
}

impl ModelKind {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Self::ContextModel),
            2 => Ok(Self::ChildCount),
            _ => Err(Error::Checkpoint(format!("unknown model kind {v}"))),
        }
    }
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub context: ContextConfig,
    pub meta: Vec<(String, f64)>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: ModelKind, context: ContextConfig, meta: Vec<(String, f64)>, params: &ParamSet) -> Self {
        let params = params.iter().map(|(_, p)| (String::from(p.name()), p.value().clone())).collect();
        Self { kind, context, meta, params }
    }

    pub fn meta(&self, key: &str) -> Result<f64> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::Checkpoint(format!("missing header field {key}")))
    }

    /// Copies every stored tensor into `params`, which must have the same
    /// names and shapes.
    pub fn load_into(&self, params: &mut ParamSet) -> Result<()> {
        if self.params.len() != params.len() {
            return Err(Error::Layout(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                params.len()
            )));
        }
        for (name, t) in &self.params {
            params.set_value(name, t.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.kind as u8);
        out.push(self.context.ancestors());
        out.extend_from_slice(&self.context.window().to_le_bytes());
        out.extend_from_slice(&(self.context.feature_width() as u32).to_le_bytes());
        out.extend_from_slice(&(self.context.token_width() as u32).to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u16).to_le_bytes());
        for (k, v) in &self.meta {
            out.push(k.len() as u8);
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = ModelKind::from_u8(r.u8()?)?;
        let context = ContextConfig::new(r.u8()?, r.u16()?)?;
        let (fw, tw) = (r.u32()? as usize, r.u32()? as usize);
        if fw != context.feature_width() || tw != context.token_width() {
            return Err(Error::Layout(format!(
                "checkpoint widths {fw}/{tw} disagree with K={} W={}",
                context.ancestors(),
                context.window()
            )));
        }
        let mut meta = Vec::new();
        for _ in 0..r.u16()? {
            let n = r.u8()? as usize;
            let key = r.string(n)?;
            meta.push((key, r.f64()?));
        }
        let mut params = Vec::new();
        for _ in 0..r.u32()? {
            let n = r.u16()? as usize;
            let name = r.string(n)?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.filter(|&l| l.checked_mul(8).is_some_and(|b| b <= r.remaining()));
            let Some(len) = len else {
                return Err(Error::Checkpoint(format!("parameter {name} larger than the file")));
            };
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { kind, context, meta, params })
    }
}

/// SHA-256 over the concatenation of the given checkpoint encodings.
pub fn models_hash(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("unexpected end of data at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
