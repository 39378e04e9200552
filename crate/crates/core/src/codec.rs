//! Container format and the encode/decode pipeline.
//!
//! Container (little-endian numbers):
//!
//! ```text
//! "ACNP" | version u8 | depth u8 | model kind u8 | K u8 | W u16 | model hash [32]
//! origin 3 x f64 | scale f64 | payload bit length u64 | payload bytes
//! ```

use alloc::format;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::acnp::Acnp;
use crate::checkpoint::{models_hash, Reader};
use crate::cloud::{QuantizedCloud, MAX_DEPTH};
use crate::context::{ContextConfig, ContextFeatures, LevelContexts};
use crate::context_model::{ContextModel, ProbDist255};
use crate::entropy::{quantize_dist, ArithmeticDecoder, ArithmeticEncoder, Bitstream, FreqTable};
use crate::octree::{build_octree, OccupancySymbol, OctreeBuilder, TreeView, DEFAULT_NODE_LIMIT};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ACNP";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 1 + 1 + 1 + 2 + 32 + 24 + 8 + 8;

/// Nodes per forward pass when a whole level can be batched.
const BATCH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecKind {
    Baseline = 0,
    Acnp = 1,
    /// Every symbol equiprobable; no checkpoints involved.
    Uniform = 2,
}

impl CodecKind {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::Baseline),
            1 => Ok(Self::Acnp),
            2 => Ok(Self::Uniform),
            _ => Err(Error::Container(format!("unknown model kind {v}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Acnp => "acnp",
            Self::Uniform => "uniform",
        }
    }
}

/// Anything that can supply per-node distributions to the codec.
pub trait EntropyModel {
    fn kind(&self) -> CodecKind;
    fn context(&self) -> ContextConfig;
    /// Identifies the exact parameters; recorded in the container.
    fn hash(&self) -> [u8; 32];
    fn distributions(&self, ctxs: &[ContextFeatures]) -> Result<Vec<ProbDist255>>;
}

/// A trained context model, optionally paired with a child-count predictor.
#[derive(Debug, Clone)]
pub struct Models {
    context_model: ContextModel,
    acnp: Option<Acnp>,
    hash: [u8; 32],
}

impl Models {
    pub fn baseline(context_model: ContextModel) -> Result<Self> {
        if context_model.is_enhanced() {
            return Err(Error::Layout("baseline codec given an enhanced context model".into()));
        }
        let hash = models_hash(&[&context_model.to_checkpoint().to_bytes()]);
        Ok(Self { context_model, acnp: None, hash })
    }

    pub fn enhanced(context_model: ContextModel, acnp: Acnp) -> Result<Self> {
        if !context_model.is_enhanced() {
            return Err(Error::Layout("enhanced codec given a baseline context model".into()));
        }
        if context_model.context() != acnp.context() {
            return Err(Error::Layout(format!(
                "context model uses {:?}, child-count model uses {:?}",
                context_model.context(),
                acnp.context()
            )));
        }
        let hash =
            models_hash(&[&context_model.to_checkpoint().to_bytes(), &acnp.to_checkpoint().to_bytes()]);
        Ok(Self { context_model, acnp: Some(acnp), hash })
    }

    pub fn context_model(&self) -> &ContextModel {
        &self.context_model
    }

    pub fn acnp(&self) -> Option<&Acnp> {
        self.acnp.as_ref()
    }
}

impl EntropyModel for Models {
    fn kind(&self) -> CodecKind {
        if self.acnp.is_some() {
            CodecKind::Acnp
        } else {
            CodecKind::Baseline
        }
    }

    fn context(&self) -> ContextConfig {
        self.context_model.context()
    }

    fn hash(&self) -> [u8; 32] {
        self.hash
    }

    fn distributions(&self, ctxs: &[ContextFeatures]) -> Result<Vec<ProbDist255>> {
        match &self.acnp {
            Some(a) => self.context_model.forward_acnp(ctxs, &a.number_vectors(ctxs)?),
            None => self.context_model.forward_baseline(ctxs),
        }
    }
}

/// The untrained reference model.
#[derive(Debug, Clone, Copy)]
pub struct UniformModel {
    pub context: ContextConfig,
}

impl EntropyModel for UniformModel {
    fn kind(&self) -> CodecKind {
        CodecKind::Uniform
    }

    fn context(&self) -> ContextConfig {
        self.context
    }

    fn hash(&self) -> [u8; 32] {
        Sha256::digest(b"uniform").into()
    }

    fn distributions(&self, ctxs: &[ContextFeatures]) -> Result<Vec<ProbDist255>> {
        Ok(ctxs.iter().map(|_| ProbDist255::uniform()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Header {
    pub version: u8,
    pub depth: u8,
    pub kind: CodecKind,
    pub context: ContextConfig,
    pub model_hash: [u8; 32],
    pub origin: [f64; 3],
    pub scale: f64,
    pub bit_len: u64,
}

impl Header {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[self.version, self.depth, self.kind as u8, self.context.ancestors()]);
        out.extend_from_slice(&self.context.window().to_le_bytes());
        out.extend_from_slice(&self.model_hash);
        for v in self.origin {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend_from_slice(&self.bit_len.to_le_bytes());
        out
    }

    /// Parses the fixed-size header at the start of `bytes`.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Container(format!("{} bytes is shorter than the {HEADER_LEN}-byte header", bytes.len())));
        }
        let mut r = Reader { bytes, pos: 0 };
        let wrap = |e: Error| Error::Container(format!("{e}"));
        if r.take(4).map_err(wrap)? != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let version = r.u8().map_err(wrap)?;
        if version != VERSION {
            return Err(Error::Container(format!("unsupported version {version}")));
        }
        let depth = r.u8().map_err(wrap)?;
        if depth == 0 || depth > MAX_DEPTH {
            return Err(Error::DepthOutOfRange(depth as u32));
        }
        let kind = CodecKind::from_u8(r.u8().map_err(wrap)?)?;
        let k = r.u8().map_err(wrap)?;
        let w = r.u16().map_err(wrap)?;
        let context = ContextConfig::new(k, w).map_err(wrap)?;
        let mut model_hash = [0u8; 32];
        model_hash.copy_from_slice(r.take(32).map_err(wrap)?);
        let mut origin = [0.0; 3];
        for o in &mut origin {
            *o = r.f64().map_err(wrap)?;
        }
        let scale = r.f64().map_err(wrap)?;
        if !(origin.iter().all(|v| v.is_finite()) && scale.is_finite() && scale > 0.0) {
            return Err(Error::Container("invalid origin or scale".into()));
        }
        let bit_len = r.u64().map_err(wrap)?;
        Ok(Self { version, depth, kind, context, model_hash, origin, scale, bit_len })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedCloud {
    pub header: Header,
    pub payload: Bitstream,
}

impl CompressedCloud {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.to_bytes();
        out.extend_from_slice(self.payload.bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = Header::parse(bytes)?;
        let body = &bytes[HEADER_LEN..];
        let need = header.bit_len.div_ceil(8);
        if body.len() as u64 != need {
            return Err(Error::Container(format!(
                "payload has {} bytes, header announces {} bits",
                body.len(),
                header.bit_len
            )));
        }
        let payload = Bitstream::from_parts(body.to_vec(), header.bit_len).map_err(|e| Error::Container(format!("{e}")))?;
        Ok(Self { header, payload })
    }

    pub fn payload_bits(&self) -> u64 {
        self.payload.bit_len()
    }

    /// Header plus byte-padded payload, in bits.
    pub fn total_bits(&self) -> u64 {
        (HEADER_LEN as u64 + self.payload.bytes().len() as u64) * 8
    }
}

/// Bits per input point, payload only.
pub fn bpip(cc: &CompressedCloud, point_count: usize) -> Result<f64> {
    if point_count == 0 {
        return Err(Error::InvalidCloud("bits per point of an empty cloud".into()));
    }
    Ok(cc.payload_bits() as f64 / point_count as f64)
}

/// Bits per input point including the header.
pub fn bpip_with_header(cc: &CompressedCloud, point_count: usize) -> Result<f64> {
    if point_count == 0 {
        return Err(Error::InvalidCloud("bits per point of an empty cloud".into()));
    }
    Ok(cc.total_bits() as f64 / point_count as f64)
}

/// Relative rate change in percent; negative means `rate` beats `reference`.
pub fn gain_percent(rate: f64, reference: f64) -> f64 {
    (rate - reference) / reference * 100.0
}

/// Accounting gathered while encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeStats {
    pub nodes: usize,
    pub points: usize,
    pub payload_bits: u64,
    pub header_bits: u64,
    /// `-sum log2 p(s)` under the model's floating-point distributions.
    pub model_bits: f64,
    /// The same under the quantized tables actually used by the coder.
    pub table_bits: f64,
}

impl EncodeStats {
    pub fn bpip(&self) -> f64 {
        self.payload_bits as f64 / self.points as f64
    }

    pub fn bpip_with_header(&self) -> f64 {
        (self.payload_bits.div_ceil(8) * 8 + self.header_bits) as f64 / self.points as f64
    }

    /// Model cross-entropy per node, in bits.
    pub fn model_bits_per_node(&self) -> f64 {
        self.model_bits / self.nodes as f64
    }
}

pub fn encode_cloud<M: EntropyModel + ?Sized>(cloud: &QuantizedCloud, model: &M) -> Result<CompressedCloud> {
    encode_cloud_with_stats(cloud, model).map(|(cc, _)| cc)
}

pub fn encode_cloud_with_stats<M: EntropyModel + ?Sized>(
    cloud: &QuantizedCloud,
    model: &M,
) -> Result<(CompressedCloud, EncodeStats)> {
    let tree = build_octree(cloud)?;
    let cfg = model.context();
    let mut enc = ArithmeticEncoder::new();
    let (mut model_bits, mut table_bits, mut nodes) = (0.0, 0.0, 0);
    for level in 0..tree.depth() {
        let symbols: Vec<OccupancySymbol> = tree.levels()[level as usize].iter().map(|n| n.symbol).collect();
        let ctxs = LevelContexts::new(&tree, level, cfg)?.all(&symbols)?;
        for (chunk, syms) in ctxs.chunks(BATCH).zip(symbols.chunks(BATCH)) {
            for (dist, &s) in model.distributions(chunk)?.iter().zip(syms) {
                let table = quantize_dist(dist);
                model_bits -= libm::log2(dist.prob(s));
                table_bits += table.cost(s);
                enc.encode(&table, s);
            }
        }
        nodes += symbols.len();
    }
    let payload = enc.finish();
    let header = Header {
        version: VERSION,
        depth: cloud.depth(),
        kind: model.kind(),
        context: cfg,
        model_hash: model.hash(),
        origin: cloud.origin(),
        scale: cloud.scale(),
        bit_len: payload.bit_len(),
    };
    let stats = EncodeStats {
        nodes,
        points: cloud.len(),
        payload_bits: payload.bit_len(),
        header_bits: HEADER_LEN as u64 * 8,
        model_bits,
        table_bits,
    };
    Ok((CompressedCloud { header, payload }, stats))
}

pub fn decode_cloud<M: EntropyModel + ?Sized>(cc: &CompressedCloud, model: &M) -> Result<QuantizedCloud> {
    decode_cloud_with_limit(cc, model, DEFAULT_NODE_LIMIT)
}

/// As [`decode_cloud`], refusing trees with more than `node_limit` nodes.
pub fn decode_cloud_with_limit<M: EntropyModel + ?Sized>(
    cc: &CompressedCloud,
    model: &M,
    node_limit: usize,
) -> Result<QuantizedCloud> {
    let h = &cc.header;
    if h.kind != model.kind() || h.context != model.context() || h.model_hash != model.hash() {
        return Err(Error::HashMismatch);
    }
    if h.bit_len != cc.payload.bit_len() {
        return Err(Error::Container("header and payload disagree on the bit length".into()));
    }
    let cfg = h.context;
    let mut builder = OctreeBuilder::new(h.depth)?.with_node_limit(node_limit);
    let mut dec = ArithmeticDecoder::new(&cc.payload);
    while let Some(level) = builder.current_level() {
        let lc = LevelContexts::new(&builder, level, cfg)?;
        let n = builder.level_len(level);
        let mut decoded = Vec::with_capacity(n);
        if cfg.has_window() {
            for i in 0..n {
                let ctx = lc.features(i, &decoded)?;
                let dist = model.distributions(core::slice::from_ref(&ctx))?;
                decoded.push(dec.decode(&quantize_dist(&dist[0]))?);
            }
        } else {
            let ctxs = lc.all(&[])?;
            for chunk in ctxs.chunks(BATCH) {
                for dist in model.distributions(chunk)? {
                    let table: FreqTable = quantize_dist(&dist);
                    decoded.push(dec.decode(&table)?);
                }
            }
        }
        for s in decoded {
            builder.push(s)?;
        }
    }
    dec.finish()?;
    builder.finish()?.reconstruct_points()?.with_transform(h.origin, h.scale)
}
