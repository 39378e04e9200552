//! Raw and voxelized point clouds.
//!
//! [`QuantizedCloud`] is the lossless reference of the codec: a sorted,
//! deduplicated set of integer voxels plus the affine transform back to the
//! original coordinate frame.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Largest supported octree depth (bits per coordinate).
pub const MAX_DEPTH: u8 = 16;

/// Snap tolerance applied before flooring, so that values which are integral
/// up to rounding noise land on their own grid cell.
const SNAP: f64 = 1e-9;

/// Real-valued points in arbitrary units.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawCloud {
    points: Vec<[f64; 3]>,
}

impl RawCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidCloud(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn into_points(self) -> Vec<[f64; 3]> {
        self.points
    }
}

/// Integer voxel coordinates at a fixed bit depth, canonical (sorted
/// lexicographically by x, y, z and deduplicated).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCloud {
    depth: u8,
    points: Vec<[u32; 3]>,
    origin: [f64; 3],
    scale: f64,
}

impl QuantizedCloud {
    /// Builds a cloud from arbitrary voxels, sorting and deduplicating them.
    pub fn new(depth: u8, mut points: Vec<[u32; 3]>, origin: [f64; 3], scale: f64) -> Result<Self> {
        check_depth(depth as u32)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidCloud(format!("scale must be positive and finite, got {scale}")));
        }
        if origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCloud("origin must be finite".into()));
        }
        let limit = 1u32 << depth;
        if let Some(p) = points.iter().find(|p| p.iter().any(|&c| c >= limit)) {
            return Err(Error::InvalidCloud(format!("voxel {p:?} does not fit in {depth} bits")));
        }
        points.sort_unstable();
        points.dedup();
        Ok(Self { depth, points, origin, scale })
    }

    /// Voxels in the unit frame (origin 0, scale 1).
    pub fn from_voxels(depth: u8, points: Vec<[u32; 3]>) -> Result<Self> {
        Self::new(depth, points, [0.0; 3], 1.0)
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    pub fn points(&self) -> &[[u32; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Same voxels with a different dequantization transform.
    pub fn with_transform(mut self, origin: [f64; 3], scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) || origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCloud("transform must be finite with positive scale".into()));
        }
        self.origin = origin;
        self.scale = scale;
        Ok(self)
    }
}

fn check_depth(depth: u32) -> Result<()> {
    if depth == 0 || depth > MAX_DEPTH as u32 {
        return Err(Error::DepthOutOfRange(depth));
    }
    Ok(())
}

/// Maps a raw cloud onto a cubic `2^depth` voxel grid.
///
/// The grid origin is the componentwise minimum and the (uniform) scale is the
/// largest axis span divided by `2^depth - 1`; coincident clouds use scale 1.
pub fn quantize(cloud: &RawCloud, depth: u8) -> Result<QuantizedCloud> {
    check_depth(depth as u32)?;
    let pts = cloud.points();
    if pts.is_empty() {
        return Err(Error::InvalidCloud("cannot quantize an empty cloud".into()));
    }
    let mut lo = pts[0];
    let mut hi = pts[0];
    for p in pts {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
    let top = (1u32 << depth) - 1;
    let scale = if span > 0.0 { span / top as f64 } else { 1.0 };
    let voxels = pts
        .iter()
        .map(|p| {
            let mut v = [0u32; 3];
            for a in 0..3 {
                let t = libm::floor((p[a] - lo[a]) / scale + SNAP);
                v[a] = if t <= 0.0 { 0 } else if t >= top as f64 { top } else { t as u32 };
            }
            v
        })
        .collect();
    QuantizedCloud::new(depth, voxels, lo, scale)
}

/// Maps voxels back to `origin + scale * voxel`.
pub fn dequantize(cloud: &QuantizedCloud) -> RawCloud {
    let o = cloud.origin;
    let s = cloud.scale;
    let points = cloud
        .points
        .iter()
        .map(|v| [o[0] + s * v[0] as f64, o[1] + s * v[1] as f64, o[2] + s * v[2] as f64])
        .collect();
    RawCloud { points }
}
