//! Seeded synthetic point clouds.
//!
//! All generators work directly in voxel space (`[0, 2^depth)^3`, origin 0,
//! scale 1) so the same spec always yields the same [`QuantizedCloud`].

use std::fmt;
use std::str::FromStr;

use acnp_core::cloud::{QuantizedCloud, MAX_DEPTH};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyntheticKind {
    Plane,
    Sphere,
    GaussianClusters,
    RandomWalkSurface,
}

impl SyntheticKind {
    pub const ALL: [Self; 4] = [Self::Plane, Self::Sphere, Self::GaussianClusters, Self::RandomWalkSurface];

    pub fn name(self) -> &'static str {
        match self {
            Self::Plane => "plane",
            Self::Sphere => "sphere",
            Self::GaussianClusters => "gaussian-clusters",
            Self::RandomWalkSurface => "random-walk-surface",
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown kind '{s}' (expected plane, sphere, gaussian-clusters or random-walk-surface)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    /// Points sampled before voxel deduplication.
    pub points: usize,
    pub depth: u8,
    pub seed: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("point budget must be positive")]
    ZeroBudget,
    #[error("depth {0} outside [1, {MAX_DEPTH}]")]
    Depth(u8),
    #[error(transparent)]
    Cloud(#[from] acnp_core::Error),
}

pub fn generate_cloud(spec: &SyntheticSpec) -> Result<QuantizedCloud, SynthError> {
    if spec.points == 0 {
        return Err(SynthError::ZeroBudget);
    }
    if spec.depth == 0 || spec.depth > MAX_DEPTH {
        return Err(SynthError::Depth(spec.depth));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (spec.kind as u64) << 56);
    let side = (1u64 << spec.depth) as f64;
    let unit: Vec<[f64; 3]> = match spec.kind {
        SyntheticKind::Plane => plane(&mut rng, spec.points),
        SyntheticKind::Sphere => sphere(&mut rng, spec.points),
        SyntheticKind::GaussianClusters => clusters(&mut rng, spec.points),
        SyntheticKind::RandomWalkSurface => walk_surface(&mut rng, spec.points),
    };
    let max = side - 1.0;
    let pts = unit.iter().map(|p| p.map(|v| (v * side).floor().clamp(0.0, max) as u32)).collect();
    Ok(QuantizedCloud::new(spec.depth, pts, [0.0; 3], 1.0)?)
}

/// A tilted, gently curved sheet.
fn plane(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let (a, b) = (rng.gen_range(-0.35..0.35), rng.gen_range(-0.35..0.35));
    let (fx, fy) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0));
    let amp = rng.gen_range(0.0..0.05);
    let c = 0.5 - (a + b) / 2.0;
    (0..n)
        .map(|_| {
            let (x, y): (f64, f64) = (rng.gen(), rng.gen());
            let z = c + a * x + b * y + amp * (fx * x * std::f64::consts::TAU).sin() * (fy * y * std::f64::consts::TAU).cos();
            [x, y, z]
        })
        .collect()
}

fn sphere(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let r = rng.gen_range(0.3..0.45);
    (0..n)
        .map(|_| {
            let d: [f64; 3] = UnitSphere.sample(rng);
            d.map(|v| 0.5 + r * v)
        })
        .collect()
}

/// Sparse blobs scattered through the volume.
fn clusters(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let k = rng.gen_range(6..=12);
    let centers: Vec<([f64; 3], f64)> =
        (0..k).map(|_| ([rng.gen(), rng.gen(), rng.gen()], rng.gen_range(0.01..0.06))).collect();
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|_| {
            let (c, s) = centers[rng.gen_range(0..k)];
            [0, 1, 2].map(|a| c[a] + s * std.sample(rng))
        })
        .collect()
}

/// Height field whose profile is a smoothed 2-D random walk.
fn walk_surface(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    const G: usize = 33;
    let step = Normal::new(0.0, 0.02).expect("valid sigma");
    let mut h = vec![[0.0f64; G]; G];
    for i in 0..G {
        for j in 0..G {
            let prev = match (i, j) {
                (0, 0) => 0.5,
                (0, _) => h[0][j - 1],
                (_, 0) => h[i - 1][0],
                _ => 0.5 * (h[i - 1][j] + h[i][j - 1]),
            };
            h[i][j] = (prev + step.sample(rng)).clamp(0.05, 0.95);
        }
    }
    (0..n)
        .map(|_| {
            let (x, y): (f64, f64) = (rng.gen(), rng.gen());
            let (gx, gy) = (x * (G - 1) as f64, y * (G - 1) as f64);
            let (i, j) = ((gx as usize).min(G - 2), (gy as usize).min(G - 2));
            let (tx, ty) = (gx - i as f64, gy - j as f64);
            let z = h[i][j] * (1.0 - tx) * (1.0 - ty)
                + h[i + 1][j] * tx * (1.0 - ty)
                + h[i][j + 1] * (1.0 - tx) * ty
                + h[i + 1][j + 1] * tx * ty;
            [x, y, z]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use acnp_core::octree::build_octree;
    use std::collections::{HashMap, HashSet};

    fn spec(kind: SyntheticKind, points: usize, depth: u8, seed: u64) -> SyntheticSpec {
        SyntheticSpec { kind, points, depth, seed }
    }

    #[test]
    fn deterministic_per_seed() {
        for kind in SyntheticKind::ALL {
            let a = generate_cloud(&spec(kind, 800, 7, 7)).unwrap();
            assert_eq!(a, generate_cloud(&spec(kind, 800, 7, 7)).unwrap());
            assert_ne!(a, generate_cloud(&spec(kind, 800, 7, 8)).unwrap());
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(generate_cloud(&spec(SyntheticKind::Plane, 0, 6, 1)), Err(SynthError::ZeroBudget)));
        assert!(matches!(generate_cloud(&spec(SyntheticKind::Plane, 5, 17, 1)), Err(SynthError::Depth(17))));
        assert!("cube".parse::<SyntheticKind>().is_err());
        assert_eq!("random-walk-surface".parse::<SyntheticKind>().unwrap(), SyntheticKind::RandomWalkSurface);
    }

    #[test]
    fn sphere_is_surface_coherent() {
        let c = generate_cloud(&spec(SyntheticKind::Sphere, 5000, 6, 3)).unwrap();
        let set: HashSet<[u32; 3]> = c.points().iter().copied().collect();
        let near = c
            .points()
            .iter()
            .filter(|p| {
                (-1i64..=1).any(|dx| {
                    (-1i64..=1).any(|dy| {
                        (-1i64..=1).any(|dz| {
                            (dx, dy, dz) != (0, 0, 0)
                                && set.contains(&[
                                    (p[0] as i64 + dx) as u32,
                                    (p[1] as i64 + dy) as u32,
                                    (p[2] as i64 + dz) as u32,
                                ])
                        })
                    })
                })
            })
            .count();
        assert!(near as f64 >= 0.9 * c.len() as f64, "{near} of {}", c.len());
    }

    fn stream_entropy(c: &QuantizedCloud) -> f64 {
        let syms: Vec<u8> = build_octree(c).unwrap().symbol_stream().iter().map(|(_, s)| s.get()).collect();
        let mut hist = HashMap::new();
        syms.iter().for_each(|s| *hist.entry(s).or_insert(0usize) += 1);
        let n = syms.len() as f64;
        hist.values().map(|&c| -(c as f64 / n) * (c as f64 / n).log2()).sum()
    }

    #[test]
    fn clusters_have_higher_entropy_than_planes() {
        for seed in 0..3 {
            let p = generate_cloud(&spec(SyntheticKind::Plane, 4000, 8, seed)).unwrap();
            let g = generate_cloud(&spec(SyntheticKind::GaussianClusters, 4000, 8, seed)).unwrap();
            assert!(stream_entropy(&g) > stream_entropy(&p), "seed {seed}");
        }
    }
}
