//! Node-level training data and deterministic corpus splits.

use acnp_core::cloud::QuantizedCloud;
use acnp_core::context::{ContextConfig, ContextFeatures, LevelContexts};
use acnp_core::octree::{build_octree, OccupancySymbol};
use sha2::{Digest, Sha256};

use crate::synth::{generate_cloud, SynthError, SyntheticKind, SyntheticSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedCloud {
    pub name: String,
    pub cloud: QuantizedCloud,
}

/// Contexts and symbols of every node of a set of clouds, in coding order.
#[derive(Debug, Clone, Default)]
pub struct NodeSet {
    pub contexts: Vec<ContextFeatures>,
    pub symbols: Vec<OccupancySymbol>,
}

impl NodeSet {
    pub fn from_clouds<'a, I>(clouds: I, cfg: ContextConfig) -> acnp_core::Result<Self>
    where
        I: IntoIterator<Item = &'a QuantizedCloud>,
    {
        let mut set = Self::default();
        for cloud in clouds {
            let tree = build_octree(cloud)?;
            for level in 0..tree.depth() {
                let symbols: Vec<OccupancySymbol> = tree.levels()[level as usize].iter().map(|n| n.symbol).collect();
                set.contexts.extend(LevelContexts::new(&tree, level, cfg)?.all(&symbols)?);
                set.symbols.extend(symbols);
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Number of occupied children of every node.
    pub fn child_counts(&self) -> Vec<f64> {
        self.symbols.iter().map(|s| s.child_count() as f64).collect()
    }

    /// One-hot child-count vectors built from the true symbols.
    pub fn oracle_numbers(&self) -> Vec<[f64; 8]> {
        self.symbols
            .iter()
            .map(|s| {
                let mut v = [0.0; 8];
                v[s.child_count() as usize - 1] = 1.0;
                v
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Holdout,
}

/// Assignment by hash of the cloud name, so it never depends on corpus order.
pub fn split_of(name: &str, holdout_fraction: f64) -> Split {
    let h = Sha256::digest(name.as_bytes());
    let x = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) as f64 / 2f64.powi(64);
    if x < holdout_fraction {
        Split::Holdout
    } else {
        Split::Train
    }
}

/// `(train, holdout)`; disjoint by construction.
pub fn split(clouds: Vec<NamedCloud>, holdout_fraction: f64) -> (Vec<NamedCloud>, Vec<NamedCloud>) {
    let (hold, train) = clouds.into_iter().partition(|c| split_of(&c.name, holdout_fraction) == Split::Holdout);
    (train, hold)
}

/// `(fit, validation)` out of training clouds, hashed independently of
/// [`split`] so the fraction applies evenly.
pub fn validation_split(clouds: Vec<NamedCloud>, fraction: f64) -> (Vec<NamedCloud>, Vec<NamedCloud>) {
    let (val, fit) =
        clouds.into_iter().partition(|c| split_of(&format!("validation/{}", c.name), fraction) == Split::Holdout);
    (fit, val)
}

/// `count` clouds per kind, seeds `seed, seed + 1, ...`, named `kind-seed`.
pub fn synthetic_corpus(
    kinds: &[SyntheticKind],
    count: usize,
    points: usize,
    depth: u8,
    seed: u64,
) -> Result<Vec<NamedCloud>, SynthError> {
    let mut out = Vec::new();
    for &kind in kinds {
        for i in 0..count as u64 {
            let spec = SyntheticSpec { kind, points, depth, seed: seed + i };
            out.push(NamedCloud { name: format!("{kind}-{}", seed + i), cloud: generate_cloud(&spec)? });
        }
    }
    Ok(out)
}
