//! Causal per-node contexts.
//!
//! Dense feature layout (width `255*K + 12`):
//!
//! | offset        | width | content                                      |
//! |---------------|-------|----------------------------------------------|
//! | `255*t`       | 255   | one-hot symbol of ancestor `t+1` (parent first), zero when above the root |
//! | `255*K`       | 1     | level / depth                                |
//! | `255*K + 1`   | 8     | one-hot octant within the parent             |
//! | `255*K + 9`   | 3     | cell origin / 2^depth                        |
//!
//! Symbol `j` sits at position `j - 1` of its block. Sibling-window rows
//! reuse this layout for the preceding node and append a 255-wide one-hot of
//! that node's own (already decoded) symbol.

use alloc::format;
use alloc::vec::Vec;

use crate::nn::SparseRows;
use crate::octree::{NodeRef, OccupancySymbol, TreeView};
use crate::{Error, Result};

pub const SYMBOL_COUNT: usize = 255;
pub const MAX_ANCESTORS: u8 = 8;
pub const GEOMETRY_WIDTH: usize = 12;
pub const DEFAULT_ANCESTORS: u8 = 4;
pub const DEFAULT_WINDOW: u16 = 32;

/// Context shape shared by the context model, the child-count predictor and
/// the stream header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ContextConfig {
    ancestors: u8,
    window: u16,
}

impl ContextConfig {
    pub fn new(ancestors: u8, window: u16) -> Result<Self> {
        if ancestors == 0 || ancestors > MAX_ANCESTORS {
            return Err(Error::Context(format!("ancestor count {ancestors} outside [1, {MAX_ANCESTORS}]")));
        }
        Ok(Self { ancestors, window })
    }

    /// Ancestors only, no sibling window.
    pub fn ancestors_only(ancestors: u8) -> Result<Self> {
        Self::new(ancestors, 0)
    }

    pub fn ancestors(&self) -> u8 {
        self.ancestors
    }

    pub fn window(&self) -> u16 {
        self.window
    }

    pub fn has_window(&self) -> bool {
        self.window > 0
    }

    pub fn feature_width(&self) -> usize {
        SYMBOL_COUNT * self.ancestors as usize + GEOMETRY_WIDTH
    }

    pub fn token_width(&self) -> usize {
        self.feature_width() + if self.has_window() { SYMBOL_COUNT } else { 0 }
    }

    /// Tokens per node: one per ancestor, the node itself, then the window.
    pub fn token_count(&self) -> usize {
        self.ancestors as usize + 1 + self.window as usize
    }
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self { ancestors: DEFAULT_ANCESTORS, window: 0 }
    }
}

/// Ancestor occupancies plus the node's own geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AncestorContext {
    ancestors: [u8; MAX_ANCESTORS as usize],
    k: u8,
    level: u8,
    depth: u8,
    octant: u8,
    origin: [u32; 3],
}

impl AncestorContext {
    /// Symbol of the `t`-th ancestor (0 = parent); `None` above the root.
    pub fn ancestor(&self, t: usize) -> Option<OccupancySymbol> {
        if t >= self.k as usize {
            return None;
        }
        OccupancySymbol::new(self.ancestors[t] as u32).ok()
    }

    pub fn ancestor_count(&self) -> usize {
        self.k as usize
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn octant(&self) -> u8 {
        self.octant
    }

    pub fn level_norm(&self) -> f64 {
        self.level as f64 / self.depth as f64
    }

    pub fn position_norm(&self) -> [f64; 3] {
        let side = (1u64 << self.depth) as f64;
        self.origin.map(|c| c as f64 / side)
    }

    fn write_ancestors(&self, rows: &mut SparseRows) {
        for t in 0..self.k as usize {
            if self.ancestors[t] != 0 {
                rows.push(t * SYMBOL_COUNT + self.ancestors[t] as usize - 1, 1.0);
            }
        }
    }

    fn write_geometry(&self, rows: &mut SparseRows) {
        let base = SYMBOL_COUNT * self.k as usize;
        rows.push(base, self.level_norm());
        rows.push(base + 1 + self.octant as usize, 1.0);
        for (a, p) in self.position_norm().iter().enumerate() {
            rows.push(base + 9 + a, *p);
        }
    }

    fn write_features(&self, rows: &mut SparseRows) {
        self.write_ancestors(rows);
        self.write_geometry(rows);
    }

    /// Dense feature vector of width `255*K + 12`.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut rows = SparseRows::new(SYMBOL_COUNT * self.k as usize + GEOMETRY_WIDTH);
        self.write_features(&mut rows);
        rows.end_row();
        rows.to_dense()
    }
}

/// A decoded node preceding the current one at the same level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRow {
    pub context: AncestorContext,
    pub symbol: OccupancySymbol,
}

/// Everything a model may condition on when coding one node.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFeatures {
    pub node: AncestorContext,
    /// Exactly `W` rows, oldest first; `None` rows are padding and come first.
    pub window: Vec<Option<WindowRow>>,
}

impl ContextFeatures {
    pub fn to_dense(&self) -> Vec<f64> {
        self.node.to_dense()
    }
}

/// Ancestor context of `node`, computable as soon as its parent level is decoded.
pub fn ancestor_context<T: TreeView + ?Sized>(tree: &T, node: NodeRef, k: u8) -> Result<AncestorContext> {
    if k == 0 || k > MAX_ANCESTORS {
        return Err(Error::Context(format!("ancestor count {k} outside [1, {MAX_ANCESTORS}]")));
    }
    let geom = tree
        .geometry(node)
        .ok_or_else(|| Error::Context(format!("node {node:?} is not in the decoded prefix")))?;
    let mut ancestors = [0u8; MAX_ANCESTORS as usize];
    let mut cursor = (node.level, geom.parent);
    for slot in ancestors.iter_mut().take(k as usize) {
        let (level, Some(parent)) = cursor else { break };
        let r = NodeRef { level: level - 1, index: parent };
        let (g, s) = tree
            .geometry(r)
            .zip(tree.symbol(r))
            .ok_or_else(|| Error::Context(format!("ancestor {r:?} of {node:?} is not decoded")))?;
        *slot = s.get();
        cursor = (r.level, g.parent);
    }
    Ok(AncestorContext {
        ancestors,
        k,
        level: node.level,
        depth: tree.depth(),
        octant: geom.octant,
        origin: geom.cell_origin,
    })
}

/// Ancestor context plus a window of the `w` nodes that precede `node` at its level.
pub fn sibling_context<T: TreeView + ?Sized>(tree: &T, node: NodeRef, w: u16, k: u8) -> Result<ContextFeatures> {
    let own = ancestor_context(tree, node, k)?;
    let i = node.index as usize;
    let mut window = Vec::with_capacity(w as usize);
    for slot in 0..w as usize {
        let Some(j) = (i + slot).checked_sub(w as usize) else {
            window.push(None);
            continue;
        };
        let r = NodeRef { level: node.level, index: j as u32 };
        let symbol = tree
            .symbol(r)
            .ok_or_else(|| Error::Context(format!("window node {r:?} is not decoded")))?;
        window.push(Some(WindowRow { context: ancestor_context(tree, r, k)?, symbol }));
    }
    Ok(ContextFeatures { node: own, window })
}

/// Context of one node under `cfg`.
pub fn context_features<T: TreeView + ?Sized>(tree: &T, node: NodeRef, cfg: ContextConfig) -> Result<ContextFeatures> {
    if cfg.has_window() {
        sibling_context(tree, node, cfg.window, cfg.ancestors)
    } else {
        Ok(ContextFeatures { node: ancestor_context(tree, node, cfg.ancestors)?, window: Vec::new() })
    }
}

/// Per-level context builder: ancestor contexts are computed once, windows
/// are cut from them as symbols of the level become available.
#[derive(Debug, Clone)]
pub struct LevelContexts {
    cfg: ContextConfig,
    ancestors: Vec<AncestorContext>,
}

impl LevelContexts {
    pub fn new<T: TreeView + ?Sized>(tree: &T, level: u8, cfg: ContextConfig) -> Result<Self> {
        let ancestors = (0..tree.level_len(level))
            .map(|i| ancestor_context(tree, NodeRef { level, index: i as u32 }, cfg.ancestors))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, ancestors })
    }

    pub fn len(&self) -> usize {
        self.ancestors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ancestors.is_empty()
    }

    /// Context of node `index`; `decoded` holds the symbols of this level's
    /// first nodes (at least `index` of them when a window is configured).
    pub fn features(&self, index: usize, decoded: &[OccupancySymbol]) -> Result<ContextFeatures> {
        let w = self.cfg.window as usize;
        if w > 0 && decoded.len() < index {
            return Err(Error::Context(format!("window of node {index} needs {index} decoded symbols")));
        }
        let window = (0..w)
            .map(|slot| {
                (index + slot).checked_sub(w).map(|j| WindowRow { context: self.ancestors[j], symbol: decoded[j] })
            })
            .collect();
        Ok(ContextFeatures { node: self.ancestors[index], window })
    }

    /// Contexts of every node, given all of the level's symbols.
    pub fn all(&self, symbols: &[OccupancySymbol]) -> Result<Vec<ContextFeatures>> {
        (0..self.len()).map(|i| self.features(i, symbols)).collect()
    }
}

/// Model input for the MLP path: one sparse row per node.
pub fn feature_rows(ctxs: &[ContextFeatures], cfg: ContextConfig) -> SparseRows {
    let mut rows = SparseRows::new(cfg.feature_width());
    for c in ctxs {
        c.node.write_features(&mut rows);
        rows.end_row();
    }
    rows
}

/// Model input for the attention path: `token_count` rows per node and a
/// validity mask (padding tokens are invalid; the node's own token never is).
pub fn token_rows(ctxs: &[ContextFeatures], cfg: ContextConfig) -> Result<(SparseRows, Vec<bool>)> {
    let mut rows = SparseRows::new(cfg.token_width());
    let mut valid = Vec::with_capacity(ctxs.len() * cfg.token_count());
    let fw = cfg.feature_width();
    for c in ctxs {
        if c.node.k != cfg.ancestors || c.window.len() != cfg.window as usize {
            return Err(Error::Layout(format!(
                "context with K={} and W={} fed to a K={} W={} layout",
                c.node.k,
                c.window.len(),
                cfg.ancestors,
                cfg.window
            )));
        }
        for t in 0..cfg.ancestors as usize {
            let a = c.node.ancestors[t];
            if a != 0 {
                rows.push(t * SYMBOL_COUNT + a as usize - 1, 1.0);
            }
            rows.end_row();
            valid.push(a != 0);
        }
        c.node.write_geometry(&mut rows);
        rows.end_row();
        valid.push(true);
        for row in &c.window {
            if let Some(r) = row {
                r.context.write_features(&mut rows);
                rows.push(fw + r.symbol.get() as usize - 1, 1.0);
            }
            rows.end_row();
            valid.push(row.is_some());
        }
    }
    Ok((rows, valid))
}

/// Checks that every context matches `cfg`.
pub fn check_layout(ctxs: &[ContextFeatures], cfg: ContextConfig) -> Result<()> {
    match ctxs.iter().find(|c| c.node.k != cfg.ancestors || c.window.len() != cfg.window as usize) {
        Some(c) => Err(Error::Layout(format!(
            "context with K={} and W={} fed to a K={} W={} model",
            c.node.k,
            c.window.len(),
            cfg.ancestors,
            cfg.window
        ))),
        None => Ok(()),
    }
}
