//! Breadth-first occupancy octree.
//!
//! Conventions shared by encoder and decoder:
//! * child octant index is `4*bx + 2*by + bz`, where `b_axis` is 1 for the
//!   upper half of the parent cell along that axis;
//! * octant `o` is flag `x_{o+1}` of the occupancy byte and carries weight
//!   `2^(7-o)`, so `x_8` (octant 7) is the least significant bit;
//! * nodes are coded level by level, each level ordered by
//!   `(parent index, octant)`.

use alloc::format;
use alloc::vec::Vec;

use crate::cloud::QuantizedCloud;
use crate::{Error, Result};

/// Node occupancy: which of the 8 children are non-empty. Never zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OccupancySymbol(u8);

impl OccupancySymbol {
    pub fn new(value: u32) -> Result<Self> {
        match value {
            1..=255 => Ok(Self(value as u8)),
            _ => Err(Error::InvalidSymbol(value)),
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Number of occupied children.
    pub fn child_count(self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_occupied(self, octant: u8) -> bool {
        debug_assert!(octant < 8);
        (self.0 >> (7 - octant)) & 1 == 1
    }

    /// Flags `(x_1, ..., x_8)`.
    pub fn flags(self) -> [bool; 8] {
        core::array::from_fn(|k| self.is_occupied(k as u8))
    }

    /// Occupied octants in ascending order.
    pub fn octants(self) -> impl Iterator<Item = u8> {
        (0u8..8).filter(move |&o| self.is_occupied(o))
    }
}

/// Reads flags `(x_1, ..., x_8)` as a binary number with `x_8` least significant.
pub fn occupancy_byte(flags: [bool; 8]) -> Result<OccupancySymbol> {
    let value = flags
        .iter()
        .enumerate()
        .fold(0u32, |acc, (k, &f)| acc | ((f as u32) << (7 - k)));
    OccupancySymbol::new(value)
}

/// Octant of a child cell inside its parent cell.
pub fn octant_of(child_origin: [u32; 3], parent_origin: [u32; 3], child_size: u32) -> Result<u8> {
    let mut octant = 0u8;
    for a in 0..3 {
        let c = child_origin[a] as u64;
        let p = parent_origin[a] as u64;
        let s = child_size as u64;
        let bit = if c == p {
            0
        } else if c == p + s {
            1
        } else {
            return Err(Error::Structure(format!(
                "child cell {child_origin:?} is not an octant of parent {parent_origin:?} (child size {child_size})"
            )));
        };
        octant |= bit << (2 - a);
    }
    Ok(octant)
}

fn octant_offset(octant: u8, size: u32) -> [u32; 3] {
    [
        ((octant >> 2) & 1) as u32 * size,
        ((octant >> 1) & 1) as u32 * size,
        (octant & 1) as u32 * size,
    ]
}

/// Position of a node in the breadth-first layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeRef {
    pub level: u8,
    pub index: u32,
}

/// Everything about a node that is known before its symbol is decoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeGeometry {
    pub level: u8,
    /// Cell corner in voxel units of the full grid.
    pub cell_origin: [u32; 3],
    /// Position within the parent; 0 for the root.
    pub octant: u8,
    /// Index of the parent in the previous level.
    pub parent: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OctreeNode {
    pub geometry: NodeGeometry,
    pub symbol: OccupancySymbol,
}

/// Read access to a (possibly partially decoded) tree.
///
/// Context extraction is written against this trait so the encoder (full
/// tree) and decoder (prefix) share one code path.
pub trait TreeView {
    fn depth(&self) -> u8;
    /// Nodes whose geometry is known at `level`.
    fn level_len(&self, level: u8) -> usize;
    fn geometry(&self, node: NodeRef) -> Option<NodeGeometry>;
    /// `None` while the node's symbol has not been decoded.
    fn symbol(&self, node: NodeRef) -> Option<OccupancySymbol>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Octree {
    depth: u8,
    levels: Vec<Vec<OctreeNode>>,
}

fn root_geometry() -> NodeGeometry {
    NodeGeometry { level: 0, cell_origin: [0; 3], octant: 0, parent: None }
}

fn spread_bits(v: u32) -> u64 {
    let mut x = v as u64 & 0xffff;
    x = (x | (x << 16)) & 0x0000_ff00_00ff;
    x = (x | (x << 8)) & 0x00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x2492_4924_9249;
    x
}

/// Interleaves coordinates so every 3-bit group is an octant index (x highest).
fn morton(p: [u32; 3]) -> u64 {
    (spread_bits(p[0]) << 2) | (spread_bits(p[1]) << 1) | spread_bits(p[2])
}

fn children_of(parent: &NodeGeometry, index: u32, symbol: OccupancySymbol, depth: u8) -> impl Iterator<Item = NodeGeometry> + '_ {
    let child_size = 1u32 << (depth - parent.level - 1);
    symbol.octants().map(move |o| {
        let off = octant_offset(o, child_size);
        NodeGeometry {
            level: parent.level + 1,
            cell_origin: [
                parent.cell_origin[0] + off[0],
                parent.cell_origin[1] + off[1],
                parent.cell_origin[2] + off[2],
            ],
            octant: o,
            parent: Some(index),
        }
    })
}

/// Builds the occupancy octree of a non-empty cloud; depth equals the cloud depth.
pub fn build_octree(cloud: &QuantizedCloud) -> Result<Octree> {
    if cloud.is_empty() {
        return Err(Error::InvalidCloud("cannot build an octree from an empty cloud".into()));
    }
    let depth = cloud.depth();
    let mut codes: Vec<u64> = cloud.points().iter().map(|&p| morton(p)).collect();
    codes.sort_unstable();
    codes.dedup();

    // keys of occupied cells at level l are codes >> 3*(depth - l); their
    // sorted order is exactly the breadth-first (parent, octant) order.
    let mut levels: Vec<Vec<OctreeNode>> = Vec::with_capacity(depth as usize);
    let mut geoms = alloc::vec![root_geometry()];
    for level in 0..depth {
        let shift = 3 * (depth - level - 1) as u32;
        let mut symbols = Vec::with_capacity(geoms.len());
        let mut current: Option<(u64, u8)> = None;
        for &c in &codes {
            let child_key = c >> shift;
            let parent_key = child_key >> 3;
            let bit = 1u8 << (7 - (child_key & 7) as u8);
            match current {
                Some((k, ref mut s)) if k == parent_key => *s |= bit,
                _ => {
                    if let Some((_, s)) = current {
                        symbols.push(OccupancySymbol(s));
                    }
                    current = Some((parent_key, bit));
                }
            }
        }
        if let Some((_, s)) = current {
            symbols.push(OccupancySymbol(s));
        }
        debug_assert_eq!(symbols.len(), geoms.len());
        let nodes: Vec<OctreeNode> = geoms
            .iter()
            .zip(&symbols)
            .map(|(&geometry, &symbol)| OctreeNode { geometry, symbol })
            .collect();
        geoms = if level + 1 < depth {
            nodes
                .iter()
                .enumerate()
                .flat_map(|(i, n)| children_of(&n.geometry, i as u32, n.symbol, depth))
                .collect()
        } else {
            Vec::new()
        };
        levels.push(nodes);
    }
    Ok(Octree { depth, levels })
}

impl Octree {
    pub fn depth(&self) -> u8 {
        self.depth
    }

    pub fn levels(&self) -> &[Vec<OctreeNode>] {
        &self.levels
    }

    pub fn node(&self, node: NodeRef) -> Option<&OctreeNode> {
        self.levels.get(node.level as usize)?.get(node.index as usize)
    }

    pub fn node_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    /// Assembles a tree from raw levels, checking every structural invariant.
    pub fn from_levels(depth: u8, levels: Vec<Vec<OctreeNode>>) -> Result<Self> {
        let tree = Self { depth, levels };
        tree.validate()?;
        Ok(tree)
    }

    /// Rebuilds a tree from its breadth-first symbol stream.
    pub fn from_symbols(depth: u8, symbols: &[OccupancySymbol]) -> Result<Self> {
        let mut builder = OctreeBuilder::new(depth)?;
        for (i, &s) in symbols.iter().enumerate() {
            if builder.is_complete() {
                return Err(Error::Structure(format!(
                    "stream has {} symbols but the tree is complete after {i}",
                    symbols.len()
                )));
            }
            builder.push(s)?;
        }
        builder.finish()
    }

    /// Checks root, parent links, octant order, cell origins and level sizes.
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > crate::cloud::MAX_DEPTH {
            return Err(Error::DepthOutOfRange(self.depth as u32));
        }
        if self.levels.len() != self.depth as usize {
            return Err(Error::Structure(format!(
                "{} levels for depth {}",
                self.levels.len(),
                self.depth
            )));
        }
        let mut expected = alloc::vec![root_geometry()];
        for (l, nodes) in self.levels.iter().enumerate() {
            if nodes.len() != expected.len() {
                return Err(Error::Structure(format!(
                    "level {l} has {} nodes, parents imply {}",
                    nodes.len(),
                    expected.len()
                )));
            }
            for (i, (n, e)) in nodes.iter().zip(&expected).enumerate() {
                if n.geometry != *e {
                    return Err(Error::Structure(format!("node {i} of level {l} is inconsistent with its parent")));
                }
            }
            if l + 1 < self.depth as usize {
                expected = nodes
                    .iter()
                    .enumerate()
                    .flat_map(|(i, n)| children_of(&n.geometry, i as u32, n.symbol, self.depth))
                    .collect();
            }
        }
        Ok(())
    }

    /// Voxels encoded by the leaf level, in canonical order.
    pub fn reconstruct_points(&self) -> Result<QuantizedCloud> {
        self.validate()?;
        let leaves = &self.levels[self.depth as usize - 1];
        let mut points = Vec::with_capacity(leaves.iter().map(|n| n.symbol.child_count() as usize).sum());
        for n in leaves {
            for o in n.symbol.octants() {
                let off = octant_offset(o, 1);
                let c = n.geometry.cell_origin;
                points.push([c[0] + off[0], c[1] + off[1], c[2] + off[2]]);
            }
        }
        QuantizedCloud::from_voxels(self.depth, points)
    }

    /// Coding order: level 0 first, then each level by `(parent, octant)`.
    pub fn symbol_stream(&self) -> Vec<(NodeRef, OccupancySymbol)> {
        self.levels
            .iter()
            .enumerate()
            .flat_map(|(l, nodes)| {
                nodes.iter().enumerate().map(move |(i, n)| {
                    (NodeRef { level: l as u8, index: i as u32 }, n.symbol)
                })
            })
            .collect()
    }
}

impl TreeView for Octree {
    fn depth(&self) -> u8 {
        self.depth
    }

    fn level_len(&self, level: u8) -> usize {
        self.levels.get(level as usize).map_or(0, Vec::len)
    }

    fn geometry(&self, node: NodeRef) -> Option<NodeGeometry> {
        self.node(node).map(|n| n.geometry)
    }

    fn symbol(&self, node: NodeRef) -> Option<OccupancySymbol> {
        self.node(node).map(|n| n.symbol)
    }
}

/// Incremental tree construction in coding order, used by the decoder.
#[derive(Debug, Clone)]
pub struct OctreeBuilder {
    depth: u8,
    levels: Vec<Vec<OctreeNode>>,
    frontier: Vec<NodeGeometry>,
    decoded: Vec<OccupancySymbol>,
    node_limit: usize,
    total: usize,
}

/// Default cap on the number of nodes a decoder will materialize.
pub const DEFAULT_NODE_LIMIT: usize = 1 << 26;

impl OctreeBuilder {
    pub fn new(depth: u8) -> Result<Self> {
        if depth == 0 || depth > crate::cloud::MAX_DEPTH {
            return Err(Error::DepthOutOfRange(depth as u32));
        }
        Ok(Self {
            depth,
            levels: Vec::with_capacity(depth as usize),
            frontier: alloc::vec![root_geometry()],
            decoded: Vec::new(),
            node_limit: DEFAULT_NODE_LIMIT,
            total: 1,
        })
    }

    pub fn with_node_limit(mut self, limit: usize) -> Self {
        self.node_limit = limit;
        self
    }

    pub fn is_complete(&self) -> bool {
        self.levels.len() == self.depth as usize
    }

    /// Level currently being decoded.
    pub fn current_level(&self) -> Option<u8> {
        (!self.is_complete()).then_some(self.levels.len() as u8)
    }

    /// Geometry of every node at the current level.
    pub fn frontier(&self) -> &[NodeGeometry] {
        &self.frontier
    }

    /// Index (within the current level) of the next node to decode.
    pub fn next_index(&self) -> usize {
        self.decoded.len()
    }

    /// Nodes materialized so far, including the current level.
    pub fn node_total(&self) -> usize {
        self.total
    }

    pub fn push(&mut self, symbol: OccupancySymbol) -> Result<()> {
        if self.is_complete() {
            return Err(Error::Structure("symbol pushed into a complete tree".into()));
        }
        self.decoded.push(symbol);
        if self.decoded.len() < self.frontier.len() {
            return Ok(());
        }
        let nodes: Vec<OctreeNode> = self
            .frontier
            .iter()
            .zip(&self.decoded)
            .map(|(&geometry, &symbol)| OctreeNode { geometry, symbol })
            .collect();
        self.decoded.clear();
        if self.levels.len() + 1 < self.depth as usize {
            let next: usize = nodes.iter().map(|n| n.symbol.child_count() as usize).sum();
            if self.total + next > self.node_limit {
                return Err(Error::Structure(format!(
                    "tree exceeds the node limit of {} at level {}",
                    self.node_limit,
                    self.levels.len() + 1
                )));
            }
            self.total += next;
            self.frontier = nodes
                .iter()
                .enumerate()
                .flat_map(|(i, n)| children_of(&n.geometry, i as u32, n.symbol, self.depth))
                .collect();
        } else {
            self.frontier.clear();
        }
        self.levels.push(nodes);
        Ok(())
    }

    pub fn finish(self) -> Result<Octree> {
        if !self.is_complete() {
            return Err(Error::Structure(format!(
                "stream ended inside level {} ({} of {} nodes)",
                self.levels.len(),
                self.decoded.len(),
                self.frontier.len()
            )));
        }
        Ok(Octree { depth: self.depth, levels: self.levels })
    }
}

impl TreeView for OctreeBuilder {
    fn depth(&self) -> u8 {
        self.depth
    }

    fn level_len(&self, level: u8) -> usize {
        let l = level as usize;
        if l < self.levels.len() {
            self.levels[l].len()
        } else if l == self.levels.len() {
            self.frontier.len()
        } else {
            0
        }
    }

    fn geometry(&self, node: NodeRef) -> Option<NodeGeometry> {
        let l = node.level as usize;
        let i = node.index as usize;
        if l < self.levels.len() {
            self.levels[l].get(i).map(|n| n.geometry)
        } else if l == self.levels.len() {
            self.frontier.get(i).copied()
        } else {
            None
        }
    }

    fn symbol(&self, node: NodeRef) -> Option<OccupancySymbol> {
        let l = node.level as usize;
        let i = node.index as usize;
        if l < self.levels.len() {
            self.levels[l].get(i).map(|n| n.symbol)
        } else if l == self.levels.len() {
            self.decoded.get(i).copied()
        } else {
            None
        }
    }
}
