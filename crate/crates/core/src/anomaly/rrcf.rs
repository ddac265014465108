//! Robust random cut trees over a sliding window of points.
//!
//! Each tree is a binary partition of the points it holds. A new point walks
//! down from the root; at every node a cut is drawn inside the node's
//! bounding box extended by the point, with the dimension chosen in
//! proportion to its side length. If the cut separates the point from the
//! node's box, a new branch is spliced in above the node; otherwise the point
//! follows the existing cut. Identical points share one leaf with a
//! multiplicity.
//!
//! The anomaly score of a point is its collusive displacement: the maximum,
//! over the point's ancestors, of the sibling subtree size divided by the size
//! of the subtree containing the point.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

type NodeId = usize;

#[derive(Debug, Clone)]
enum Node<T> {
    Leaf {
        point: Vec<T>,
        count: usize,
        parent: Option<NodeId>,
    },
    Branch {
        dim: usize,
        cut: T,
        left: NodeId,
        right: NodeId,
        parent: Option<NodeId>,
        count: usize,
        lo: Vec<T>,
        hi: Vec<T>,
    },
}

impl<T: Real> Node<T> {
    fn count(&self) -> usize {
        match self {
            Node::Leaf { count, .. } | Node::Branch { count, .. } => *count,
        }
    }

    fn parent(&self) -> Option<NodeId> {
        match self {
            Node::Leaf { parent, .. } | Node::Branch { parent, .. } => *parent,
        }
    }

    fn set_parent(&mut self, p: Option<NodeId>) {
        match self {
            Node::Leaf { parent, .. } | Node::Branch { parent, .. } => *parent = p,
        }
    }

    fn bounds(&self) -> (&[T], &[T]) {
        match self {
            Node::Leaf { point, .. } => (point, point),
            Node::Branch { lo, hi, .. } => (lo, hi),
        }
    }
}

/// A single random cut tree.
#[derive(Debug, Clone)]
pub struct RrcfTree<T> {
    dim: usize,
    nodes: Vec<Option<Node<T>>>,
    free: Vec<NodeId>,
    root: Option<NodeId>,
    leaves: HashMap<u64, NodeId>,
    rng: ChaCha8Rng,
}

impl<T: Real> RrcfTree<T> {
    pub fn new(dim: usize, seed: u64) -> Self {
        RrcfTree {
            dim,
            nodes: Vec::new(),
            free: Vec::new(),
            root: None,
            leaves: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of points held, counting duplicates.
    pub fn len(&self) -> usize {
        self.root.map_or(0, |r| self.node(r).count())
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_none()
    }

    pub fn contains(&self, key: u64) -> bool {
        self.leaves.contains_key(&key)
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        self.nodes[id].as_ref().expect("live node")
    }

    fn node_mut(&mut self, id: NodeId) -> &mut Node<T> {
        self.nodes[id].as_mut().expect("live node")
    }

    fn alloc(&mut self, node: Node<T>) -> NodeId {
        match self.free.pop() {
            Some(id) => {
                self.nodes[id] = Some(node);
                id
            }
            None => {
                self.nodes.push(Some(node));
                self.nodes.len() - 1
            }
        }
    }

    fn release(&mut self, id: NodeId) {
        self.nodes[id] = None;
        self.free.push(id);
    }

    fn replace_child(&mut self, parent: Option<NodeId>, old: NodeId, new: NodeId) {
        match parent {
            None => self.root = Some(new),
            Some(p) => match self.node_mut(p) {
                Node::Branch { left, right, .. } => {
                    if *left == old {
                        *left = new;
                    } else {
                        *right = new;
                    }
                }
                Node::Leaf { .. } => unreachable!("leaf as parent"),
            },
        }
        self.node_mut(new).set_parent(parent);
    }

    /// Descends along existing cuts to the leaf that would hold `point`.
    fn find_leaf(&self, point: &[T]) -> Option<NodeId> {
        let mut id = self.root?;
        loop {
            match self.node(id) {
                Node::Leaf { .. } => return Some(id),
                Node::Branch {
                    dim, cut, left, right, ..
                } => id = if point[*dim] <= *cut { *left } else { *right },
            }
        }
    }

    /// Recomputes counts and bounding boxes from `start` up to the root.
    fn refresh_upwards(&mut self, mut cursor: Option<NodeId>) {
        while let Some(id) = cursor {
            let (left, right) = match self.node(id) {
                Node::Branch { left, right, .. } => (*left, *right),
                Node::Leaf { .. } => unreachable!("leaf on ancestor path"),
            };
            let count = self.node(left).count() + self.node(right).count();
            let (llo, lhi) = self.node(left).bounds();
            let (rlo, rhi) = self.node(right).bounds();
            let new_lo: Vec<T> = llo.iter().zip(rlo).map(|(a, b)| a.min(*b)).collect();
            let new_hi: Vec<T> = lhi.iter().zip(rhi).map(|(a, b)| a.max(*b)).collect();
            if let Node::Branch {
                count: c,
                lo,
                hi,
                parent,
                ..
            } = self.node_mut(id)
            {
                *c = count;
                *lo = new_lo;
                *hi = new_hi;
                cursor = *parent;
            }
        }
    }

    /// Draws a cut over the box spanned by `lo`/`hi` and `point`.
    fn draw_cut(&mut self, point: &[T], lo: &[T], hi: &[T]) -> (usize, T) {
        let spans: Vec<T> = (0..self.dim)
            .map(|d| hi[d].max(point[d]) - lo[d].min(point[d]))
            .collect();
        let total = spans.iter().fold(T::zero(), |acc, s| acc + *s);
        let r = T::from_f64(self.rng.random::<f64>()).expect("unit float") * total;
        let mut acc = T::zero();
        for d in 0..self.dim {
            acc = acc + spans[d];
            if acc >= r && spans[d] > T::zero() {
                return (d, lo[d].min(point[d]) + acc - r);
            }
        }
        let d = (0..self.dim).rev().find(|&d| spans[d] > T::zero()).unwrap_or(0);
        (d, hi[d].max(point[d]))
    }

    pub fn insert(&mut self, point: Vec<T>, key: u64) -> Result<()> {
        if point.len() != self.dim {
            return Err(Error::invalid(format!(
                "point has {} dimensions, tree expects {}",
                point.len(),
                self.dim
            )));
        }
        if point.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point has non-finite coordinates"));
        }
        if self.leaves.contains_key(&key) {
            return Err(Error::invalid(format!("key {key} already in tree")));
        }

        let Some(root) = self.root else {
            let id = self.alloc(Node::Leaf {
                point,
                count: 1,
                parent: None,
            });
            self.root = Some(id);
            self.leaves.insert(key, id);
            return Ok(());
        };

        if let Some(leaf) = self.find_leaf(&point) {
            if let Node::Leaf { point: p, count, parent } = self.node_mut(leaf) {
                if *p == point {
                    *count += 1;
                    let parent = *parent;
                    self.leaves.insert(key, leaf);
                    self.refresh_upwards(parent);
                    return Ok(());
                }
            }
        }

        let mut id = root;
        loop {
            let (lo, hi) = {
                let (lo, hi) = self.node(id).bounds();
                (lo.to_vec(), hi.to_vec())
            };
            let (dim, cut) = self.draw_cut(&point, &lo, &hi);
            let below = point[dim] < lo[dim] && cut <= lo[dim];
            let above = point[dim] > hi[dim] && cut >= hi[dim];
            if below || above {
                let parent = self.node(id).parent();
                let leaf = self.alloc(Node::Leaf {
                    point: point.clone(),
                    count: 1,
                    parent: None,
                });
                let (left, right, cut) = if below {
                    (leaf, id, point[dim])
                } else {
                    (id, leaf, hi[dim])
                };
                let branch = self.alloc(Node::Branch {
                    dim,
                    cut,
                    left,
                    right,
                    parent,
                    count: 0,
                    lo: lo.clone(),
                    hi: hi.clone(),
                });
                self.replace_child(parent, id, branch);
                self.node_mut(leaf).set_parent(Some(branch));
                self.node_mut(id).set_parent(Some(branch));
                self.leaves.insert(key, leaf);
                self.refresh_upwards(Some(branch));
                return Ok(());
            }
            id = match self.node(id) {
                Node::Branch {
                    dim: d,
                    cut: c,
                    left,
                    right,
                    ..
                } => {
                    if point[*d] <= *c {
                        *left
                    } else {
                        *right
                    }
                }
                Node::Leaf { .. } => unreachable!("cut inside a leaf's degenerate box"),
            };
        }
    }

    /// Removes one occurrence of the point stored under `key`.
    pub fn forget(&mut self, key: u64) -> Option<Vec<T>> {
        let leaf = self.leaves.remove(&key)?;
        let (point, count, parent) = match self.node(leaf) {
            Node::Leaf {
                point,
                count,
                parent,
            } => (point.clone(), *count, *parent),
            Node::Branch { .. } => unreachable!("key maps to branch"),
        };
        if count > 1 {
            if let Node::Leaf { count, .. } = self.node_mut(leaf) {
                *count -= 1;
            }
            self.refresh_upwards(parent);
            return Some(point);
        }
        self.release(leaf);
        match parent {
            None => self.root = None,
            Some(p) => {
                let sibling = match self.node(p) {
                    Node::Branch { left, right, .. } => {
                        if *left == leaf {
                            *right
                        } else {
                            *left
                        }
                    }
                    Node::Leaf { .. } => unreachable!(),
                };
                let grandparent = self.node(p).parent();
                self.replace_child(grandparent, p, sibling);
                self.release(p);
                self.refresh_upwards(grandparent);
            }
        }
        Some(point)
    }

    /// Collusive displacement of the point stored under `key`.
    pub fn codisp(&self, key: u64) -> Option<T> {
        let mut id = *self.leaves.get(&key)?;
        let mut best = T::zero();
        while let Some(parent) = self.node(id).parent() {
            let sibling = match self.node(parent) {
                Node::Branch { left, right, .. } => {
                    if *left == id {
                        *right
                    } else {
                        *left
                    }
                }
                Node::Leaf { .. } => unreachable!(),
            };
            let displaced = T::from_usize(self.node(sibling).count()).expect("count");
            let colluders = T::from_usize(self.node(id).count()).expect("count");
            best = best.max(displaced / colluders);
            id = parent;
        }
        Some(best)
    }

    /// Distinct leaf points with their multiplicities, sorted.
    pub fn leaf_multiset(&self) -> Vec<(Vec<T>, usize)> {
        let mut out: Vec<(Vec<T>, usize)> = self
            .nodes
            .iter()
            .flatten()
            .filter_map(|n| match n {
                Node::Leaf { point, count, .. } => Some((point.clone(), *count)),
                Node::Branch { .. } => None,
            })
            .collect();
        out.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite points"));
        out
    }

    /// Verifies parent links, counts, bounding boxes and cut consistency.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let Some(root) = self.root else {
            return if self.leaves.is_empty() {
                Ok(())
            } else {
                Err("empty tree with registered keys".into())
            };
        };
        if self.node(root).parent().is_some() {
            return Err("root has a parent".into());
        }
        let mut stack = vec![root];
        let mut leaf_total = 0;
        while let Some(id) = stack.pop() {
            match self.node(id) {
                Node::Leaf { count, .. } => {
                    if *count == 0 {
                        return Err(format!("leaf {id} has zero multiplicity"));
                    }
                    leaf_total += count;
                }
                Node::Branch {
                    dim,
                    cut,
                    left,
                    right,
                    count,
                    lo,
                    hi,
                    ..
                } => {
                    for child in [*left, *right] {
                        if self.node(child).parent() != Some(id) {
                            return Err(format!("child {child} does not point back to {id}"));
                        }
                    }
                    let l = self.node(*left);
                    let r = self.node(*right);
                    if l.count() + r.count() != *count {
                        return Err(format!("branch {id} count mismatch"));
                    }
                    let (llo, lhi) = l.bounds();
                    let (rlo, rhi) = r.bounds();
                    for d in 0..self.dim {
                        if lo[d] != llo[d].min(rlo[d]) || hi[d] != lhi[d].max(rhi[d]) {
                            return Err(format!("branch {id} box is not the union of its children"));
                        }
                    }
                    if !(lhi[*dim] <= *cut && rlo[*dim] > *cut) {
                        return Err(format!("branch {id} cut does not separate its children"));
                    }
                    stack.push(*left);
                    stack.push(*right);
                }
            }
        }
        let keyed = self.leaves.len();
        if leaf_total != keyed {
            return Err(format!("{leaf_total} points in leaves but {keyed} keys"));
        }
        Ok(())
    }
}

fn default_trees() -> usize {
    40
}
fn default_window() -> usize {
    256
}
fn default_shingle() -> usize {
    4
}

/// Structural parameters of a forest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestConfig {
    #[serde(default = "default_trees")]
    pub num_trees: usize,
    #[serde(default = "default_window")]
    pub window_size: usize,
    #[serde(default = "default_shingle")]
    pub shingle_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            num_trees: default_trees(),
            window_size: default_window(),
            shingle_size: default_shingle(),
            seed: 0,
        }
    }
}

/// Derives an independent 64-bit seed for sub-stream `index` (splitmix64).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A forest of trees, each keeping the most recent `window_size` points.
#[derive(Debug, Clone)]
pub struct RrcfForest<T> {
    config: ForestConfig,
    trees: Vec<RrcfTree<T>>,
    next_key: u64,
}

impl<T: Real> RrcfForest<T> {
    pub fn new(config: ForestConfig) -> Result<Self> {
        if config.num_trees == 0 || config.window_size == 0 || config.shingle_size == 0 {
            return Err(Error::invalid("forest sizes must be positive"));
        }
        let trees = (0..config.num_trees)
            .map(|i| RrcfTree::new(config.shingle_size, derive_seed(config.seed, i as u64)))
            .collect();
        Ok(RrcfForest {
            config,
            trees,
            next_key: 0,
        })
    }

    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn trees(&self) -> &[RrcfTree<T>] {
        &self.trees
    }

    /// Inserts a shingled point into every tree, evicting each tree's oldest
    /// point first when its window is full. Returns the forest-averaged
    /// collusive displacement of the new point.
    pub fn insert_point(&mut self, point: &[T]) -> Result<T> {
        if point.len() != self.config.shingle_size {
            return Err(Error::invalid(format!(
                "point has {} dimensions, forest expects {}",
                point.len(),
                self.config.shingle_size
            )));
        }
        if point.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point has non-finite coordinates"));
        }
        let key = self.next_key;
        self.next_key += 1;
        let window = self.config.window_size as u64;
        let total = self
            .trees
            .par_iter_mut()
            .map(|tree| -> Result<T> {
                if tree.len() as u64 >= window {
                    tree.forget(key - window);
                }
                tree.insert(point.to_vec(), key)?;
                Ok(tree.codisp(key).expect("just inserted"))
            })
            .collect::<Result<Vec<T>>>()?
            .into_iter()
            .fold(T::zero(), |acc, s| acc + s);
        Ok(total / T::from_usize(self.trees.len()).expect("tree count"))
    }
}

/// Turns a scalar stream into overlapping windows of `size` consecutive values.
pub fn shingles<T: Copy>(values: &[T], size: usize) -> impl Iterator<Item = &[T]> {
    values.windows(size.max(1))
}
