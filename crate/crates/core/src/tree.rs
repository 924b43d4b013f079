//! Partition trees over the indices of one tensor axis.
//!
//! Every level of a [`PartitionTree`] is a partition of `0..n`, each level
//! refining the one above it. Level 0 holds the root. Node ids are assigned
//! breadth-first, so nodes of one level are contiguous and ordered by parent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::DiffusionEmbedding;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub level: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub index_set: Vec<usize>,
}

impl Node {
    pub fn size(&self) -> usize {
        self.index_set.len()
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TreeRepr", into = "TreeRepr")]
pub struct PartitionTree {
    n: usize,
    nodes: Vec<Node>,
    levels: Vec<Vec<usize>>,
    truncated: bool,
}

#[derive(Serialize, Deserialize)]
struct TreeRepr {
    n: usize,
    #[serde(default)]
    truncated: bool,
    nodes: Vec<Node>,
}

impl From<PartitionTree> for TreeRepr {
    fn from(t: PartitionTree) -> Self {
        TreeRepr {
            n: t.n,
            truncated: t.truncated,
            nodes: t.nodes,
        }
    }
}

impl TryFrom<TreeRepr> for PartitionTree {
    type Error = Error;

    fn try_from(repr: TreeRepr) -> Result<Self> {
        let depth = repr.nodes.iter().map(|n| n.level + 1).max().unwrap_or(0);
        let mut levels = vec![Vec::new(); depth];
        for (pos, node) in repr.nodes.iter().enumerate() {
            if node.id != pos {
                return Err(Error::UnsupportedTree(format!("node at position {pos} has id {}", node.id)));
            }
            levels[node.level].push(node.id);
        }
        let tree = PartitionTree {
            n: repr.n,
            nodes: repr.nodes,
            levels,
            truncated: repr.truncated,
        };
        tree.validate()?;
        Ok(tree)
    }
}

impl PartitionTree {
    /// Builds a tree from top-down levels of folders.
    ///
    /// `levels[0]` must be a single folder covering `0..n`; every later level
    /// must partition `0..n` and refine the previous one. Children keep the
    /// order in which they appear in their level.
    pub fn from_levels(n: usize, levels: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if levels.is_empty() || levels[0].len() != 1 {
            return Err(Error::UnsupportedTree("level 0 must hold exactly one folder".into()));
        }
        let mut nodes: Vec<Node> = Vec::new();
        let mut level_ids: Vec<Vec<usize>> = Vec::new();
        let mut owner = vec![usize::MAX; n];

        for (l, folders) in levels.into_iter().enumerate() {
            let mut seen = vec![false; n];
            let mut entries: Vec<(Option<usize>, Vec<usize>)> = Vec::with_capacity(folders.len());
            for mut folder in folders {
                if folder.is_empty() {
                    return Err(Error::UnsupportedTree(format!("empty folder at level {l}")));
                }
                for &i in &folder {
                    if i >= n || seen[i] {
                        return Err(Error::UnsupportedTree(format!("level {l} is not a partition of 0..{n}")));
                    }
                    seen[i] = true;
                }
                let parent = if l == 0 { None } else { Some(owner[folder[0]]) };
                if let Some(p) = parent {
                    if folder.iter().any(|&i| owner[i] != p) {
                        return Err(Error::UnsupportedTree(format!("folder at level {l} straddles two parents")));
                    }
                }
                folder.sort_unstable();
                entries.push((parent, folder));
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::UnsupportedTree(format!("level {l} does not cover 0..{n}")));
            }
            entries.sort_by_key(|(p, _)| *p);
            let mut ids = Vec::with_capacity(entries.len());
            for (parent, folder) in entries {
                let id = nodes.len();
                if let Some(p) = parent {
                    nodes[p].children.push(id);
                }
                for &i in &folder {
                    owner[i] = id;
                }
                nodes.push(Node {
                    id,
                    level: l,
                    parent,
                    children: Vec::new(),
                    index_set: folder,
                });
                ids.push(id);
            }
            level_ids.push(ids);
        }
        let truncated = level_ids
            .last()
            .map(|ids| ids.iter().any(|&id| nodes[id].size() > 1))
            .unwrap_or(false);
        Ok(PartitionTree {
            n,
            nodes,
            levels: level_ids,
            truncated,
        })
    }

    /// Root-only tree; the root is also the single leaf unless `n > 1`.
    pub fn trivial(n: usize) -> Result<Self> {
        let all: Vec<usize> = (0..n).collect();
        if n <= 1 {
            return Self::from_levels(n, vec![vec![all]]);
        }
        Self::from_levels(n, vec![vec![all], (0..n).map(|i| vec![i]).collect()])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    /// Node ids per level, root level first.
    pub fn levels(&self) -> &[Vec<usize>] {
        &self.levels
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn is_truncated(&self) -> bool {
        self.truncated
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::UnsupportedTree(msg));
        if self.nodes.is_empty() || self.levels.is_empty() {
            return bad("tree has no nodes".into());
        }
        if self.root().index_set != (0..self.n).collect::<Vec<_>>() || self.root().parent.is_some() {
            return bad("root must cover 0..n".into());
        }
        for (l, ids) in self.levels.iter().enumerate() {
            let mut seen = vec![false; self.n];
            for &id in ids {
                let node = &self.nodes[id];
                if node.level != l {
                    return bad(format!("node {id} listed at level {l} but tagged {}", node.level));
                }
                for &i in &node.index_set {
                    if i >= self.n || seen[i] {
                        return bad(format!("level {l} is not a partition"));
                    }
                    seen[i] = true;
                }
            }
            if seen.iter().any(|s| !s) {
                return bad(format!("level {l} does not cover 0..n"));
            }
        }
        for node in &self.nodes {
            if node.index_set.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("node {} index set is not sorted", node.id));
            }
            if node.is_leaf() {
                if node.level + 1 != self.depth() {
                    return bad(format!("leaf {} is above the finest level", node.id));
                }
                if node.size() > 1 && !self.truncated {
                    return bad(format!("leaf {} is not a singleton", node.id));
                }
                continue;
            }
            let mut union: Vec<usize> = Vec::with_capacity(node.size());
            for &c in &node.children {
                let child = self.nodes.get(c).ok_or_else(|| Error::UnsupportedTree(format!("dangling child {c}")))?;
                if child.parent != Some(node.id) || child.level != node.level + 1 {
                    return bad(format!("child {c} does not point back to {}", node.id));
                }
                union.extend_from_slice(&child.index_set);
            }
            union.sort_unstable();
            if union != node.index_set {
                return bad(format!("children of {} do not partition it", node.id));
            }
        }
        Ok(())
    }

    /// Depth-first, left-to-right order of the leaf indices.
    pub fn leaf_order(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n);
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if node.is_leaf() {
                out.extend_from_slice(&node.index_set);
            } else {
                stack.extend(node.children.iter().rev());
            }
        }
        out
    }
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (pos, &p) in perm.iter().enumerate() {
        inv[p] = pos;
    }
    inv
}

/// Balanced binary tree whose level `j` holds the dyadic intervals of length `n / 2^j`.
pub fn build_dyadic_tree(n: usize) -> Result<PartitionTree> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Shape(format!("dyadic tree needs a power of two, got {n}")));
    }
    let m = n.trailing_zeros() as usize;
    let levels = (0..=m)
        .map(|j| {
            let width = n >> j;
            (0..1usize << j).map(|k| (k * width..(k + 1) * width).collect()).collect()
        })
        .collect();
    PartitionTree::from_levels(n, levels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// Initial merge radius as a multiple of the median pairwise diffusion distance.
    pub linkage_scale: f64,
    /// Radius growth per level.
    pub scale_growth: f64,
    /// Cap on the number of merge levels; `None` means `n`.
    pub max_levels: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            linkage_scale: 0.5,
            scale_growth: 2.0,
            max_levels: None,
        }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        if self.linkage_scale <= 0.0 || !self.linkage_scale.is_finite() {
            return Err(Error::Config("linkage_scale must be positive".into()));
        }
        if self.scale_growth <= 1.0 || !self.scale_growth.is_finite() {
            return Err(Error::Config("scale_growth must exceed 1".into()));
        }
        if self.max_levels == Some(0) {
            return Err(Error::Config("max_levels must be positive".into()));
        }
        Ok(())
    }

    fn max_levels_for(&self, n: usize) -> usize {
        self.max_levels
            .unwrap_or(n)
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Bottom-up tree over the points of a diffusion embedding.
///
/// Starting from singletons, each level merges every pair of folders that are
/// mutual nearest neighbours by centroid distance and lie within the current
/// radius. The radius starts at `linkage_scale` times the median
/// pairwise diffusion distance and grows by `scale_growth` per round.
pub fn build_flexible_tree(e: &DiffusionEmbedding, p: &TreeParams) -> Result<PartitionTree> {
    p.validate()?;
    let n = e.n();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if n == 1 {
        return PartitionTree::trivial(1);
    }
    let coords = e.coordinates();
    let point = |i: usize| coords.row(i).to_vec();

    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let pi = point(i);
        for j in i + 1..n {
            dists.push(euclid(&pi, &point(j)));
        }
    }
    let positive: Vec<f64> = dists.iter().copied().filter(|&d| d > 0.0).collect();
    let med = crate::spectral::median(&mut dists).unwrap_or(0.0);
    let mut radius = p.linkage_scale * med;
    if radius == 0.0 && !positive.is_empty() {
        radius = p.linkage_scale * positive.iter().sum::<f64>() / positive.len() as f64;
    }

    let mut folders: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut centroids: Vec<Vec<f64>> = (0..n).map(point).collect();
    let mut bottom_up = vec![folders.clone()];
    let max_levels = p.max_levels_for(n);
    let mut created = 0;
    let mut rounds = 0;

    while folders.len() > 1 && created < max_levels && rounds < max_levels + 64 {
        rounds += 1;
        let m = folders.len();
        let nearest: Vec<Option<(usize, f64)>> = (0..m)
            .map(|u| {
                (0..m)
                    .filter(|&v| v != u)
                    .map(|v| (v, euclid(&centroids[u], &centroids[v])))
                    .fold(None, |best: Option<(usize, f64)>, (v, d)| match best {
                        Some((_, bd)) if bd <= d => best,
                        _ => Some((v, d)),
                    })
            })
            .collect();
        let mut taken = vec![false; m];
        let mut groups: Vec<Vec<usize>> = Vec::with_capacity(m);
        for u in 0..m {
            if let Some((v, d)) = nearest[u] {
                if u < v && d <= radius && nearest[v].is_some_and(|(w, _)| w == u) {
                    taken[u] = true;
                    taken[v] = true;
                    groups.push(vec![u, v]);
                }
            }
        }
        groups.extend((0..m).filter(|&u| !taken[u]).map(|u| vec![u]));
        if groups.len() < m {
            let mut merged: Vec<(Vec<usize>, Vec<f64>)> = groups
                .iter()
                .map(|g| {
                    let mut idx: Vec<usize> = g.iter().flat_map(|&f| folders[f].iter().copied()).collect();
                    idx.sort_unstable();
                    let mut c = vec![0.0; coords.ncols()];
                    for &i in &idx {
                        for (a, b) in c.iter_mut().zip(coords.row(i)) {
                            *a += b;
                        }
                    }
                    c.iter_mut().for_each(|a| *a /= idx.len() as f64);
                    (idx, c)
                })
                .collect();
            merged.sort_by_key(|(idx, _)| idx[0]);
            (folders, centroids) = merged.into_iter().unzip();
            bottom_up.push(folders.clone());
            created += 1;
        }
        radius *= p.scale_growth;
    }
    if folders.len() > 1 {
        bottom_up.push(vec![(0..n).collect()]);
    }
    bottom_up.reverse();
    PartitionTree::from_levels(n, bottom_up)
}
