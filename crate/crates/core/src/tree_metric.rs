//! Tree-based earth mover's distance between 2-d slices of a tensor.
//!
//! For a pair of partition trees `(T_a, T_b)` over the rows and columns of a
//! slice, the distance between `A` and `B` is
//!
//! ```text
//! Σ_{a ∈ T_a, b ∈ T_b}  |mean(A − B over a × b)| · (|a||b| / (n_a n_b))^β
//! ```
//!
//! summed over every node pair of the two trees, at all levels.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::Tensor3;
use crate::tree::{Node, PartitionTree};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmdConfig {
    /// Exponent of the fractional-support weight.
    pub beta: f64,
    /// Inclusive range of tree levels a node must lie in to contribute.
    pub include_levels: Option<(usize, usize)>,
}

impl Default for EmdConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            include_levels: None,
        }
    }
}

impl EmdConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be finite and nonnegative, got {}", self.beta)));
        }
        Ok(())
    }

    fn includes(&self, level: usize) -> bool {
        self.include_levels
            .map(|(lo, hi)| lo <= level && level <= hi)
            .unwrap_or(true)
    }
}

/// Mean of `a` over `qnode × knode`.
pub fn node_mean(a: ArrayView2<f64>, qnode: &Node, knode: &Node) -> f64 {
    let mut sum = 0.0;
    for &q in &qnode.index_set {
        for &k in &knode.index_set {
            sum += a[[q, k]];
        }
    }
    sum / (qnode.size() * knode.size()) as f64
}

/// Sums of `rows` of a matrix over every node of `tree`, one output row per node.
fn node_row_sums(m: ArrayView2<f64>, tree: &PartitionTree) -> Array2<f64> {
    let nodes = tree.nodes();
    let mut sums = Array2::zeros((nodes.len(), m.ncols()));
    // children always carry larger ids than their parent
    for node in nodes.iter().rev() {
        let mut acc = sums.row(node.id).to_owned();
        if node.is_leaf() {
            for &i in &node.index_set {
                acc += &m.row(i);
            }
        } else {
            for &c in &node.children {
                acc += &sums.row(c);
            }
        }
        sums.row_mut(node.id).assign(&acc);
    }
    sums
}

/// Matrix of node means over every `(row node, column node)` pair.
pub fn node_mean_matrix(m: ArrayView2<f64>, rows: &PartitionTree, cols: &PartitionTree) -> Array2<f64> {
    let by_row = node_row_sums(m, rows);
    let both = node_row_sums(by_row.t(), cols);
    let mut means = both.reversed_axes().as_standard_layout().into_owned();
    for (a, mut row) in means.axis_iter_mut(Axis(0)).enumerate() {
        let sa = rows.node(a).size() as f64;
        for (b, v) in row.iter_mut().enumerate() {
            *v /= sa * cols.node(b).size() as f64;
        }
    }
    means
}

/// Weights of every node pair, zero where the level filter excludes the pair.
fn pair_weights(rows: &PartitionTree, cols: &PartitionTree, cfg: &EmdConfig) -> Array2<f64> {
    let (na, nb) = (rows.n() as f64, cols.n() as f64);
    Array2::from_shape_fn((rows.nodes().len(), cols.nodes().len()), |(a, b)| {
        let (ra, cb) = (rows.node(a), cols.node(b));
        if cfg.includes(ra.level) && cfg.includes(cb.level) {
            ((ra.size() as f64 * cb.size() as f64) / (na * nb)).powf(cfg.beta)
        } else {
            0.0
        }
    })
}

fn check_dims(m: ArrayView2<f64>, rows: &PartitionTree, cols: &PartitionTree) -> Result<()> {
    if m.dim() != (rows.n(), cols.n()) {
        return Err(Error::Shape(format!(
            "matrix is {:?} but trees cover ({}, {})",
            m.dim(),
            rows.n(),
            cols.n()
        )));
    }
    Ok(())
}

pub fn tree_emd(
    ap: ArrayView2<f64>,
    aj: ArrayView2<f64>,
    tq: &PartitionTree,
    tk: &PartitionTree,
    cfg: &EmdConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_dims(ap, tq, tk)?;
    check_dims(aj, tq, tk)?;
    let diff = &ap - &aj;
    let means = node_mean_matrix(diff.view(), tq, tk);
    let weights = pair_weights(tq, tk, cfg);
    Ok(means.iter().zip(weights.iter()).map(|(m, w)| m.abs() * w).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorAxis {
    Query,
    Key,
    Head,
}

impl TensorAxis {
    pub fn name(self) -> &'static str {
        match self {
            TensorAxis::Query => "query",
            TensorAxis::Key => "key",
            TensorAxis::Head => "head",
        }
    }

    pub fn len(self, x: &Tensor3) -> usize {
        match self {
            TensorAxis::Query => x.n_q(),
            TensorAxis::Key => x.n_k(),
            TensorAxis::Head => x.n_h(),
        }
    }

    fn ndarray_axis(self) -> Axis {
        match self {
            TensorAxis::Query => Axis(0),
            TensorAxis::Key => Axis(1),
            TensorAxis::Head => Axis(2),
        }
    }
}

/// The slice of `x` at `index` along `axis`; the remaining axes keep their order.
pub fn axis_slice(x: &Tensor3, axis: TensorAxis, index: usize) -> ArrayView2<'_, f64> {
    x.data().index_axis(axis.ndarray_axis(), index)
}

/// All-pairs tree EMD between the slices of `x` along `axis`.
///
/// `rows` and `cols` are the trees of the two remaining axes, in tensor order
/// (for the head axis: query then key; for queries: key then head; for keys:
/// query then head).
pub fn pairwise_emd(
    x: &Tensor3,
    axis: TensorAxis,
    rows: &PartitionTree,
    cols: &PartitionTree,
    cfg: &EmdConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let count = axis.len(x);
    check_dims(axis_slice(x, axis, 0), rows, cols)?;

    let weights = pair_weights(rows, cols, cfg);
    let kept: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(i, w)| (i, *w))
        .collect();
    let profiles: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|p| {
            let means = node_mean_matrix(axis_slice(x, axis, p), rows, cols);
            let flat = means.as_slice().expect("standard layout");
            kept.iter().map(|&(i, _)| flat[i]).collect()
        })
        .collect();
    let w: Vec<f64> = kept.iter().map(|&(_, w)| w).collect();

    let upper: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|p| {
            (p + 1..count)
                .map(|j| {
                    profiles[p]
                        .iter()
                        .zip(&profiles[j])
                        .zip(&w)
                        .map(|((a, b), w)| (a - b).abs() * w)
                        .sum()
                })
                .collect()
        })
        .collect();
    let mut e = Array2::zeros((count, count));
    for (p, row) in upper.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            let j = p + 1 + off;
            e[[p, j]] = v;
            e[[j, p]] = v;
        }
    }
    Ok(e)
}
