//! Alternating tree refinement over the three axes of an attention tensor.
//!
//! Query and key trees are seeded from cosine similarities of the unfolded
//! tensor. Each iteration then rebuilds the head tree from tree-EMD
//! distances between head slices under the current query and key trees,
//! followed by the query tree and the key tree in the same way.

use log::{debug, warn};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{cosine_affinity, default_n_ev, gaussian_from_emd, markov_embed, AffinityMatrix, DiffusionEmbedding};
use crate::tensor_io::Tensor3;
use crate::tree::{build_flexible_tree, PartitionTree, TreeParams};
use crate::tree_metric::{pairwise_emd, EmdConfig, TensorAxis};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuestionnaireConfig {
    pub n_iters: usize,
    pub tree_params: TreeParams,
    pub emd_config: EmdConfig,
    /// Nontrivial embedding coordinates; `None` picks [`default_n_ev`] per axis.
    pub n_ev: Option<usize>,
    pub diffusion_time: f64,
    /// Recorded with results. Ties are broken by index, so outputs do not depend on it.
    pub seed: u64,
}

impl Default for QuestionnaireConfig {
    fn default() -> Self {
        Self {
            n_iters: 3,
            tree_params: TreeParams::default(),
            emd_config: EmdConfig::default(),
            n_ev: None,
            diffusion_time: 1.0,
            seed: 0,
        }
    }
}

impl QuestionnaireConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::Config("n_iters must be at least 1".into()));
        }
        if !(self.diffusion_time > 0.0 && self.diffusion_time.is_finite()) {
            return Err(Error::Config("diffusion time must be positive".into()));
        }
        self.tree_params.validate()?;
        self.emd_config.validate()
    }

    fn n_ev_for(&self, n: usize) -> usize {
        self.n_ev.map(|k| k.min(n.saturating_sub(1))).unwrap_or_else(|| default_n_ev(n))
    }
}

/// Tree, affinity and embedding of one axis.
#[derive(Debug, Clone)]
pub struct AxisGeometry {
    pub tree: PartitionTree,
    pub affinity: AffinityMatrix,
    pub embedding: DiffusionEmbedding,
}

#[derive(Debug, Clone)]
pub struct QuestionnaireResult {
    pub query: AxisGeometry,
    pub key: AxisGeometry,
    pub head: AxisGeometry,
    pub iterations_run: usize,
    /// `(iteration, axis)` pairs where all distances vanished and the previous tree was kept.
    pub degenerate_updates: Vec<(usize, TensorAxis)>,
}

impl QuestionnaireResult {
    pub fn geometry(&self, axis: TensorAxis) -> &AxisGeometry {
        match axis {
            TensorAxis::Query => &self.query,
            TensorAxis::Key => &self.key,
            TensorAxis::Head => &self.head,
        }
    }

    /// Leaf orders of the query, key and head trees.
    pub fn permutations(&self) -> [Vec<usize>; 3] {
        [self.query.tree.leaf_order(), self.key.tree.leaf_order(), self.head.tree.leaf_order()]
    }

    /// `x` with every axis reordered by its tree.
    pub fn organize(&self, x: &Tensor3) -> Result<Tensor3> {
        let [q, k, h] = self.permutations();
        x.permuted(&q, &k, &h)
    }
}

fn annotate(axis: TensorAxis, iteration: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Axis {
        axis: axis.name(),
        iteration,
        source: Box::new(e),
    }
}

/// Cosine similarity mapped to `[0, 1]` via `(1 + cos) / 2`.
fn shifted_cosine(rows: ndarray::ArrayView2<f64>) -> Result<AffinityMatrix> {
    let mut g = cosine_affinity(rows)?;
    g.entries.mapv_inplace(|c| 0.5 * (1.0 + c));
    Ok(g)
}

fn geometry_from(g: AffinityMatrix, cfg: &QuestionnaireConfig) -> Result<AxisGeometry> {
    let embedding = markov_embed(&g, cfg.n_ev_for(g.n()), cfg.diffusion_time)?;
    let tree = build_flexible_tree(&embedding, &cfg.tree_params)?;
    Ok(AxisGeometry {
        tree,
        affinity: g,
        embedding,
    })
}

/// Rows of the tensor unfolded along `axis`.
fn unfold(x: &Tensor3, axis: TensorAxis) -> Array2<f64> {
    let (nq, nk, nh) = x.dims();
    match axis {
        TensorAxis::Query => x.data().to_owned().into_shape_with_order((nq, nk * nh)).expect("contiguous"),
        TensorAxis::Key => {
            let swapped = x.data().view().permuted_axes([1, 0, 2]);
            swapped.as_standard_layout().into_owned().into_shape_with_order((nk, nq * nh)).expect("contiguous")
        }
        TensorAxis::Head => {
            let swapped = x.data().view().permuted_axes([2, 0, 1]);
            swapped.as_standard_layout().into_owned().into_shape_with_order((nh, nq * nk)).expect("contiguous")
        }
    }
}

fn init_geometry(x: &Tensor3, axis: TensorAxis, cfg: &QuestionnaireConfig) -> Result<AxisGeometry> {
    let g = shifted_cosine(unfold(x, axis).view())?;
    geometry_from(g, cfg)
}

/// Initial query and key trees from the unfolded tensor.
pub fn init_trees(x: &Tensor3, cfg: &QuestionnaireConfig) -> Result<(PartitionTree, PartitionTree)> {
    cfg.validate()?;
    let q = init_geometry(x, TensorAxis::Query, cfg).map_err(annotate(TensorAxis::Query, 0))?;
    let k = init_geometry(x, TensorAxis::Key, cfg).map_err(annotate(TensorAxis::Key, 0))?;
    Ok((q.tree, k.tree))
}

fn refine(
    x: &Tensor3,
    axis: TensorAxis,
    rows: &PartitionTree,
    cols: &PartitionTree,
    previous: Option<&PartitionTree>,
    cfg: &QuestionnaireConfig,
) -> Result<(AxisGeometry, bool)> {
    let e = pairwise_emd(x, axis, rows, cols, &cfg.emd_config)?;
    let all_zero = e.iter().all(|v| *v == 0.0);
    let g = gaussian_from_emd(e.view())?;
    let mut geo = geometry_from(g, cfg)?;
    let kept = match previous {
        Some(prev) if all_zero => {
            geo.tree = prev.clone();
            true
        }
        _ => false,
    };
    Ok((geo, kept))
}

pub fn organize3d(x: &Tensor3, cfg: &QuestionnaireConfig) -> Result<QuestionnaireResult> {
    cfg.validate()?;
    let mut query = init_geometry(x, TensorAxis::Query, cfg).map_err(annotate(TensorAxis::Query, 0))?;
    let mut key = init_geometry(x, TensorAxis::Key, cfg).map_err(annotate(TensorAxis::Key, 0))?;
    let mut head: Option<AxisGeometry> = None;
    let mut degenerate_updates = Vec::new();

    for it in 1..=cfg.n_iters {
        let (h, kept) = refine(x, TensorAxis::Head, &query.tree, &key.tree, head.as_ref().map(|g| &g.tree), cfg)
            .map_err(annotate(TensorAxis::Head, it))?;
        if kept {
            degenerate_updates.push((it, TensorAxis::Head));
        }
        let head_tree = &h.tree;

        let (q, kept) = refine(x, TensorAxis::Query, &key.tree, head_tree, Some(&query.tree), cfg)
            .map_err(annotate(TensorAxis::Query, it))?;
        if kept {
            degenerate_updates.push((it, TensorAxis::Query));
        }
        query = q;

        let (k, kept) = refine(x, TensorAxis::Key, &query.tree, head_tree, Some(&key.tree), cfg)
            .map_err(annotate(TensorAxis::Key, it))?;
        if kept {
            degenerate_updates.push((it, TensorAxis::Key));
        }
        key = k;
        head = Some(h);
        debug!("iteration {it}: depths q={} k={} h={}", query.tree.depth(), key.tree.depth(), head.as_ref().map_or(0, |g| g.tree.depth()));
    }
    if !degenerate_updates.is_empty() {
        warn!("all tree distances vanished for {} axis updates; previous trees kept", degenerate_updates.len());
    }
    Ok(QuestionnaireResult {
        query,
        key,
        head: head.expect("at least one iteration"),
        iterations_run: cfg.n_iters,
        degenerate_updates,
    })
}

#[derive(Debug, Clone)]
pub struct Organized2d {
    pub row_tree: PartitionTree,
    pub col_tree: PartitionTree,
    pub organized: Array2<f64>,
    pub row_perm: Vec<usize>,
    pub col_perm: Vec<usize>,
}

/// Organizes a single matrix by treating it as an `n_r × n_c × 1` tensor.
pub fn organize2d(m: ndarray::ArrayView2<f64>, cfg: &QuestionnaireConfig) -> Result<Organized2d> {
    let x = Tensor3::new(m.to_owned().insert_axis(Axis(2)))?;
    let r = organize3d(&x, cfg)?;
    let row_perm = r.query.tree.leaf_order();
    let col_perm = r.key.tree.leaf_order();
    let organized = m.select(Axis(0), &row_perm).select(Axis(1), &col_perm);
    Ok(Organized2d {
        row_tree: r.query.tree,
        col_tree: r.key.tree,
        organized,
        row_perm,
        col_perm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haar::{build_tree_haar, expand_bihaar, l1_entropy};
    use crate::synthetic::{shuffle_tensor, smooth_separable};
    use crate::tensor_io::is_permutation;
    use ndarray::Array1;
    use std::f64::consts::PI;

    fn first_split(t: &PartitionTree) -> Vec<Vec<usize>> {
        // skip one-child chains below the root
        let mut node = t.root();
        while node.children.len() == 1 {
            node = t.node(node.children[0]);
        }
        node.children.iter().map(|&c| t.node(c).index_set.clone()).collect()
    }

    fn total_variation_rows(m: &Array2<f64>) -> f64 {
        m.rows()
            .into_iter()
            .map(|r| r.windows(2).into_iter().map(|w| (w[1] - w[0]).abs()).sum::<f64>())
            .sum()
    }

    #[test]
    fn init_separates_two_query_groups() {
        let group = [0, 1, 0, 1, 1, 0];
        let x = Tensor3::from_fn((6, 3, 2), |(i, j, h)| {
            let v = if group[i] == 0 { 2.0 } else { -3.0 };
            v * (1.0 + 0.0 * (j + h) as f64)
        })
        .unwrap();
        let (tq, tk) = init_trees(&x, &QuestionnaireConfig::default()).unwrap();
        tq.validate().unwrap();
        tk.validate().unwrap();
        let split = first_split(&tq);
        assert_eq!(split, vec![vec![0, 2, 5], vec![1, 3, 4]]);
    }

    #[test]
    fn single_entry_tensor() {
        let x = Tensor3::from_fn((1, 1, 1), |_| 0.5).unwrap();
        let (tq, tk) = init_trees(&x, &QuestionnaireConfig::default()).unwrap();
        assert_eq!((tq.nodes().len(), tk.nodes().len()), (1, 1));
        let r = organize3d(&x, &QuestionnaireConfig::default()).unwrap();
        assert_eq!(r.head.tree.nodes().len(), 1);
    }

    #[test]
    fn zero_row_is_reported_with_axis() {
        let x = Tensor3::from_fn((3, 2, 2), |(i, _, _)| i as f64).unwrap();
        let err = organize3d(&x, &QuestionnaireConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Axis { axis: "query", iteration: 0, .. }));
        assert!(matches!(err.root(), Error::DegenerateRow { index: 0 }));
    }

    #[test]
    fn iteration_counts_keep_invariants() {
        let (x, _) = shuffle_tensor(&smooth_separable(8, 8, 4), 1);
        for n_iters in [1, 2] {
            let cfg = QuestionnaireConfig { n_iters, ..Default::default() };
            let r = organize3d(&x, &cfg).unwrap();
            assert_eq!(r.iterations_run, n_iters);
            for axis in [TensorAxis::Query, TensorAxis::Key, TensorAxis::Head] {
                let geo = r.geometry(axis);
                geo.tree.validate().unwrap();
                assert_eq!(geo.tree.n(), axis.len(&x));
                assert!(geo.affinity.is_symmetric(1e-12));
            }
        }
    }

    #[test]
    fn constant_tensor_falls_back() {
        let x = Tensor3::from_fn((4, 4, 3), |_| 1.0).unwrap();
        let r = organize3d(&x, &QuestionnaireConfig::default()).unwrap();
        assert!(r.head.affinity.degenerate);
        assert!(!r.degenerate_updates.is_empty());
        for axis in [TensorAxis::Query, TensorAxis::Key, TensorAxis::Head] {
            r.geometry(axis).tree.validate().unwrap();
        }
    }

    #[test]
    fn organized_is_a_permutation_and_deterministic() {
        let (x, _) = shuffle_tensor(&smooth_separable(8, 16, 4), 2);
        let cfg = QuestionnaireConfig::default();
        let r1 = organize3d(&x, &cfg).unwrap();
        let r2 = organize3d(&x, &cfg).unwrap();
        let [q, k, h] = r1.permutations();
        assert!(is_permutation(&q, 8) && is_permutation(&k, 16) && is_permutation(&h, 4));
        assert_eq!(r1.permutations(), r2.permutations());
        assert_eq!(r1.query.affinity, r2.query.affinity);
        let org = r1.organize(&x).unwrap();
        let mut a: Vec<f64> = x.data().iter().copied().collect();
        let mut b: Vec<f64> = org.data().iter().copied().collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn organizing_lowers_entropy_of_shuffled_smooth_tensor() {
        // monotone on every axis, so no two rows or columns coincide
        let clean = Tensor3::from_fn((16, 16, 4), |(i, j, h)| {
            let (x, y) = ((i as f64 + 0.5) / 16.0, (j as f64 + 0.5) / 16.0);
            x * x * (PI * y / 2.0).cos() * (1.0 + h as f64 / 4.0)
        })
        .unwrap();
        let (x, _) = shuffle_tensor(&clean, 0);
        let r = organize3d(&x, &QuestionnaireConfig::default()).unwrap();
        let org = r.organize(&x).unwrap();
        let b = build_tree_haar(&crate::tree::build_dyadic_tree(16).unwrap()).unwrap();
        let median_entropy = |t: &Tensor3| {
            let mut e: Vec<f64> = (0..t.n_h())
                .map(|h| l1_entropy(&expand_bihaar(t.slice_head(h).unwrap().view(), &b, &b).unwrap(), 100).unwrap())
                .collect();
            e.sort_by(f64::total_cmp);
            0.5 * (e[(e.len() - 1) / 2] + e[e.len() / 2])
        };
        let (e_org, e_shuf, e_clean) = (median_entropy(&org), median_entropy(&x), median_entropy(&clean));
        assert!(e_org <= e_shuf, "organized {e_org} shuffled {e_shuf} clean {e_clean}");
    }

    #[test]
    fn organize2d_examples() {
        let one = organize2d(Array2::from_elem((1, 1), 4.0).view(), &QuestionnaireConfig::default()).unwrap();
        assert_eq!(one.organized, Array2::from_elem((1, 1), 4.0));
        assert_eq!((one.row_perm.clone(), one.col_perm.clone()), (vec![0], vec![0]));

        // smooth and sorted input
        let n = 16;
        let m = Array2::from_shape_fn((n, n), |(i, j)| 1.0 + ((i as f64 - j as f64) / n as f64).powi(2));
        let o = organize2d(m.view(), &QuestionnaireConfig::default()).unwrap();
        let tv_in = total_variation_rows(&m);
        let tv_out = total_variation_rows(&o.organized);
        assert!(tv_out <= tv_in * (1.0 + 1e-12), "tv {tv_in} -> {tv_out}");

        // shuffled rank-1 outer product of monotone vectors
        let u = Array1::from_shape_fn(n, |i| 1.0 + i as f64);
        let v = Array1::from_shape_fn(n, |j| 0.5 + (j as f64).sqrt());
        let uv = u.view().insert_axis(Axis(1)).dot(&v.view().insert_axis(Axis(0)));
        let perms = crate::synthetic::random_permutations((n, n, 1), 9);
        let shuffled = uv.select(Axis(0), &perms[0]).select(Axis(1), &perms[1]);
        let o = organize2d(shuffled.view(), &QuestionnaireConfig::default()).unwrap();
        let b = build_tree_haar(&crate::tree::build_dyadic_tree(n).unwrap()).unwrap();
        let frac = |m: &Array2<f64>| {
            let cs = expand_bihaar(m.view(), &b, &b).unwrap();
            let mut sq: Vec<f64> = cs.entries().iter().map(|e| e.value * e.value).collect();
            sq.sort_by(|a, b| b.total_cmp(a));
            sq[..sq.len() / 10].iter().sum::<f64>() / sq.iter().sum::<f64>()
        };
        assert!(frac(&o.organized) >= frac(&shuffled));
        // every row folder holds a contiguous run of u values
        let rank_of_row = |r: usize| perms[0][r];
        for node in o.row_tree.nodes() {
            let mut ranks: Vec<usize> = node.index_set.iter().map(|&r| rank_of_row(r)).collect();
            ranks.sort_unstable();
            assert_eq!(ranks.last().unwrap() - ranks[0] + 1, ranks.len(), "folder {ranks:?}");
        }
    }
}
