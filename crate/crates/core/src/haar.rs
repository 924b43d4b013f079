//! Orthonormal Haar bases on partition trees and their tensor products.
//!
//! A node with children of sizes `s_1, …, s_c` contributes `c − 1`
//! functions. Function `j` is constant on children `1..=j` and on child
//! `j + 1`, with zero mean and unit norm. With `S_j = s_1 + … + s_j` its
//! values are
//!
//! ```text
//!  sqrt(s_{j+1} / (S_j S_{j+1}))     on children 1..=j
//! −sqrt(S_j / (s_{j+1} S_{j+1}))     on child j+1
//! ```
//!
//! The root also carries the scaling function `1/√n`.

use std::cmp::Ordering;
use std::io::Write;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor_io::Tensor3;
use crate::tree::PartitionTree;

/// Identity of one basis function. `j = 0` marks the scaling function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct FunctionKey {
    pub node: usize,
    pub level: usize,
    pub j: usize,
    pub support: usize,
}

impl FunctionKey {
    pub fn is_scaling(&self) -> bool {
        self.j == 0
    }
}

#[derive(Debug, Clone)]
pub struct TreeHaarBasis {
    keys: Vec<FunctionKey>,
    /// One function per row.
    values: Array2<f64>,
}

impl TreeHaarBasis {
    pub fn n(&self) -> usize {
        self.values.ncols()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[FunctionKey] {
        &self.keys
    }

    pub fn key(&self, f: usize) -> FunctionKey {
        self.keys[f]
    }

    /// Matrix whose rows are the basis functions.
    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn function(&self, f: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.row(f)
    }
}

pub fn build_tree_haar(t: &PartitionTree) -> Result<TreeHaarBasis> {
    let n = t.n();
    if t.is_truncated() || t.nodes().iter().any(|nd| nd.is_leaf() && nd.size() != 1) {
        return Err(Error::UnsupportedTree("Haar basis needs singleton leaves".into()));
    }
    let mut keys = Vec::with_capacity(n);
    let mut values = Array2::zeros((n, n));
    let root = t.root();
    keys.push(FunctionKey {
        node: root.id,
        level: 0,
        j: 0,
        support: n,
    });
    values.row_mut(0).fill(1.0 / (n as f64).sqrt());

    for node in t.nodes() {
        let mut cum = 0usize;
        for (j, pair) in node.children.windows(2).enumerate() {
            let head = t.node(pair[0]);
            let next = t.node(pair[1]);
            cum += head.size();
            let s_next = next.size() as f64;
            let (sj, sj1) = (cum as f64, (cum + next.size()) as f64);
            let a = (s_next / (sj * sj1)).sqrt();
            let b = -(sj / (s_next * sj1)).sqrt();
            let row = keys.len();
            for &c in &node.children[..=j] {
                for &i in &t.node(c).index_set {
                    values[[row, i]] = a;
                }
            }
            for &i in &next.index_set {
                values[[row, i]] = b;
            }
            keys.push(FunctionKey {
                node: node.id,
                level: node.level,
                j: j + 1,
                support: cum + next.size(),
            });
        }
    }
    debug_assert_eq!(keys.len(), n);
    Ok(TreeHaarBasis { keys, values })
}

/// A tensor product of basis functions, one per axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorBasisVector {
    pub components: Vec<usize>,
    pub support_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CoefficientOrder {
    Basis,
    Support,
}

#[derive(Debug, Clone, Serialize)]
pub struct Coefficient {
    pub vector: TensorBasisVector,
    pub value: f64,
}

/// Expansion coefficients together with the keys of every axis basis.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    axes: Vec<Vec<FunctionKey>>,
    entries: Vec<Coefficient>,
    order: CoefficientOrder,
}

impl CoefficientSet {
    pub fn entries(&self) -> &[Coefficient] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn order(&self) -> CoefficientOrder {
        self.order
    }

    pub fn axis_keys(&self, axis: usize) -> &[FunctionKey] {
        &self.axes[axis]
    }

    pub fn energy(&self) -> f64 {
        self.entries.iter().map(|c| c.value * c.value).sum()
    }

    fn keys_of<'a>(&'a self, v: &'a TensorBasisVector) -> impl Iterator<Item = FunctionKey> + 'a {
        v.components.iter().zip(&self.axes).map(|(&f, keys)| keys[f])
    }

    fn support_cmp(&self, a: &TensorBasisVector, b: &TensorBasisVector) -> Ordering {
        b.support_size
            .cmp(&a.support_size)
            .then_with(|| self.keys_of(a).map(|k| k.level).cmp(self.keys_of(b).map(|k| k.level)))
            .then_with(|| self.keys_of(a).map(|k| k.node).cmp(self.keys_of(b).map(|k| k.node)))
            .then_with(|| self.keys_of(a).map(|k| k.j).cmp(self.keys_of(b).map(|k| k.j)))
    }

    /// Writes one CSV row per coefficient.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.axes.len();
        let mut header = Vec::new();
        for prefix in ["basis", "level", "node", "j"] {
            for a in 0..d {
                header.push(format!("{prefix}_{a}"));
            }
        }
        header.push("support_size".into());
        header.push("coefficient".into());
        w.write_record(&header)?;
        for c in &self.entries {
            let keys: Vec<_> = self.keys_of(&c.vector).collect();
            let mut rec: Vec<String> = c.vector.components.iter().map(|f| f.to_string()).collect();
            rec.extend(keys.iter().map(|k| k.level.to_string()));
            rec.extend(keys.iter().map(|k| k.node.to_string()));
            rec.extend(keys.iter().map(|k| k.j.to_string()));
            rec.push(c.vector.support_size.to_string());
            rec.push(format!("{:e}", c.value));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_len(n: usize, b: &TreeHaarBasis, what: &str) -> Result<()> {
    if n != b.n() {
        return Err(Error::Shape(format!("{what} axis has {n} entries but the basis covers {}", b.n())));
    }
    Ok(())
}

/// All coefficients of `m` in the basis `bq ⊗ bk`, in basis order.
pub fn expand_bihaar(m: ArrayView2<f64>, bq: &TreeHaarBasis, bk: &TreeHaarBasis) -> Result<CoefficientSet> {
    check_len(m.nrows(), bq, "row")?;
    check_len(m.ncols(), bk, "column")?;
    let c = bq.values.dot(&m).dot(&bk.values.t());
    let entries = c
        .indexed_iter()
        .map(|((u, v), &value)| Coefficient {
            vector: TensorBasisVector {
                components: vec![u, v],
                support_size: bq.keys[u].support * bk.keys[v].support,
            },
            value,
        })
        .collect();
    Ok(CoefficientSet {
        axes: vec![bq.keys.clone(), bk.keys.clone()],
        entries,
        order: CoefficientOrder::Basis,
    })
}

/// All coefficients of `x` in `bq ⊗ bk ⊗ bh`; components are ordered (query, key, head).
pub fn expand_trihaar(x: &Tensor3, bq: &TreeHaarBasis, bk: &TreeHaarBasis, bh: &TreeHaarBasis) -> Result<CoefficientSet> {
    let (nq, nk, nh) = x.dims();
    check_len(nq, bq, "query")?;
    check_len(nk, bk, "key")?;
    check_len(nh, bh, "head")?;
    let flat = x.data().view().into_shape_with_order((nq * nk, nh)).expect("contiguous tensor");
    let by_head = flat.dot(&bh.values.t()).into_shape_with_order((nq, nk, nh)).expect("same size");
    let mut c = Array3::zeros((nq, nk, nh));
    for w in 0..nh {
        let s = by_head.index_axis(Axis(2), w);
        c.index_axis_mut(Axis(2), w).assign(&bq.values.dot(&s).dot(&bk.values.t()));
    }
    let entries = c
        .indexed_iter()
        .map(|((u, v, w), &value)| Coefficient {
            vector: TensorBasisVector {
                components: vec![u, v, w],
                support_size: bq.keys[u].support * bk.keys[v].support * bh.keys[w].support,
            },
            value,
        })
        .collect();
    Ok(CoefficientSet {
        axes: vec![bq.keys.clone(), bk.keys.clone(), bh.keys.clone()],
        entries,
        order: CoefficientOrder::Basis,
    })
}

/// The `m` coefficients of largest support, largest first.
pub fn top_by_support(cs: &CoefficientSet, m: usize) -> Result<CoefficientSet> {
    if m > cs.len() {
        return Err(Error::Count {
            requested: m,
            available: cs.len(),
        });
    }
    let mut entries = cs.entries.clone();
    let cmp = |a: &Coefficient, b: &Coefficient| cs.support_cmp(&a.vector, &b.vector);
    if m > 0 && m < entries.len() {
        entries.select_nth_unstable_by(m - 1, cmp);
        entries.truncate(m);
    }
    entries.sort_by(cmp);
    entries.truncate(m);
    Ok(CoefficientSet {
        axes: cs.axes.clone(),
        entries,
        order: CoefficientOrder::Support,
    })
}

/// `Σ |c|` over the `m` coefficients of largest support.
pub fn l1_entropy(cs: &CoefficientSet, m: usize) -> Result<f64> {
    Ok(top_by_support(cs, m)?.entries.iter().map(|c| c.value.abs()).sum())
}

fn check_axes(cs: &CoefficientSet, bases: &[&TreeHaarBasis]) -> Result<()> {
    let ok = cs.axes.len() == bases.len() && cs.axes.iter().zip(bases).all(|(k, b)| k.as_slice() == b.keys());
    if !ok {
        return Err(Error::Shape("coefficients were computed in different bases".into()));
    }
    Ok(())
}

/// `Σ c · (u ⊗ v)` over the entries of `cs`.
pub fn reconstruct_matrix(cs: &CoefficientSet, bq: &TreeHaarBasis, bk: &TreeHaarBasis) -> Result<Array2<f64>> {
    check_axes(cs, &[bq, bk])?;
    let mut c = Array2::zeros((bq.len(), bk.len()));
    for e in &cs.entries {
        c[[e.vector.components[0], e.vector.components[1]]] += e.value;
    }
    Ok(bq.values.t().dot(&c).dot(&bk.values))
}

/// `Σ c · (u ⊗ v ⊗ w)` over the entries of `cs`.
pub fn reconstruct_tensor(cs: &CoefficientSet, bq: &TreeHaarBasis, bk: &TreeHaarBasis, bh: &TreeHaarBasis) -> Result<Tensor3> {
    check_axes(cs, &[bq, bk, bh])?;
    let (nq, nk, nh) = (bq.n(), bk.n(), bh.n());
    let mut c = Array3::zeros((nq, nk, nh));
    for e in &cs.entries {
        let f = &e.vector.components;
        c[[f[0], f[1], f[2]]] += e.value;
    }
    let mut out = Array3::zeros((nq, nk, nh));
    for w in 0..nh {
        let s = c.index_axis(Axis(2), w);
        out.index_axis_mut(Axis(2), w).assign(&bq.values.t().dot(&s).dot(&bk.values));
    }
    let flat = out.into_shape_with_order((nq * nk, nh)).expect("contiguous");
    let data = flat.dot(&bh.values).into_shape_with_order((nq, nk, nh)).expect("same size");
    Tensor3::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::build_dyadic_tree;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn gram_error(b: &TreeHaarBasis) -> f64 {
        let g = b.matrix().dot(&b.matrix().t());
        g.indexed_iter()
            .map(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }

    fn three_children() -> PartitionTree {
        PartitionTree::from_levels(3, vec![vec![vec![0, 1, 2]], vec![vec![0], vec![1], vec![2]]]).unwrap()
    }

    #[test]
    fn classical_haar_on_two_points() {
        let b = build_tree_haar(&build_dyadic_tree(2).unwrap()).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert_abs_diff_eq!(b.matrix(), array![[s, s], [s, -s]], epsilon = 1e-15);
        assert!(b.key(0).is_scaling());
        assert_eq!(b.key(1).support, 2);
    }

    #[test]
    fn three_equal_children() {
        let b = build_tree_haar(&three_children()).unwrap();
        assert_eq!(b.len(), 3);
        let s2 = 2f64.sqrt();
        let s6 = 6f64.sqrt();
        assert_abs_diff_eq!(b.function(1), array![1.0 / s2, -1.0 / s2, 0.0], epsilon = 1e-15);
        assert_abs_diff_eq!(b.function(2), array![1.0 / s6, 1.0 / s6, -2.0 / s6], epsilon = 1e-15);
        assert_eq!((b.key(1).support, b.key(2).support), (2, 3));
    }

    #[test]
    fn unequal_children_and_chains_stay_orthonormal() {
        let t = PartitionTree::from_levels(
            6,
            vec![
                vec![vec![0, 1, 2, 3, 4, 5]],
                vec![vec![4], vec![0, 2, 5], vec![1, 3]],
                vec![vec![4], vec![0, 2, 5], vec![1], vec![3]],
                vec![vec![4], vec![0], vec![2], vec![5], vec![1], vec![3]],
            ],
        )
        .unwrap();
        let b = build_tree_haar(&t).unwrap();
        assert_eq!(b.len(), 6);
        assert!(gram_error(&b) < 1e-12);
        for f in 1..b.len() {
            let row = b.function(f);
            assert!(row.sum().abs() < 1e-12);
            let support = row.iter().filter(|v| **v != 0.0).count();
            assert_eq!(support, b.key(f).support);
        }
    }

    #[test]
    fn truncated_tree_is_rejected() {
        let t = PartitionTree::from_levels(4, vec![vec![vec![0, 1, 2, 3]], vec![vec![0, 1], vec![2, 3]]]).unwrap();
        assert!(matches!(build_tree_haar(&t), Err(Error::UnsupportedTree(_))));
    }

    #[test]
    fn bihaar_examples() {
        let t = build_dyadic_tree(4).unwrap();
        let b = build_tree_haar(&t).unwrap();
        let c = 2.5;
        let cs = expand_bihaar(Array2::from_elem((4, 4), c).view(), &b, &b).unwrap();
        assert_eq!(cs.len(), 16);
        for e in cs.entries() {
            let expect = if e.vector.components == [0, 0] { c * 4.0 } else { 0.0 };
            assert_abs_diff_eq!(e.value, expect, epsilon = 1e-12);
        }

        let (u, v) = (b.function(2).to_owned(), b.function(3).to_owned());
        let outer = u.clone().insert_axis(Axis(1)).dot(&v.insert_axis(Axis(0)));
        let cs = expand_bihaar(outer.view(), &b, &b).unwrap();
        for e in cs.entries() {
            let expect = if e.vector.components == [2, 3] { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(e.value, expect, epsilon = 1e-12);
        }

        let top = top_by_support(&cs, 1).unwrap();
        assert_eq!(top.entries()[0].vector.components, vec![0, 0]);
        assert_eq!(top.entries()[0].vector.support_size, 16);
        assert!(matches!(expand_bihaar(Array2::zeros((4, 3)).view(), &b, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn reconstruction_and_parseval() {
        let mut rng = StdRng::seed_from_u64(5);
        let b = build_tree_haar(&build_dyadic_tree(8).unwrap()).unwrap();
        let m = Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0..1.0));
        let cs = expand_bihaar(m.view(), &b, &b).unwrap();
        let back = reconstruct_matrix(&cs, &b, &b).unwrap();
        assert!((&back - &m).iter().all(|d| d.abs() < 1e-10));
        assert_abs_diff_eq!(cs.energy(), m.iter().map(|v| v * v).sum::<f64>(), epsilon = 1e-10);

        let part = top_by_support(&cs, 20).unwrap();
        let approx = reconstruct_matrix(&part, &b, &b).unwrap();
        assert_abs_diff_eq!(approx.iter().map(|v| v * v).sum::<f64>(), part.energy(), epsilon = 1e-8);

        let flat = Array2::from_elem((8, 8), -1.25);
        let cs = expand_bihaar(flat.view(), &b, &b).unwrap();
        let top1 = reconstruct_matrix(&top_by_support(&cs, 1).unwrap(), &b, &b).unwrap();
        assert!((&top1 - &flat).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn trihaar_examples() {
        let mut rng = StdRng::seed_from_u64(6);
        let b = build_tree_haar(&build_dyadic_tree(4).unwrap()).unwrap();
        let x = Tensor3::from_fn((4, 4, 4), |_| rng.random_range(-1.0..1.0)).unwrap();
        let cs = expand_trihaar(&x, &b, &b, &b).unwrap();
        assert_eq!(cs.len(), 64);
        assert_abs_diff_eq!(cs.energy(), x.data().iter().map(|v| v * v).sum::<f64>(), epsilon = 1e-8);
        let back = reconstruct_tensor(&cs, &b, &b, &b).unwrap();
        assert!((back.data() - x.data()).iter().all(|d| d.abs() < 1e-10));

        let (u, v, w): (Array1<f64>, Array1<f64>, Array1<f64>) = (b.function(1).to_owned(), b.function(0).to_owned(), b.function(3).to_owned());
        let sep = Tensor3::from_fn((4, 4, 4), |(i, j, h)| u[i] * v[j] * w[h]).unwrap();
        let cs = expand_trihaar(&sep, &b, &b, &b).unwrap();
        for e in cs.entries() {
            let expect = if e.vector.components == [1, 0, 3] { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(e.value, expect, epsilon = 1e-12);
        }

        let c = Tensor3::from_fn((4, 4, 4), |_| 3.0).unwrap();
        let cs = expand_trihaar(&c, &b, &b, &b).unwrap();
        let nonzero: Vec<_> = cs.entries().iter().filter(|e| e.value.abs() > 1e-12).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(nonzero[0].vector.components, vec![0, 0, 0]);
    }

    #[test]
    fn support_order_and_ties() {
        let b = build_tree_haar(&build_dyadic_tree(4).unwrap()).unwrap();
        let cs = expand_bihaar(Array2::zeros((4, 4)).view(), &b, &b).unwrap();
        let all = top_by_support(&cs, 16).unwrap();
        let comps: Vec<_> = all.entries().iter().map(|e| e.vector.components.clone()).collect();
        // support 16 first (scaling/root pairs), then level-ordered ties
        assert_eq!(&comps[..4], &[vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
        let sizes: Vec<_> = all.entries().iter().map(|e| e.vector.support_size).collect();
        assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        assert!(matches!(top_by_support(&cs, 17), Err(Error::Count { requested: 17, available: 16 })));
        assert_eq!(top_by_support(&cs, 0).unwrap().len(), 0);
    }

    #[test]
    fn entropy_examples() {
        let b = build_tree_haar(&build_dyadic_tree(8).unwrap()).unwrap();
        let zero = expand_bihaar(Array2::zeros((8, 8)).view(), &b, &b).unwrap();
        assert_eq!(l1_entropy(&zero, 10).unwrap(), 0.0);

        let (u, v) = (b.function(1).to_owned(), b.function(0).to_owned());
        let unit = u.insert_axis(Axis(1)).dot(&v.insert_axis(Axis(0)));
        let cs = expand_bihaar(unit.view(), &b, &b).unwrap();
        assert_abs_diff_eq!(l1_entropy(&cs, 4).unwrap(), 1.0, epsilon = 1e-12);

        let mut rng = StdRng::seed_from_u64(7);
        let m = Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0..1.0));
        let e1 = l1_entropy(&expand_bihaar(m.view(), &b, &b).unwrap(), 12).unwrap();
        let e2 = l1_entropy(&expand_bihaar((&m * -3.0).view(), &b, &b).unwrap(), 12).unwrap();
        assert_abs_diff_eq!(e2, 3.0 * e1, epsilon = 1e-12);
    }

    #[test]
    fn entropy_is_relabeling_covariant() {
        let mut rng = StdRng::seed_from_u64(8);
        let t = build_dyadic_tree(8).unwrap();
        let perm = [3, 6, 0, 7, 1, 5, 2, 4];
        let relabeled = PartitionTree::from_levels(
            8,
            t.levels()
                .iter()
                .map(|lvl| lvl.iter().map(|&id| {
                    let mut s: Vec<usize> = t.node(id).index_set.iter().map(|&i| perm[i]).collect();
                    s.sort_unstable();
                    s
                }).collect())
                .collect(),
        )
        .unwrap();
        let m = Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0..1.0));
        let pm = Array2::from_shape_fn((8, 8), |(i, j)| {
            let inv = crate::tree::invert_permutation(&perm);
            m[[inv[i], inv[j]]]
        });
        let b = build_tree_haar(&t).unwrap();
        let pb = build_tree_haar(&relabeled).unwrap();
        for m_top in [1, 10, 64] {
            let e = l1_entropy(&expand_bihaar(m.view(), &b, &b).unwrap(), m_top).unwrap();
            let pe = l1_entropy(&expand_bihaar(pm.view(), &pb, &pb).unwrap(), m_top).unwrap();
            assert_abs_diff_eq!(e, pe, epsilon = 1e-12);
        }
    }

    #[test]
    fn smooth_grid_is_sparse() {
        let n = 64;
        let b = build_tree_haar(&build_dyadic_tree(n).unwrap()).unwrap();
        let m = Array2::from_shape_fn((n, n), |(i, j)| {
            let (x, y) = ((i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64);
            (x - y).abs().sqrt()
        });
        let cs = expand_bihaar(m.view(), &b, &b).unwrap();
        let mut sq: Vec<f64> = cs.entries().iter().map(|e| e.value * e.value).collect();
        sq.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = sq.iter().sum();
        let top: f64 = sq[..sq.len() / 10].iter().sum();
        assert!(top / total >= 0.95, "top-10% energy fraction {}", top / total);
    }

    #[test]
    fn csv_dump_has_one_row_per_coefficient() {
        let b = build_tree_haar(&build_dyadic_tree(2).unwrap()).unwrap();
        let cs = expand_bihaar(array![[1.0, 0.0], [0.0, 1.0]].view(), &b, &b).unwrap();
        let mut buf = Vec::new();
        cs.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "basis_0,basis_1,level_0,level_1,node_0,node_1,j_0,j_1,support_size,coefficient");
    }
}
