//! Dyadic averaging on `2^N × 2^N'` grids and the paraproduct expansion of
//! `A(f)` for a twice-differentiable scalar map `A`.
//!
//! `P^j` averages over row blocks of height `2^{N−j}`, `P'^{j'}` over column
//! blocks of width `2^{N'−j'}`. The approximation is
//!
//! ```text
//! Ã(f) = Σ_{j<N} Σ_{j'<N'}  A'(P^j P'^{j'} f) · dd_{j,j'}  +  A''(P^j P'^{j'} f) · dx_{j,j'} · dy_{j,j'}
//! ```
//!
//! and the residual is `A(f) − Ã(f)`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction2D {
    values: Array2<f64>,
    depth_x: usize,
    depth_y: usize,
}

fn log2_exact(n: usize) -> Option<usize> {
    n.is_power_of_two().then(|| n.trailing_zeros() as usize)
}

impl GridFunction2D {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (r, c) = values.dim();
        let (Some(depth_x), Some(depth_y)) = (log2_exact(r), log2_exact(c)) else {
            return Err(Error::Shape(format!("grid must be 2^N × 2^N', got {r} × {c}")));
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("grid values must be finite".into()));
        }
        Ok(Self { values, depth_x, depth_y })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn depth_x(&self) -> usize {
        self.depth_x
    }

    pub fn depth_y(&self) -> usize {
        self.depth_y
    }

    fn with_values(&self, values: Array2<f64>) -> Self {
        Self {
            values,
            depth_x: self.depth_x,
            depth_y: self.depth_y,
        }
    }

    fn check_scale(&self, j: usize, jp: usize) -> Result<()> {
        if j > self.depth_x || jp > self.depth_y {
            return Err(Error::Scale {
                j,
                jp,
                depth_x: self.depth_x,
                depth_y: self.depth_y,
            });
        }
        Ok(())
    }
}

/// A scalar map with its first two derivatives.
#[derive(Clone, Copy)]
pub struct ScalarC2 {
    pub name: &'static str,
    pub value: fn(f64) -> f64,
    pub d1: fn(f64) -> f64,
    pub d2: fn(f64) -> f64,
}

impl std::fmt::Debug for ScalarC2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScalarC2").field("name", &self.name).finish()
    }
}

fn sech2(t: f64) -> f64 {
    let c = t.cosh();
    1.0 / (c * c)
}

impl ScalarC2 {
    pub fn exp() -> Self {
        Self { name: "exp", value: f64::exp, d1: f64::exp, d2: f64::exp }
    }

    pub fn identity() -> Self {
        Self { name: "identity", value: |t| t, d1: |_| 1.0, d2: |_| 0.0 }
    }

    pub fn square() -> Self {
        Self { name: "square", value: |t| t * t, d1: |t| 2.0 * t, d2: |_| 2.0 }
    }

    pub fn tanh() -> Self {
        Self {
            name: "tanh",
            value: f64::tanh,
            d1: sech2,
            d2: |t| -2.0 * t.tanh() * sech2(t),
        }
    }
}

/// Block means over `rows × cols` blocks, broadcast back to full size.
fn block_average(m: ArrayView2<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let (r, c) = m.dim();
    let mut means = Array2::<f64>::zeros((r / rows, c / cols));
    for ((i, j), v) in m.indexed_iter() {
        means[[i / rows, j / cols]] += v;
    }
    let area = (rows * cols) as f64;
    Array2::from_shape_fn((r, c), |(i, j)| means[[i / rows, j / cols]] / area)
}

/// `P^j P'^{j'} f`.
pub fn dyadic_average(f: &GridFunction2D, j: usize, jp: usize) -> Result<GridFunction2D> {
    f.check_scale(j, jp)?;
    let v = block_average(f.values.view(), 1 << (f.depth_x - j), 1 << (f.depth_y - jp));
    Ok(f.with_values(v))
}

#[derive(Debug, Clone)]
pub struct MartingaleDifferences {
    /// `P^{j+1}P'^{j'+1} − P^jP'^{j'+1} − P^{j+1}P'^{j'} + P^jP'^{j'}`
    pub dd: GridFunction2D,
    /// `P^{j+1}P'^{j'} − P^jP'^{j'}`
    pub dx: GridFunction2D,
    /// `P^jP'^{j'+1} − P^jP'^{j'}`
    pub dy: GridFunction2D,
}

/// All averages `P^j P'^{j'} f` for `j ≤ N`, `j' ≤ N'`, indexed `[j][j']`.
struct AverageTable {
    table: Vec<Vec<Array2<f64>>>,
}

impl AverageTable {
    fn new(f: &GridFunction2D, n: usize, np: usize) -> Self {
        let table = (0..=n)
            .into_par_iter()
            .map(|j| {
                (0..=np)
                    .map(|jp| block_average(f.values.view(), 1 << (f.depth_x - j), 1 << (f.depth_y - jp)))
                    .collect()
            })
            .collect();
        Self { table }
    }

    fn get(&self, j: usize, jp: usize) -> &Array2<f64> {
        &self.table[j][jp]
    }

    fn differences(&self, j: usize, jp: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let p00 = self.get(j, jp);
        let p10 = self.get(j + 1, jp);
        let p01 = self.get(j, jp + 1);
        let p11 = self.get(j + 1, jp + 1);
        let dd = p11 - p01 - p10 + p00;
        let dx = p10 - p00;
        let dy = p01 - p00;
        (dd, dx, dy)
    }
}

pub fn martingale_differences(f: &GridFunction2D, j: usize, jp: usize) -> Result<MartingaleDifferences> {
    if j >= f.depth_x || jp >= f.depth_y {
        return Err(Error::Scale {
            j,
            jp,
            depth_x: f.depth_x,
            depth_y: f.depth_y,
        });
    }
    let avg = |a: usize, b: usize| block_average(f.values.view(), 1usize << (f.depth_x - a), 1usize << (f.depth_y - b));
    let (p00, p10, p01, p11) = (avg(j, jp), avg(j + 1, jp), avg(j, jp + 1), avg(j + 1, jp + 1));
    Ok(MartingaleDifferences {
        dd: f.with_values(&p11 - &p01 - &p10 + &p00),
        dx: f.with_values(&p10 - &p00),
        dy: f.with_values(&p01 - &p00),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScaleNorm {
    pub j: usize,
    pub jp: usize,
    /// ℓ2 norm of the first-order term `A'·dd`.
    pub first_l2: f64,
    /// ℓ2 norm of the second-order term `A''·dx·dy`.
    pub second_l2: f64,
    pub dd_max: f64,
}

#[derive(Debug, Clone)]
pub struct ScaleTerm {
    pub j: usize,
    pub jp: usize,
    pub first: Array2<f64>,
    pub second: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub approx: Array2<f64>,
    pub residual: Array2<f64>,
    pub scale_norms: Vec<ScaleNorm>,
    pub per_scale_terms: Option<Vec<ScaleTerm>>,
}

fn l2(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn max_abs(m: &Array2<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Expands `A(f)` using the scales `j < n`, `j' < np`. Averages are taken on
/// the full grid, so `n` may be smaller than the grid depth.
pub fn decompose(a: ScalarC2, f: &GridFunction2D, n: usize, np: usize, keep_terms: bool) -> Result<Decomposition> {
    decompose_scaled(a, f, n, np, keep_terms, None)
}

/// As [`decompose`], with every term and `A(f)` divided row-wise by `row_div`.
fn decompose_scaled(
    a: ScalarC2,
    f: &GridFunction2D,
    n: usize,
    np: usize,
    keep_terms: bool,
    row_div: Option<&Array1<f64>>,
) -> Result<Decomposition> {
    f.check_scale(n, np)?;
    let div = row_div.map(|z| z.view().insert_axis(Axis(1)));
    let table = AverageTable::new(f, n, np);
    let scales: Vec<(usize, usize)> = (0..n).flat_map(|j| (0..np).map(move |jp| (j, jp))).collect();
    let terms: Vec<ScaleTerm> = scales
        .par_iter()
        .map(|&(j, jp)| {
            let (dd, dx, dy) = table.differences(j, jp);
            let base = table.get(j, jp);
            let d1 = base.mapv(a.d1);
            let d2 = base.mapv(a.d2);
            if d1.iter().chain(d2.iter()).any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!(
                    "{} derivatives are not finite at scale ({j}, {jp})",
                    a.name
                )));
            }
            let mut first = &d1 * &dd;
            let mut second = &d2 * &dx * &dy;
            if let Some(z) = &div {
                first /= z;
                second /= z;
            }
            Ok(ScaleTerm { j, jp, first, second })
        })
        .collect::<Result<_>>()?;

    let mut approx = Array2::zeros(f.values.dim());
    let mut scale_norms = Vec::with_capacity(terms.len());
    for t in &terms {
        approx += &t.first;
        approx += &t.second;
        let (dd, _, _) = table.differences(t.j, t.jp);
        scale_norms.push(ScaleNorm {
            j: t.j,
            jp: t.jp,
            first_l2: l2(&t.first),
            second_l2: l2(&t.second),
            dd_max: max_abs(&dd),
        });
    }
    let mut af = f.values.mapv(a.value);
    if af.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!("{} is not finite on the grid", a.name)));
    }
    if let Some(z) = &div {
        af /= z;
    }
    let residual = &af - &approx;
    Ok(Decomposition {
        approx,
        residual,
        scale_norms,
        per_scale_terms: keep_terms.then_some(terms),
    })
}

/// Row-wise softmax, stabilized by the row maximum.
pub fn softmax_rows(m: ArrayView2<f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

/// Decomposes `e^f` and divides every row by its softmax normalizer, so that
/// `approx + residual = softmax_rows(f)`.
///
/// Both the exponential and the normalizers are shifted by `max f`; the
/// normalized result does not depend on the shift. The returned normalizers
/// are `Σ_k e^{f[i,k] − max f}`.
pub fn decompose_softmax(f: &GridFunction2D, n: usize, np: usize) -> Result<(Decomposition, Array1<f64>)> {
    let shift = f.values.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let shifted = f.with_values(f.values.mapv(|v| v - shift));
    let z = shifted.values.mapv(f64::exp).sum_axis(Axis(1));
    let d = decompose_scaled(ScalarC2::exp(), &shifted, n, np, false, Some(&z))?;
    Ok((d, z))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorollaryReport {
    /// `|P^0 P'^0 f|`
    pub mean_abs: f64,
    /// `|exp(P^0 P'^0 f) − 1|`
    pub constant_dev_root: f64,
    /// `max |exp(P^j P'^{j'} f) − 1|` over coarse scales `j + j' ≤ 2`.
    pub constant_dev: f64,
    /// `Σ_{j,j'} ‖dd_{j,j'}‖_1`
    pub coeff_mass: f64,
}

pub fn corollary_check(f: &GridFunction2D) -> CorollaryReport {
    let (n, np) = (f.depth_x, f.depth_y);
    let table = AverageTable::new(f, n, np);
    let mean = f.values.mean().unwrap_or(0.0);
    let mut constant_dev: f64 = 0.0;
    for j in 0..=n.min(2) {
        for jp in 0..=np.min(2 - j) {
            let dev = table.get(j, jp).iter().fold(0.0, |acc: f64, v| acc.max((v.exp() - 1.0).abs()));
            constant_dev = constant_dev.max(dev);
        }
    }
    let mut coeff_mass = 0.0;
    for j in 0..n {
        for jp in 0..np {
            let (dd, _, _) = table.differences(j, jp);
            coeff_mass += dd.iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    CorollaryReport {
        mean_abs: mean.abs(),
        constant_dev_root: (mean.exp() - 1.0).abs(),
        constant_dev,
        coeff_mass,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HolderParams {
    pub alpha: f64,
    pub holder_constant: f64,
    pub degenerate: bool,
}

impl HolderParams {
    /// Whether the exponent lies in `(0, 1/2)`.
    pub fn in_open_range(&self) -> bool {
        self.alpha > 0.0 && self.alpha < 0.5
    }
}

fn lsq_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Fits `max |dd_{s,s}| ≈ C · 2^{−α s}` over the diagonal scales.
pub fn estimate_holder(f: &GridFunction2D) -> Result<HolderParams> {
    let depth = f.depth_x.min(f.depth_y);
    if depth < 3 {
        return Err(Error::Shape(format!("Hölder estimate needs depth ≥ 3, got {depth}")));
    }
    let table = AverageTable::new(f, f.depth_x, f.depth_y);
    let maxima: Vec<(f64, f64)> = (0..depth)
        .map(|s| (s as f64, max_abs(&table.differences(s, s).0)))
        .collect();
    let scale = maxima.iter().fold(0.0, |a: f64, (_, m)| a.max(*m));
    let kept: Vec<(f64, f64)> = maxima
        .iter()
        .copied()
        .filter(|(_, m)| *m > 1e-14 * scale.max(f64::MIN_POSITIVE))
        .collect();
    if kept.len() < 2 {
        return Ok(HolderParams {
            alpha: 0.5,
            holder_constant: 0.0,
            degenerate: true,
        });
    }
    let xs: Vec<f64> = kept.iter().map(|(s, _)| *s).collect();
    let ys: Vec<f64> = kept.iter().map(|(_, m)| m.log2()).collect();
    let alpha = -lsq_slope(&xs, &ys);
    let holder_constant = kept.iter().fold(0.0, |a: f64, (s, m)| a.max(m * 2f64.powf(alpha * s)));
    Ok(HolderParams {
        alpha,
        holder_constant,
        degenerate: false,
    })
}

/// Energy of `m` outside the diagonal blocks of size `block × block`.
pub fn off_block_energy(m: ArrayView2<f64>, block: usize) -> f64 {
    let mut e = 0.0;
    Zip::indexed(m).for_each(|(i, j), v| {
        if i / block != j / block {
            e += v * v;
        }
    });
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::holder_grid;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_grid(seed: u64, n: usize, m: usize) -> GridFunction2D {
        let mut rng = StdRng::seed_from_u64(seed);
        GridFunction2D::new(Array2::from_shape_fn((n, m), |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    /// Block mean computed by direct summation over one block.
    fn block_mean_oracle(m: &Array2<f64>, i: usize, j: usize, h: usize, w: usize) -> f64 {
        let (bi, bj) = (i / h * h, j / w * w);
        let mut s = 0.0;
        for a in bi..bi + h {
            for b in bj..bj + w {
                s += m[[a, b]];
            }
        }
        s / (h * w) as f64
    }

    fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (a - b).iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    #[test]
    fn grid_shape_checks() {
        assert!(matches!(GridFunction2D::new(Array2::zeros((3, 4))), Err(Error::Shape(_))));
        let g = GridFunction2D::new(Array2::zeros((4, 8))).unwrap();
        assert_eq!((g.depth_x(), g.depth_y()), (2, 3));
    }

    #[test]
    fn dyadic_average_examples() {
        let f = GridFunction2D::new(array![[0.0, 1.0], [2.0, 3.0]]).unwrap();
        assert_eq!(dyadic_average(&f, 1, 0).unwrap().values(), array![[0.5, 0.5], [2.5, 2.5]]);
        assert_eq!(dyadic_average(&f, 0, 0).unwrap().values(), Array2::from_elem((2, 2), 1.5));
        assert_eq!(dyadic_average(&f, 1, 1).unwrap(), f);
        assert!(matches!(dyadic_average(&f, 2, 0), Err(Error::Scale { j: 2, .. })));

        let g = random_grid(1, 8, 16);
        for (j, jp) in [(1, 2), (2, 3), (0, 4)] {
            let p = dyadic_average(&g, j, jp).unwrap();
            let (h, w) = (8 >> j, 16 >> jp);
            for ((i, k), v) in p.values().indexed_iter() {
                assert_abs_diff_eq!(*v, block_mean_oracle(&g.values, i, k, h, w), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn martingale_examples() {
        let c = GridFunction2D::new(Array2::from_elem((4, 4), 2.0)).unwrap();
        let md = martingale_differences(&c, 0, 1).unwrap();
        assert!(md.dd.values().iter().chain(md.dx.values().iter()).chain(md.dy.values().iter()).all(|v| v.abs() < 1e-15));
        assert!(matches!(martingale_differences(&c, 2, 0), Err(Error::Scale { .. })));

        // separable: dd factorizes into 1-d differences
        let u = [0.3, -1.0, 2.0, 0.5, 1.5, -0.7, 0.0, 0.9];
        let v = [1.0, 2.0, -3.0, 0.25];
        let f = GridFunction2D::new(Array2::from_shape_fn((8, 4), |(i, j)| u[i] * v[j])).unwrap();
        let avg1 = |x: &[f64], blk: usize, i: usize| {
            let s = i / blk * blk;
            x[s..s + blk].iter().sum::<f64>() / blk as f64
        };
        for (j, jp) in [(0, 0), (1, 1), (2, 0)] {
            let md = martingale_differences(&f, j, jp).unwrap();
            for ((i, k), val) in md.dd.values().indexed_iter() {
                let du = avg1(&u, 8 >> (j + 1), i) - avg1(&u, 8 >> j, i);
                let dv = avg1(&v, 4 >> (jp + 1), k) - avg1(&v, 4 >> jp, k);
                assert_abs_diff_eq!(*val, du * dv, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn double_differences_telescope() {
        let f = random_grid(2, 8, 8);
        let mut sum = Array2::zeros((8, 8));
        for j in 0..3 {
            for jp in 0..3 {
                sum += &martingale_differences(&f, j, jp).unwrap().dd.values();
            }
        }
        let p = |j, jp| dyadic_average(&f, j, jp).unwrap().into_values();
        let expect = f.values.clone() - p(0, 3) - p(3, 0) + p(0, 0);
        assert!(max_diff(&sum, &expect) < 1e-12);
    }

    #[test]
    fn decompose_examples() {
        let c = GridFunction2D::new(Array2::from_elem((8, 8), 0.7)).unwrap();
        let d = decompose(ScalarC2::exp(), &c, 3, 3, false).unwrap();
        assert!(d.approx.iter().all(|v| v.abs() < 1e-15));
        assert!(d.residual.iter().all(|v| (v - 0.7f64.exp()).abs() < 1e-14));

        let f = random_grid(3, 16, 8);
        let d = decompose(ScalarC2::identity(), &f, 4, 3, true).unwrap();
        let rows = f.values.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        let cols = f.values.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        let mean = f.values.mean().unwrap();
        let expect = &f.values - &rows - &cols + mean;
        assert!(max_diff(&d.approx, &expect) < 1e-12);
        let expect_res = (&rows + &cols) - mean;
        assert!(max_diff(&d.residual, &expect_res) < 1e-12);
        assert_eq!(d.per_scale_terms.as_ref().unwrap().len(), 12);
        assert_eq!(d.scale_norms.len(), 12);
    }

    #[test]
    fn decompose_non_finite() {
        let f = GridFunction2D::new(Array2::from_elem((2, 2), 800.0)).unwrap();
        assert!(matches!(decompose(ScalarC2::exp(), &f, 1, 1, false), Err(Error::Numerical { .. })));
    }

    #[test]
    fn residual_decays_with_depth() {
        let f = holder_grid(256, 0.3);
        let r8 = decompose(ScalarC2::exp(), &f, 8, 8, false).unwrap().residual;
        let r7 = decompose(ScalarC2::exp(), &f, 7, 7, false).unwrap().residual;
        let ratio = max_abs(&r8) / max_abs(&r7);
        let target = 2f64.powf(-0.6);
        assert!(ratio >= target / 1.5 && ratio <= target * 1.5, "ratio {ratio}");
    }

    #[test]
    fn softmax_examples() {
        let z = softmax_rows(Array2::zeros((2, 4)).view());
        assert!(z.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let r = softmax_rows(array![[1f64.ln(), 3f64.ln()]].view());
        assert_abs_diff_eq!(r, array![[0.25, 0.75]], epsilon = 1e-15);
        let m = array![[0.3, -2.0, 5.0], [1.0, 1.0, 0.0]];
        let mut shifted = m.clone();
        shifted.row_mut(0).mapv_inplace(|v| v + 40.0);
        assert_abs_diff_eq!(softmax_rows(m.view()), softmax_rows(shifted.view()), epsilon = 1e-15);
    }

    #[test]
    fn softmax_decomposition() {
        let c = GridFunction2D::new(Array2::from_elem((4, 8), -3.0)).unwrap();
        let (d, _) = decompose_softmax(&c, 2, 3).unwrap();
        assert!(d.approx.iter().all(|v| v.abs() < 1e-15));
        assert!(d.residual.iter().all(|v| (v - 0.125).abs() < 1e-15));

        let f = random_grid(4, 64, 64);
        let (d, z) = decompose_softmax(&f, 6, 6).unwrap();
        let total = &d.approx + &d.residual;
        assert!(max_diff(&total, &softmax_rows(f.values())) < 1e-10);
        assert_eq!(z.len(), 64);
        for row in total.axis_iter(Axis(0)) {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn corollary_examples() {
        let c = GridFunction2D::new(Array2::from_elem((4, 4), -0.4)).unwrap();
        let r = corollary_check(&c);
        assert_abs_diff_eq!(r.mean_abs, 0.4, epsilon = 1e-15);
        assert!(r.coeff_mass < 1e-12);

        // zero mean on every block with j + j' ≤ 2
        let pattern = Array2::from_shape_fn((8, 8), |(i, j)| if (i + j) % 2 == 0 { 1.0 } else { -1.0 });
        let mut masses = Vec::new();
        for s in [1.0, 10.0, 100.0] {
            let r = corollary_check(&GridFunction2D::new(&pattern * s).unwrap());
            assert!(r.mean_abs < 1e-12);
            assert!(r.constant_dev_root < 1e-12);
            assert!(r.constant_dev < 1e-12);
            masses.push(r.coeff_mass);
        }
        assert_abs_diff_eq!(masses[1], 10.0 * masses[0], epsilon = 1e-9);
        assert_abs_diff_eq!(masses[2], 100.0 * masses[0], epsilon = 1e-9);
        assert!(masses[0] > 0.0);
    }

    #[test]
    fn holder_examples() {
        let c = GridFunction2D::new(Array2::from_elem((16, 16), 1.0)).unwrap();
        let h = estimate_holder(&c).unwrap();
        assert!(h.degenerate);
        assert_eq!(h.holder_constant, 0.0);
        assert!(matches!(estimate_holder(&GridFunction2D::new(Array2::zeros((4, 4))).unwrap()), Err(Error::Shape(_))));

        let f = holder_grid(256, 0.3);
        let h = estimate_holder(&f).unwrap();
        assert!((0.24..=0.36).contains(&h.alpha), "alpha {}", h.alpha);
        assert!(h.in_open_range());
        let shifted = GridFunction2D::new(f.values().mapv(|v| v + 12.5)).unwrap();
        assert_abs_diff_eq!(estimate_holder(&shifted).unwrap().alpha, h.alpha, epsilon = 1e-6);
    }

    #[test]
    fn off_block_energy_counts_off_diagonal_blocks() {
        let m = array![[1.0, 2.0, 3.0, 4.0], [1.0, 1.0, 1.0, 1.0], [0.0, 5.0, 1.0, 1.0], [2.0, 0.0, 1.0, 1.0]];
        assert_eq!(off_block_energy(m.view(), 2), 9.0 + 16.0 + 1.0 + 1.0 + 25.0 + 4.0);
    }

    proptest! {
        #[test]
        fn projections(seed in 0u64..500, j in 0usize..4, jp in 0usize..3) {
            let f = random_grid(seed, 8, 4);
            let p = dyadic_average(&f, j, jp).unwrap();
            let pp = dyadic_average(&p, j, jp).unwrap();
            prop_assert!(max_diff(&p.values.to_owned(), &pp.values.to_owned()) < 1e-14);
            if j < 3 && jp < 2 {
                let fine = dyadic_average(&f, j + 1, jp + 1).unwrap();
                let coarse_of_fine = dyadic_average(&fine, j, jp).unwrap();
                prop_assert!(max_diff(&coarse_of_fine.values, &p.values) < 1e-14);
            }
            let x_then_y = dyadic_average(&dyadic_average(&f, j, 2).unwrap(), 3, jp).unwrap();
            let y_then_x = dyadic_average(&dyadic_average(&f, 3, jp).unwrap(), j, 2).unwrap();
            prop_assert!(max_diff(&x_then_y.values, &y_then_x.values) < 1e-14);
        }

        #[test]
        fn decomposition_is_exact(seed in 0u64..200, which in 0usize..4) {
            let a = [ScalarC2::exp(), ScalarC2::identity(), ScalarC2::square(), ScalarC2::tanh()][which];
            let f = random_grid(seed, 16, 8);
            let d = decompose(a, &f, 4, 3, false).unwrap();
            let total = &d.approx + &d.residual;
            prop_assert!(max_diff(&total, &f.values.mapv(a.value)) < 1e-10);
        }

        #[test]
        fn softmax_reassembly_is_shift_invariant(seed in 0u64..200, shift in -5.0f64..5.0) {
            let f = random_grid(seed, 8, 8);
            let mut g = f.values.clone();
            g.row_mut(3).mapv_inplace(|v| v + shift);
            let g = GridFunction2D::new(g).unwrap();
            let (d, _) = decompose_softmax(&g, 3, 3).unwrap();
            let total = &d.approx + &d.residual;
            prop_assert!(max_diff(&total, &softmax_rows(f.values())) < 1e-10);
        }
    }
}
