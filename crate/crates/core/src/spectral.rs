//! Affinities, Markov normalization and diffusion-map embeddings.
//!
//! The row-stochastic operator `P = D^{-1} G` is diagonalized through its
//! symmetric conjugate `S = D^{-1/2} G D^{-1/2}`. Right eigenvectors of `P`
//! are returned normalized under the stationary measure `π = d / Σd`, so the
//! trivial eigenvector is the constant `1`.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::Serialize;

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues this close to 1 are treated as part of the trivial eigenspace.
const UNIT_EIGEN_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffinityMatrix {
    pub entries: Array2<f64>,
    /// Set when a kernel bandwidth could not be derived from the data.
    pub degenerate: bool,
    /// Kernel bandwidth, for Gaussian affinities.
    pub epsilon: Option<f64>,
}

impl AffinityMatrix {
    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let e = &self.entries;
        e.indexed_iter().all(|((i, j), v)| (v - e[[j, i]]).abs() <= tol)
    }
}

/// Cosine similarity between the rows of `rows`.
pub fn cosine_affinity(rows: ArrayView2<f64>) -> Result<AffinityMatrix> {
    let norms: Array1<f64> = rows.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(index) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::DegenerateRow { index });
    }
    let unit = &rows / &norms.view().insert_axis(Axis(1));
    let mut g = unit.dot(&unit.t());
    let m = g.nrows();
    for i in 0..m {
        g[[i, i]] = 1.0;
        for j in 0..i {
            let v = (0.5 * (g[[i, j]] + g[[j, i]])).clamp(-1.0, 1.0);
            g[[i, j]] = v;
            g[[j, i]] = v;
        }
    }
    Ok(AffinityMatrix {
        entries: g,
        degenerate: false,
        epsilon: None,
    })
}

pub(crate) fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// `exp(-E / ε)` with `ε` the median of the strictly upper triangle of `E`.
///
/// A zero median falls back to `ε = 1` and sets `degenerate`.
pub fn gaussian_from_emd(e: ArrayView2<f64>) -> Result<AffinityMatrix> {
    let (n, m) = e.dim();
    if n != m {
        return Err(Error::Shape(format!("distance matrix is {n}x{m}")));
    }
    let scale = e.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    for ((i, j), &v) in e.indexed_iter() {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Data(format!("distance ({i}, {j}) = {v} is not a finite nonnegative value")));
        }
        if (v - e[[j, i]]).abs() > SYMMETRY_TOL * scale {
            return Err(Error::Data(format!("distance matrix is not symmetric at ({i}, {j})")));
        }
        if i == j && v != 0.0 {
            return Err(Error::Data(format!("nonzero diagonal distance at {i}")));
        }
    }

    let mut upper: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| e[[i, j]]).collect();
    let (epsilon, degenerate) = match median(&mut upper) {
        Some(med) if med > 0.0 => (med, false),
        _ => (1.0, true),
    };
    let mut g = Array2::from_shape_fn((n, n), |(i, j)| {
        let d = if i <= j { e[[i, j]] } else { e[[j, i]] };
        (-d / epsilon).exp()
    });
    g.diag_mut().fill(1.0);
    Ok(AffinityMatrix {
        entries: g,
        degenerate,
        epsilon: Some(epsilon),
    })
}

fn row_sums(g: ArrayView2<f64>) -> Result<Array1<f64>> {
    let d = g.sum_axis(Axis(1));
    if let Some(index) = d.iter().position(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::DegenerateRow { index });
    }
    Ok(d)
}

/// The row-stochastic operator `D^{-1} G`.
pub fn markov_matrix(g: &AffinityMatrix) -> Result<Array2<f64>> {
    let d = row_sums(g.entries.view())?;
    Ok(&g.entries / &d.insert_axis(Axis(1)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffusionEmbedding {
    /// `λ_0 = 1 ≥ λ_1 ≥ …`
    pub eigenvalues: Vec<f64>,
    /// Right eigenvectors of `P`, one per column.
    pub eigenvectors: Array2<f64>,
    pub diffusion_time: f64,
    /// Stationary measure `π`.
    pub stationary: Vec<f64>,
}

fn signed_pow(lambda: f64, t: f64) -> f64 {
    lambda.signum() * lambda.abs().powf(t)
}

impl DiffusionEmbedding {
    pub fn n(&self) -> usize {
        self.eigenvectors.nrows()
    }

    /// Number of nontrivial coordinates.
    pub fn dim(&self) -> usize {
        self.eigenvalues.len().saturating_sub(1)
    }

    /// `λ_i^t ψ_i(x)` for the nontrivial eigenpairs, one row per point.
    pub fn coordinates(&self) -> Array2<f64> {
        let k = self.dim();
        Array2::from_shape_fn((self.n(), k), |(x, i)| {
            signed_pow(self.eigenvalues[i + 1], self.diffusion_time) * self.eigenvectors[[x, i + 1]]
        })
    }

    /// Same embedding at another diffusion time.
    pub fn at_time(&self, t: f64) -> Self {
        Self {
            diffusion_time: t,
            ..self.clone()
        }
    }

    pub fn diffusion_distance(&self, i: usize, j: usize) -> f64 {
        let t = self.diffusion_time;
        (1..self.eigenvalues.len())
            .map(|c| {
                let w = signed_pow(self.eigenvalues[c], t);
                let d = w * (self.eigenvectors[[i, c]] - self.eigenvectors[[j, c]]);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Default count of nontrivial coordinates for `n` points.
pub fn default_n_ev(n: usize) -> usize {
    n.saturating_sub(1).min(12)
}

/// Diffusion-map embedding of `g` keeping `n_ev` nontrivial coordinates.
pub fn markov_embed(g: &AffinityMatrix, n_ev: usize, t: f64) -> Result<DiffusionEmbedding> {
    let n = g.n();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if t <= 0.0 || t.is_nan() {
        return Err(Error::Config(format!("diffusion time must be positive, got {t}")));
    }
    let d = row_sums(g.entries.view())?;
    let total: f64 = d.sum();
    let inv_sqrt: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();

    let s = DMatrix::from_fn(n, n, |i, j| {
        let a = g.entries[[i, j]] * inv_sqrt[i] * inv_sqrt[j];
        let b = g.entries[[j, i]] * inv_sqrt[j] * inv_sqrt[i];
        0.5 * (a + b)
    });
    let max_iter = 1000 * n.max(10);
    let eig = s.try_symmetric_eigen(f64::EPSILON, max_iter).ok_or(Error::Numerical {
        msg: "symmetric eigensolver did not converge".into(),
        iterations: Some(max_iter),
    })?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    // The trivial eigenspace (λ = 1) always contains sqrt(d); pin it as the first vector
    // and orthogonalize any other unit eigenvectors against it.
    let sqrt_d: Vec<f64> = d.iter().map(|v| v.sqrt()).collect();
    let norm = sqrt_d.iter().map(|v| v * v).sum::<f64>().sqrt();
    let phi0: Vec<f64> = sqrt_d.iter().map(|v| v / norm).collect();

    let column = |c: usize| -> Vec<f64> { eig.eigenvectors.column(c).iter().copied().collect() };
    let unit: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&c| (eig.eigenvalues[c] - 1.0).abs() <= UNIT_EIGEN_TOL)
        .collect();
    let mut pairs: Vec<(f64, Vec<f64>)> = vec![(1.0, phi0.clone())];
    if unit.len() > 1 {
        let mut residuals: Vec<(f64, Vec<f64>)> = Vec::with_capacity(unit.len());
        for &c in &unit {
            let mut v = column(c);
            let proj: f64 = v.iter().zip(&phi0).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(&phi0).for_each(|(a, b)| *a -= proj * b);
            let r = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            residuals.push((r, v));
        }
        // the vector most aligned with sqrt(d) is the one it replaces
        let drop = residuals
            .iter()
            .enumerate()
            .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
            .map(|(i, _)| i)
            .unwrap();
        let mut basis: Vec<Vec<f64>> = vec![phi0.clone()];
        for (i, (_, mut v)) in residuals.into_iter().enumerate() {
            if i == drop {
                continue;
            }
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
            let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if r > 1e-12 {
                v.iter_mut().for_each(|x| *x /= r);
                basis.push(v.clone());
                pairs.push((1.0, v));
            }
        }
    }
    for &c in &order {
        if (eig.eigenvalues[c] - 1.0).abs() <= UNIT_EIGEN_TOL {
            continue;
        }
        pairs.push((eig.eigenvalues[c].clamp(-1.0, 1.0), column(c)));
    }

    let keep = (n_ev + 1).min(n).min(pairs.len());
    let scale = total.sqrt();
    let mut vectors = Array2::zeros((n, keep));
    let mut values = Vec::with_capacity(keep);
    for (c, (lambda, phi)) in pairs.into_iter().take(keep).enumerate() {
        let mut psi: Vec<f64> = phi.iter().zip(&inv_sqrt).map(|(p, s)| p * s * scale).collect();
        let lead = psi
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1.abs() { (i, *v) } else { best });
        if lead.1 < 0.0 {
            psi.iter_mut().for_each(|v| *v = -*v);
        }
        vectors.column_mut(c).assign(&Array1::from(psi));
        values.push(lambda);
    }

    Ok(DiffusionEmbedding {
        eigenvalues: values,
        eigenvectors: vectors,
        diffusion_time: t,
        stationary: d.iter().map(|v| v / total).collect(),
    })
}
