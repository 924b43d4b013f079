//! Synthetic inputs for tests, benchmarks and the acceptance suite.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::paraproduct::GridFunction2D;
use crate::tensor_io::Tensor3;

/// `X[i,j,h] = sin(π(i+½)/n_q) · cos(π(j+½)/n_k) · (1 + h/n_h)`.
pub fn smooth_separable(nq: usize, nk: usize, nh: usize) -> Tensor3 {
    Tensor3::from_fn((nq, nk, nh), |(i, j, h)| {
        let u = (PI * (i as f64 + 0.5) / nq as f64).sin();
        let v = (PI * (j as f64 + 0.5) / nk as f64).cos();
        u * v * (1.0 + h as f64 / nh as f64)
    })
    .expect("finite nonempty tensor")
}

/// One uniformly random permutation per axis, drawn in query, key, head order.
pub fn random_permutations(dims: (usize, usize, usize), seed: u64) -> [Vec<usize>; 3] {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut draw = |n: usize| {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut rng);
        p
    };
    let q = draw(dims.0);
    let k = draw(dims.1);
    let h = draw(dims.2);
    [q, k, h]
}

/// Shuffles all three axes of `x`; returns the tensor and the permutations used.
pub fn shuffle_tensor(x: &Tensor3, seed: u64) -> (Tensor3, [Vec<usize>; 3]) {
    let perms = random_permutations(x.dims(), seed);
    let out = x.permuted(&perms[0], &perms[1], &perms[2]).expect("valid permutations");
    (out, perms)
}

/// Cell averages of `|x − y|^α` on the `n × n` dyadic grid of `[0,1]²`.
pub fn holder_grid(n: usize, alpha: f64) -> GridFunction2D {
    let h = 1.0 / n as f64;
    let g = |u: f64| u.abs().powf(alpha + 2.0) / ((alpha + 1.0) * (alpha + 2.0));
    let values = Array2::from_shape_fn((n, n), |(i, j)| {
        let d = (i as f64 - j as f64) * h;
        (g(d + h) + g(d - h) - 2.0 * g(d)) / (h * h)
    });
    GridFunction2D::new(values).expect("power-of-two grid")
}

/// A row-stochastic block head: `blocks` diagonal blocks of strong attention
/// plus a smooth off-block background, with mild noise.
pub fn block_attention(n: usize, blocks: usize, seed: u64) -> Array2<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    let size = n.div_ceil(blocks);
    let mut m = Array2::from_shape_fn((n, n), |(i, j)| {
        let inside = i / size == j / size;
        let background = 0.2 * (1.0 + ((i as f64 - j as f64) / n as f64 * PI).cos());
        let base = if inside { 3.0 } else { background };
        base + 0.05 * rng.random_range(0.0..1.0)
    });
    for mut row in m.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    m
}
