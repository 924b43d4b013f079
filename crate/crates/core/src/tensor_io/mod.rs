//! Attention 3-tensors: loading, saving, slicing and power-of-two cropping.
//!
//! Tensors are stored as NPY v1.0 files with shape `(n_q, n_k, n_h)`; an
//! optional `<name>.meta.json` sidecar carries [`TensorMeta`].

pub mod npy;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stacked attention heads, `data[[q, k, h]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    data: Array3<f64>,
}

impl Tensor3 {
    /// Wraps an array after checking that it is non-empty and finite.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (q, k, h) = data.dim();
        if q == 0 || k == 0 || h == 0 {
            return Err(Error::Data(format!("zero-sized dimension in ({q}, {k}, {h})")));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite entry at flat index {pos}")));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn from_fn(
        dims: (usize, usize, usize),
        f: impl FnMut((usize, usize, usize)) -> f64,
    ) -> Result<Self> {
        Self::new(Array3::from_shape_fn(dims, f))
    }

    pub fn n_q(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_k(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_h(&self) -> usize {
        self.data.dim().2
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    /// Copy of the `h`-th frontal slice `X[:, :, h]`.
    pub fn slice_head(&self, h: usize) -> Result<Array2<f64>> {
        if h >= self.n_h() {
            return Err(Error::Index {
                index: h,
                len: self.n_h(),
            });
        }
        Ok(self.data.index_axis(Axis(2), h).to_owned())
    }

    /// Reindexes every axis: `out[a, b, c] = self[q[a], k[b], h[c]]`.
    pub fn permuted(&self, q: &[usize], k: &[usize], h: &[usize]) -> Result<Tensor3> {
        let (nq, nk, nh) = self.dims();
        for (perm, n, name) in [(q, nq, "query"), (k, nk, "key"), (h, nh, "head")] {
            if !is_permutation(perm, n) {
                return Err(Error::Shape(format!("{name} permutation is not a bijection of 0..{n}")));
            }
        }
        let data = Array3::from_shape_fn(self.dims(), |(a, b, c)| self.data[[q[a], k[b], h[c]]]);
        Ok(Tensor3 { data })
    }

    /// Multiplies every entry by `c`.
    pub fn scaled(&self, c: f64) -> Result<Tensor3> {
        Tensor3::new(self.data.mapv(|v| v * c))
    }
}

pub(crate) fn is_permutation(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub model_name: String,
    pub batch_id: i64,
    pub token_count: usize,
    /// `(layer, head within layer)` for each index of the head axis.
    pub layer_head_map: Vec<(usize, usize)>,
}

impl TensorMeta {
    /// Metadata used when no sidecar exists: every head in layer 0.
    pub fn default_for(t: &Tensor3) -> Self {
        Self {
            model_name: String::new(),
            batch_id: 0,
            token_count: t.n_q(),
            layer_head_map: (0..t.n_h()).map(|h| (0, h)).collect(),
        }
    }

    pub fn validate(&self, n_h: usize) -> Result<()> {
        if self.layer_head_map.len() != n_h {
            return Err(Error::Data(format!(
                "layer_head_map has {} entries, tensor has {} heads",
                self.layer_head_map.len(),
                n_h
            )));
        }
        let distinct: HashSet<_> = self.layer_head_map.iter().collect();
        if distinct.len() != n_h {
            return Err(Error::Data("layer_head_map contains duplicate pairs".into()));
        }
        Ok(())
    }
}

/// `foo.npy` -> `foo.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.json"))
}

pub fn read_array(path: &Path) -> Result<npy::NpyArray> {
    let mut reader = BufReader::new(File::open(path)?);
    npy::read(&mut reader)
}

pub fn write_array(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    npy::write(&mut writer, shape, data)?;
    writer.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let arr = read_array(path)?;
    if arr.shape.len() != 2 {
        return Err(Error::Format(format!(
            "expected a 2-d array, header declares {} dims",
            arr.shape.len()
        )));
    }
    let m = Array2::from_shape_vec((arr.shape[0], arr.shape[1]), arr.data)
        .map_err(|e| Error::Format(e.to_string()))?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite entry".into()));
    }
    Ok(m)
}

pub fn write_matrix(path: &Path, m: ArrayView2<f64>) -> Result<()> {
    let owned = m.as_standard_layout();
    write_array(path, &[m.nrows(), m.ncols()], owned.as_slice().unwrap())
}

/// Reads the sidecar next to `path`, if there is one.
pub fn read_meta(path: &Path) -> Result<Option<TensorMeta>> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    let meta: TensorMeta = serde_json::from_reader(BufReader::new(File::open(side)?))?;
    Ok(Some(meta))
}

pub fn load_tensor(path: &Path) -> Result<(Tensor3, TensorMeta)> {
    let arr = read_array(path)?;
    if arr.shape.len() != 3 {
        return Err(Error::Format(format!(
            "expected shape (n_q, n_k, n_h), header declares {} dims",
            arr.shape.len()
        )));
    }
    let dims = (arr.shape[0], arr.shape[1], arr.shape[2]);
    let data = Array3::from_shape_vec(dims, arr.data).map_err(|e| Error::Format(e.to_string()))?;
    let tensor = Tensor3::new(data)?;
    let meta = match read_meta(path)? {
        Some(meta) => {
            meta.validate(tensor.n_h())?;
            meta
        }
        None => TensorMeta::default_for(&tensor),
    };
    Ok((tensor, meta))
}

/// Writes the tensor and, when given, its sidecar.
pub fn save_tensor(path: &Path, t: &Tensor3, meta: Option<&TensorMeta>) -> Result<()> {
    let (q, k, h) = t.dims();
    write_array(path, &[q, k, h], t.data.as_slice().unwrap())?;
    if let Some(meta) = meta {
        meta.validate(t.n_h())?;
        let file = BufWriter::new(File::create(sidecar_path(path))?);
        serde_json::to_writer_pretty(file, meta)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CropAnchor {
    #[default]
    TopLeft,
    Center,
}

fn floor_pow2(n: usize) -> usize {
    debug_assert!(n > 0);
    1 << (usize::BITS - 1 - n.leading_zeros())
}

/// Largest power-of-two submatrix, anchored at the top-left corner.
pub fn crop_pow2(m: ArrayView2<f64>) -> Array2<f64> {
    crop_pow2_anchored(m, CropAnchor::TopLeft)
}

pub fn crop_pow2_anchored(m: ArrayView2<f64>, anchor: CropAnchor) -> Array2<f64> {
    let (r, c) = m.dim();
    let (pr, pc) = (floor_pow2(r.max(1)), floor_pow2(c.max(1)));
    let (r0, c0) = match anchor {
        CropAnchor::TopLeft => (0, 0),
        CropAnchor::Center => ((r - pr) / 2, (c - pc) / 2),
    };
    m.slice(s![r0..r0 + pr, c0..c0 + pc]).to_owned()
}
