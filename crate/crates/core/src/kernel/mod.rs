//! Neural tangent kernel gram matrices: empirical (gradient inner products
//! at given weights), exact infinite-width, and Monte-Carlo estimates of the
//! infinite-width limit.

mod cache;
mod empirical;
mod infinite;
mod monte_carlo;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub(crate) use cache::ids_hash;
pub use cache::{KernelCache, KernelFileHeader, CACHE_DIR_ENV};
pub use empirical::{empirical_ntk_gram, empirical_ntk_gram_with, GramOptions};
pub use infinite::{infinite_ntk, infinite_ntk_cnn, infinite_ntk_mlp, relu_expectations, CovTensorState};
pub use monte_carlo::{mc_ntk_estimate, McEstimate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelKind {
    EmpiricalAtWeights { anchor_tag: String },
    InfiniteExact,
    InfiniteMc { width: usize, seeds: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelMeta {
    pub spec_hash: String,
    /// Checkpoint (SGD batches) of the anchor weights, for kernels over time.
    pub step: Option<u64>,
    /// Training-set size of the anchor weights, for after-kernels.
    pub trained_on: Option<usize>,
}

/// Dense 64-bit kernel matrix between two sample sets.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    pub values: Array2<f64>,
    pub row_ids: Vec<u64>,
    pub col_ids: Vec<u64>,
    pub kind: KernelKind,
    pub meta: KernelMeta,
}

impl KernelMatrix {
    pub(crate) fn new(values: Array2<f64>, kind: KernelKind, meta: KernelMeta) -> Self {
        let (r, c) = values.dim();
        KernelMatrix {
            values,
            row_ids: (0..r as u64).collect(),
            col_ids: (0..c as u64).collect(),
            kind,
            meta,
        }
    }

    pub fn with_ids(mut self, row_ids: Vec<u64>, col_ids: Vec<u64>) -> Self {
        assert_eq!(row_ids.len(), self.values.nrows(), "row id count");
        assert_eq!(col_ids.len(), self.values.ncols(), "column id count");
        self.row_ids = row_ids;
        self.col_ids = col_ids;
        self
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_square_on_same_set(&self) -> bool {
        self.row_ids == self.col_ids
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |K[i,j] − K[j,i]|`; `None` unless square.
    pub fn symmetry_error(&self) -> Option<f64> {
        let n = self.nrows();
        if n != self.ncols() {
            return None;
        }
        let mut err: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                err = err.max((self.values[[i, j]] - self.values[[j, i]]).abs());
            }
        }
        Some(err)
    }

    pub fn trace(&self) -> f64 {
        self.values.diag().sum()
    }

    /// Smallest eigenvalue of the symmetrized matrix; `None` unless square.
    pub fn min_eigenvalue(&self) -> Option<f64> {
        let n = self.nrows();
        if n != self.ncols() {
            return None;
        }
        let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (self.values[[i, j]] + self.values[[j, i]]));
        let eig = SymmetricEigen::new(m);
        eig.eigenvalues.iter().cloned().reduce(f64::min)
    }

    /// PSD up to `−1e-8·trace/n`.
    pub fn is_psd(&self) -> bool {
        match self.min_eigenvalue() {
            Some(l) => l > -1e-8 * self.trace().abs() / self.nrows().max(1) as f64,
            None => false,
        }
    }

    pub fn transpose(&self) -> KernelMatrix {
        KernelMatrix {
            values: self.values.t().to_owned(),
            row_ids: self.col_ids.clone(),
            col_ids: self.row_ids.clone(),
            kind: self.kind.clone(),
            meta: self.meta.clone(),
        }
    }

    /// Submatrix on the given row and column positions.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> KernelMatrix {
        let values = Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| self.values[[rows[i], cols[j]]]);
        KernelMatrix {
            values,
            row_ids: rows.iter().map(|&r| self.row_ids[r]).collect(),
            col_ids: cols.iter().map(|&c| self.col_ids[c]).collect(),
            kind: self.kind.clone(),
            meta: self.meta.clone(),
        }
    }
}
