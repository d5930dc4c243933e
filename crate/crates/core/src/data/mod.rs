//! Labeled ±1 datasets: the synthetic noisy-parity task and image corpora.

mod corpus;

use std::collections::HashSet;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use corpus::{
    convert_cifar10_bin, convert_raw_hwc, load_corpus, CorpusManifest, LabelRule, CLASS_FILE, INPUT_FILE,
    MANIFEST_FILE,
};

use crate::error::{Error, Result};
use crate::nn::InputShape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { seed: u64, dim: usize, noise_var: f64 },
    Corpus { path: String, rule: LabelRule },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// One flattened sample per row, HWC order for images.
    pub inputs: Array2<f64>,
    pub shape: InputShape,
    pub labels: Vec<f64>,
    pub ids: Vec<u64>,
    pub provenance: Provenance,
}

/// Per-channel mean and standard deviation of an image split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LabeledDataset {
    pub fn new(
        inputs: Array2<f64>,
        shape: InputShape,
        labels: Vec<f64>,
        ids: Vec<u64>,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = inputs.nrows();
        if labels.len() != n {
            return Err(Error::Length { expected: n, got: labels.len() });
        }
        if ids.len() != n {
            return Err(Error::Length { expected: n, got: ids.len() });
        }
        if inputs.ncols() != shape.numel() {
            return Err(Error::Shape(format!(
                "rows have {} values, input shape needs {}",
                inputs.ncols(),
                shape.numel()
            )));
        }
        if let Some(bad) = labels.iter().find(|v| **v != 1.0 && **v != -1.0) {
            return Err(Error::Data(format!("label {bad} is not ±1")));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Data(format!("duplicate sample id {dup}")));
        }
        Ok(LabeledDataset { inputs, shape, labels, ids, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id_set(&self) -> HashSet<u64> {
        self.ids.iter().copied().collect()
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select(Axis(0), idx),
            shape: self.shape,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// The first `n` rows.
    pub fn prefix(&self, n: usize) -> Result<LabeledDataset> {
        if n > self.len() {
            return Err(Error::InsufficientSamples { requested: n, available: self.len() });
        }
        Ok(self.select(&(0..n).collect::<Vec<_>>()))
    }

    /// Uniform draw of `n` rows without replacement, skipping ids in
    /// `disjoint_from`.
    pub fn subset(&self, n: usize, seed: u64, disjoint_from: Option<&HashSet<u64>>) -> Result<LabeledDataset> {
        let mut pool: Vec<usize> = (0..self.len())
            .filter(|&i| disjoint_from.is_none_or(|ex| !ex.contains(&self.ids[i])))
            .collect();
        if n > pool.len() {
            return Err(Error::InsufficientSamples { requested: n, available: pool.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (chosen, _) = pool.partial_shuffle(&mut rng, n);
        Ok(self.select(chosen))
    }

    /// Subsets for every size in `sizes`. With `nested`, one permutation is
    /// drawn and each subset is a prefix of it, so smaller sets are contained
    /// in larger ones; otherwise each size gets an independent draw.
    pub fn subsets(&self, sizes: &[usize], seed: u64, nested: bool) -> Result<Vec<LabeledDataset>> {
        let largest = sizes.iter().copied().max().unwrap_or(0);
        if largest > self.len() {
            return Err(Error::InsufficientSamples { requested: largest, available: self.len() });
        }
        if nested {
            let perm = self.subset(largest, seed, None)?;
            sizes.iter().map(|&n| perm.prefix(n)).collect()
        } else {
            sizes
                .iter()
                .enumerate()
                .map(|(k, &n)| self.subset(n, seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15), None))
                .collect()
        }
    }

    /// Hash of the provenance and ordered id list, used as a cache key for
    /// kernel slices.
    pub fn slice_hash(&self) -> String {
        let tag = serde_json::to_string(&self.provenance).expect("provenance serializes");
        crate::kernel::ids_hash(&self.ids, tag.as_bytes().iter().map(|b| *b as u64).collect::<Vec<_>>().as_slice())
    }

    /// Balanced subsample: the larger label side is cut to the size of the
    /// smaller one. Row order of the kept samples is preserved.
    pub fn balanced(&self, seed: u64) -> Result<LabeledDataset> {
        let pos: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] > 0.0).collect();
        let neg: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] < 0.0).collect();
        let k = pos.len().min(neg.len());
        if k == 0 {
            return Err(Error::Data("one label side is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::with_capacity(2 * k);
        for mut side in [pos, neg] {
            if side.len() > k {
                side.shuffle(&mut rng);
                side.truncate(k);
            }
            keep.extend(side);
        }
        keep.sort_unstable();
        Ok(self.select(&keep))
    }

    /// Per-channel statistics over all rows. Vector inputs count as one
    /// channel per coordinate.
    pub fn channel_stats(&self) -> ChannelStats {
        let c = self.shape.hwc().2;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for row in self.inputs.rows() {
            for (j, v) in row.iter().enumerate() {
                sum[j % c] += v;
                sq[j % c] += v * v;
            }
        }
        let count = (self.inputs.len() / c.max(1)).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt())
            .map(|s| if s > 0.0 { s } else { 1.0 })
            .collect();
        ChannelStats { mean, std }
    }

    pub fn normalize_with(&mut self, stats: &ChannelStats) {
        let c = stats.mean.len();
        for mut row in self.inputs.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - stats.mean[j % c]) / stats.std[j % c];
            }
        }
    }
}

/// The noisy-parity task: `z` uniform on `{−1,1}^dim`, `x = z + ε` with
/// `ε ~ N(0, noise_var·I)`, label `z₁·z₂`.
pub fn synthetic_parity(m: usize, dim: usize, noise_var: f64, seed: u64) -> Result<LabeledDataset> {
    if m == 0 || dim < 2 {
        return Err(Error::Config(format!("synthetic task needs m ≥ 1 and dim ≥ 2, got m={m}, dim={dim}")));
    }
    if !(noise_var >= 0.0 && noise_var.is_finite()) {
        return Err(Error::Config(format!("noise variance {noise_var} must be finite and nonnegative")));
    }
    let noise = Normal::new(0.0, noise_var.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Array2::zeros((m, dim));
    let mut labels = Vec::with_capacity(m);
    for mut row in inputs.rows_mut() {
        let mut z = [0.0; 2];
        for (j, v) in row.iter_mut().enumerate() {
            let zj = if rng.random::<bool>() { 1.0 } else { -1.0 };
            if j < 2 {
                z[j] = zj;
            }
            *v = zj + noise.sample(&mut rng);
        }
        labels.push(z[0] * z[1]);
    }
    LabeledDataset::new(
        inputs,
        InputShape::Vector { dim },
        labels,
        (0..m as u64).collect(),
        Provenance::Synthetic { seed, dim, noise_var },
    )
}
