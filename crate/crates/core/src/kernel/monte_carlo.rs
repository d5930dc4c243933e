use ndarray::{Array2, ArrayView2};

use super::{empirical_ntk_gram_with, GramOptions, KernelKind, KernelMatrix};
use crate::error::{Error, Result};
use crate::nn::{Network, NetworkSpec};

/// Seed-averaged empirical NTK at a fixed width.
#[derive(Clone, Debug)]
pub struct McEstimate {
    pub mean: KernelMatrix,
    /// Per-entry standard error of the mean.
    pub stderr: Array2<f64>,
}

/// Averages empirical NTK grams of `spec` rescaled to `width` over
/// independent initializations, one per seed.
pub fn mc_ntk_estimate(
    spec: &NetworkSpec,
    width: usize,
    seeds: &[u64],
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> Result<McEstimate> {
    if seeds.len() < 2 {
        return Err(Error::Config("Monte-Carlo estimate needs at least two seeds".into()));
    }
    let network = Network::new(&spec.with_width(width)?)?;
    let mut sum: Option<Array2<f64>> = None;
    let mut sum_sq: Option<Array2<f64>> = None;
    let mut template = None;
    for &seed in seeds {
        let w0 = network.init_weights::<f64>(seed);
        let k = empirical_ntk_gram_with(&network, &w0, x, y, GramOptions::default())?;
        let sq = k.values.mapv(|v| v * v);
        match (sum.as_mut(), sum_sq.as_mut()) {
            (Some(s), Some(q)) => {
                *s += &k.values;
                *q += &sq;
            }
            _ => {
                sum = Some(k.values.clone());
                sum_sq = Some(sq);
            }
        }
        template.get_or_insert(k);
    }
    let s = seeds.len() as f64;
    let mean = sum.expect("seeds nonempty") / s;
    let second = sum_sq.expect("seeds nonempty") / s;
    let stderr = ndarray::Zip::from(&mean).and(&second).map_collect(|&m, &q| {
        let var = ((q - m * m) * s / (s - 1.0)).max(0.0);
        (var / s).sqrt()
    });
    let mut k = template.expect("seeds nonempty");
    k.values = mean;
    k.kind = KernelKind::InfiniteMc {
        width,
        seeds: seeds.len(),
    };
    Ok(McEstimate { mean: k, stderr })
}
