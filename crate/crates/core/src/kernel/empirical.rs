//! Empirical NTK grams `K[i,j] = ∇f(x_i)·∇f(y_j)` at fixed weights.
//!
//! Dense layers contribute `(Δ_x·Δ_y)(a_x·a_y)/fan_in` (plus a bias term),
//! so their share is assembled from two small gram products without ever
//! forming per-sample gradients. Conv layers share weights across positions
//! and are handled by materializing each sample's layer gradient for one
//! block at a time.

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::{KernelKind, KernelMatrix, KernelMeta};
use crate::error::{Error, Result};
use crate::nn::plan::Op;
use crate::nn::{im2col, layer_factors, LayerFactor, Network, NetworkSpec, WeightVector};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GramOptions {
    /// Samples per block along each axis.
    pub block_size: usize,
    /// Upper bound on feature memory held for one pair of blocks.
    pub memory_budget_bytes: u64,
}

impl Default for GramOptions {
    fn default() -> Self {
        GramOptions {
            block_size: 256,
            memory_budget_bytes: 1 << 30,
        }
    }
}

enum LayerFeatures {
    /// Dense layer: adjoints `(b, out)` and inputs `(b, fan_in)`.
    Factored {
        delta: Array2<f64>,
        input: Array2<f64>,
        inv_fan_in: f64,
        bias_sq: Option<f64>,
    },
    /// Conv layer: per-sample gradients, `(b, layer_params)`.
    Materialized(Array2<f64>),
}

fn block_features(factors: Vec<LayerFactor<f64>>, bias_std: f64) -> Vec<LayerFeatures> {
    factors
        .into_iter()
        .map(|f| {
            let fan_in = f.view.fan_in();
            let scale = 1.0 / (fan_in as f64).sqrt();
            match f.conv {
                None => LayerFeatures::Factored {
                    delta: f.delta,
                    input: f.input,
                    inv_fan_in: 1.0 / fan_in as f64,
                    bias_sq: f.view.bias_offset.map(|_| bias_std * bias_std),
                },
                Some((h, w, cin)) => {
                    let positions = f.positions;
                    let batch = f.input.nrows() / positions;
                    let out = f.view.out();
                    let bias = f.view.bias_offset.is_some();
                    let len = out * fan_in + if bias { out } else { 0 };
                    let mut g = Array2::<f64>::zeros((batch, len));
                    for b in 0..batch {
                        let rows = b * positions..(b + 1) * positions;
                        let cols = im2col(f.input.slice(s![rows.clone(), ..]), h, w, cin);
                        let delta = f.delta.slice(s![rows, ..]);
                        let wg = delta.t().dot(&cols);
                        let mut row = g.row_mut(b);
                        for (dst, v) in row.iter_mut().zip(wg.iter()) {
                            *dst = v * scale;
                        }
                        if bias {
                            let sums = delta.sum_axis(Axis(0));
                            for (k, v) in sums.iter().enumerate() {
                                row[out * fan_in + k] = v * bias_std;
                            }
                        }
                    }
                    LayerFeatures::Materialized(g)
                }
            }
        })
        .collect()
}

fn block_gram(a: &[LayerFeatures], b: &[LayerFeatures]) -> Array2<f64> {
    let mut total: Option<Array2<f64>> = None;
    for (fa, fb) in a.iter().zip(b) {
        let part = match (fa, fb) {
            (
                LayerFeatures::Factored {
                    delta: da,
                    input: ia,
                    inv_fan_in,
                    bias_sq,
                },
                LayerFeatures::Factored {
                    delta: db, input: ib, ..
                },
            ) => {
                let dd = da.dot(&db.t());
                let mut aa = ia.dot(&ib.t());
                aa.mapv_inplace(|v| v * inv_fan_in);
                if let Some(b2) = bias_sq {
                    aa.mapv_inplace(|v| v + b2);
                }
                aa *= &dd;
                aa
            }
            (LayerFeatures::Materialized(ga), LayerFeatures::Materialized(gb)) => ga.dot(&gb.t()),
            _ => unreachable!("layer kinds line up"),
        };
        match total.as_mut() {
            Some(t) => *t += &part,
            None => total = Some(part),
        }
    }
    total.expect("network has parametric layers")
}

/// Bytes of block features one sample contributes.
fn row_bytes(network: &Network) -> u64 {
    network
        .plan()
        .ops
        .iter()
        .map(|op| match op {
            Op::Dense { view } => 8 * (view.out() + view.fan_in()) as u64,
            Op::Conv { view, h, w, cin } => {
                8 * (h * w * (view.out() + cin) + view.weight_len() + view.out()) as u64
            }
            _ => 0,
        })
        .sum()
}

/// Empirical NTK gram with default block size and memory budget.
pub fn empirical_ntk_gram(
    spec: &NetworkSpec,
    w0: &WeightVector<f64>,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> Result<KernelMatrix> {
    empirical_ntk_gram_with(&Network::new(spec)?, w0, x, y, GramOptions::default())
}

pub fn empirical_ntk_gram_with(
    network: &Network,
    w0: &WeightVector<f64>,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    opts: GramOptions,
) -> Result<KernelMatrix> {
    if w0.len() != network.num_params() {
        return Err(Error::Length {
            expected: network.num_params(),
            got: w0.len(),
        });
    }
    for m in [&x, &y] {
        if m.ncols() != network.input_len() {
            return Err(Error::Shape(format!(
                "inputs have {} features, network expects {}",
                m.ncols(),
                network.input_len()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::Shape("empty input batch".into()));
        }
    }
    let per_row = row_bytes(network).max(1);
    let budget_rows = (opts.memory_budget_bytes / (2 * per_row)) as usize;
    if budget_rows == 0 {
        return Err(Error::MemoryBudget {
            required: 2 * per_row,
            budget: opts.memory_budget_bytes,
        });
    }
    let bs = opts.block_size.max(1).min(budget_rows);
    let same = x.as_ptr() == y.as_ptr() && x.dim() == y.dim() && x.strides() == y.strides();
    let bias_std = network.spec().bias_std;
    let plan = network.plan();

    let features = |m: &ArrayView2<f64>, r0: usize| -> Vec<LayerFeatures> {
        let r1 = (r0 + bs).min(m.nrows());
        block_features(layer_factors(plan, &w0.flat, m.slice(s![r0..r1, ..])), bias_std)
    };

    let row_starts: Vec<usize> = (0..x.nrows()).step_by(bs).collect();
    let col_starts: Vec<usize> = (0..y.nrows()).step_by(bs).collect();
    let mut values = Array2::<f64>::zeros((x.nrows(), y.nrows()));

    // Column-block features are reused across every row block.
    let col_features: Vec<Vec<LayerFeatures>> = col_starts.par_iter().map(|&c0| features(&y, c0)).collect();
    let blocks: Vec<(usize, usize, Array2<f64>)> = row_starts
        .par_iter()
        .enumerate()
        .flat_map_iter(|(bi, &r0)| {
            let own;
            let rf: &Vec<LayerFeatures> = if same {
                &col_features[bi]
            } else {
                own = features(&x, r0);
                &own
            };
            let mut out = Vec::new();
            for (bj, &c0) in col_starts.iter().enumerate() {
                if same && bj < bi {
                    continue;
                }
                out.push((r0, c0, block_gram(rf, &col_features[bj])));
            }
            out
        })
        .collect();
    for (r0, c0, block) in blocks {
        let (br, bc) = block.dim();
        values.slice_mut(s![r0..r0 + br, c0..c0 + bc]).assign(&block);
        if same && r0 != c0 {
            values.slice_mut(s![c0..c0 + bc, r0..r0 + br]).assign(&block.t());
        }
    }
    Ok(KernelMatrix::new(
        values,
        KernelKind::EmpiricalAtWeights {
            anchor_tag: w0.anchor_tag.clone().unwrap_or_default(),
        },
        KernelMeta {
            spec_hash: network.spec().spec_hash(),
            ..Default::default()
        },
    ))
}
