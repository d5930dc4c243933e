//! Infinite-width NTKs of Relu networks via the arc-cosine recursion.
//!
//! For a fully-connected stack the state per input pair is three scalars
//! (the two variances and the covariance) plus the NTK accumulator. For
//! conv/pool stacks the same quantities become `positions × positions`
//! matrices: convolution averages the covariance over the nine shared
//! offsets (zero-padded borders contribute nothing), pooling averages over
//! window pairs and the flatten-plus-dense head keeps the positional
//! diagonal.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use ndarray::parallel::prelude::*;

use super::{KernelKind, KernelMatrix, KernelMeta};
use crate::error::{Error, Result};
use crate::nn::{Layer, NetworkSpec};

/// Correlations this close to ±1 are snapped onto it; `acos` amplifies
/// rounding near the ends by a square root.
pub const RHO_SNAP: f64 = 1e-12;

/// `(E[relu(u)relu(u')], E[relu'(u)relu'(u')])` for `(u, u')` centred
/// Gaussian with variances `s11`, `s22` and covariance `s12`. A zero
/// variance means the variable is identically zero, which zeroes both terms
/// (`relu'(0) = 0`).
pub fn relu_expectations(s11: f64, s22: f64, s12: f64) -> (f64, f64) {
    if s11 <= 0.0 || s22 <= 0.0 {
        return (0.0, 0.0);
    }
    let norm = (s11 * s22).sqrt();
    let mut rho = (s12 / norm).clamp(-1.0, 1.0);
    if 1.0 - rho.abs() < RHO_SNAP {
        rho = rho.signum();
    }
    let theta = rho.acos();
    let k1 = norm * ((1.0 - rho * rho).max(0.0).sqrt() + (PI - theta) * rho) / (2.0 * PI);
    let k0 = (PI - theta) / (2.0 * PI);
    (k1, k0)
}

/// Covariance and NTK of the current activations for one input pair,
/// indexed by `(position, position')`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovTensorState {
    pub height: usize,
    pub width: usize,
    pub sigma: Array2<f64>,
    pub theta: Array2<f64>,
}

fn conv_cov(k: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let p = h * w;
    let mut out = Array2::<f64>::zeros((p, p));
    let src = k.as_slice().expect("contiguous");
    let dst = out.as_slice_mut().expect("contiguous");
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = x as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let pr = y * w + x;
                    let sr = sy as usize * w + sx as usize;
                    let drow = &mut dst[pr * p..(pr + 1) * p];
                    let srow = &src[sr * p..(sr + 1) * p];
                    for y2 in 0..h {
                        let sy2 = y2 as isize + dy;
                        if sy2 < 0 || sy2 >= h as isize {
                            continue;
                        }
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = (w as isize - dx.max(0)) as usize;
                        for x2 in x_lo..x_hi {
                            let sx2 = (x2 as isize + dx) as usize;
                            drow[y2 * w + x2] += srow[sy2 as usize * w + sx2];
                        }
                    }
                }
            }
        }
    }
    out.mapv_inplace(|v| v / 9.0);
    out
}

fn pool_cov(k: &Array2<f64>, h: usize, w: usize, window: usize, stride: usize) -> (Array2<f64>, usize, usize) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let members = |o: usize| -> Vec<usize> {
        let (oy, ox) = (o / ow, o % ow);
        let mut v = Vec::with_capacity(window * window);
        for dy in 0..window {
            for dx in 0..window {
                v.push((oy * stride + dy) * w + ox * stride + dx);
            }
        }
        v
    };
    let groups: Vec<Vec<usize>> = (0..oh * ow).map(members).collect();
    let norm = 1.0 / (window * window * window * window) as f64;
    let out = Array2::from_shape_fn((oh * ow, oh * ow), |(a, b)| {
        let mut s = 0.0;
        for &p in &groups[a] {
            for &q in &groups[b] {
                s += k[[p, q]];
            }
        }
        s * norm
    });
    (out, oh, ow)
}

impl CovTensorState {
    /// Channel-averaged input covariance; the NTK accumulator starts at zero.
    pub fn from_inputs(x: ArrayView1<f64>, y: ArrayView1<f64>, height: usize, width: usize, channels: usize) -> Self {
        let p = height * width;
        let xm = x.to_shape((p, channels)).expect("input reshape");
        let ym = y.to_shape((p, channels)).expect("input reshape");
        let mut sigma = xm.dot(&ym.t());
        sigma.mapv_inplace(|v| v / channels as f64);
        CovTensorState {
            height,
            width,
            theta: Array2::zeros(sigma.raw_dim()),
            sigma,
        }
    }

    /// Dense layer on a flat (1×1) state.
    pub fn dense(&mut self, bias_var: f64) {
        let k = self.sigma[[0, 0]];
        self.sigma[[0, 0]] = k + bias_var;
        self.theta[[0, 0]] += k + bias_var;
    }

    pub fn conv(&mut self, bias_var: f64) {
        let sum = &self.sigma + &self.theta;
        self.sigma = conv_cov(&self.sigma, self.height, self.width);
        self.theta = conv_cov(&sum, self.height, self.width);
        if bias_var > 0.0 {
            self.sigma.mapv_inplace(|v| v + bias_var);
            self.theta.mapv_inplace(|v| v + bias_var);
        }
    }

    /// Relu given the per-position pre-activation variances of both inputs.
    pub fn relu(&mut self, var_x: &[f64], var_y: &[f64]) {
        let p = self.height * self.width;
        for i in 0..p {
            for j in 0..p {
                let (k1, k0) = relu_expectations(var_x[i], var_y[j], self.sigma[[i, j]]);
                self.sigma[[i, j]] = k1;
                self.theta[[i, j]] *= k0;
            }
        }
    }

    pub fn avg_pool(&mut self, window: usize, stride: usize) {
        let (sigma, oh, ow) = pool_cov(&self.sigma, self.height, self.width, window, stride);
        let (theta, _, _) = pool_cov(&self.theta, self.height, self.width, window, stride);
        self.sigma = sigma;
        self.theta = theta;
        self.height = oh;
        self.width = ow;
    }

    /// Flatten feeding a dense layer keeps only same-position terms.
    pub fn flatten(&mut self) {
        let p = (self.height * self.width) as f64;
        self.sigma = Array2::from_elem((1, 1), self.sigma.diag().sum() / p);
        self.theta = Array2::from_elem((1, 1), self.theta.diag().sum() / p);
        self.height = 1;
        self.width = 1;
    }
}

/// Runs the recursion for one pair. With `diags` (the per-Relu variances of
/// `x` and `y`) it is a cross pass; without, it is a self pass (`x == y`)
/// whose own diagonals are recorded and returned.
fn propagate(
    spec: &NetworkSpec,
    x: ArrayView1<f64>,
    y: ArrayView1<f64>,
    diags: Option<(&[Vec<f64>], &[Vec<f64>])>,
) -> (f64, Vec<Vec<f64>>) {
    let (h, w, c) = spec.input_shape.hwc();
    let bias_var = if spec.use_bias { spec.bias_std * spec.bias_std } else { 0.0 };
    let mut state = CovTensorState::from_inputs(x, y, h, w, c);
    let mut recorded = Vec::new();
    let mut relu_index = 0;
    for layer in &spec.layers {
        match *layer {
            Layer::Dense { .. } => state.dense(bias_var),
            Layer::Conv { .. } => state.conv(bias_var),
            Layer::Relu => {
                match diags {
                    Some((ax, ay)) => state.relu(&ax[relu_index], &ay[relu_index]),
                    None => {
                        let d = state.sigma.diag().to_vec();
                        state.relu(&d, &d);
                        recorded.push(d);
                    }
                }
                relu_index += 1;
            }
            Layer::AvgPool { window, stride } => state.avg_pool(window, stride),
            Layer::Flatten => state.flatten(),
        }
    }
    (state.theta[[0, 0]], recorded)
}

fn self_diagonals(spec: &NetworkSpec, x: ArrayView1<f64>) -> Vec<Vec<f64>> {
    propagate(spec, x, x, None).1
}

/// Exact infinite NTK for any spec in the layer vocabulary.
///
/// Memory per pair grows with the square of the spatial positions; the
/// recursion refuses inputs whose state would exceed `memory_budget_bytes`.
pub fn infinite_ntk_cnn(spec: &NetworkSpec, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<KernelMatrix> {
    infinite_ntk_cnn_with_budget(spec, x, y, 1 << 30)
}

pub(crate) fn infinite_ntk_cnn_with_budget(
    spec: &NetworkSpec,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    memory_budget_bytes: u64,
) -> Result<KernelMatrix> {
    crate::nn::Network::new(spec)?;
    let (h, w, _) = spec.input_shape.hwc();
    let p = (h * w) as u64;
    // sigma, theta, their sum and one conv output alive at once
    let required = 4 * p * p * 8;
    if required > memory_budget_bytes {
        return Err(Error::MemoryBudget {
            required,
            budget: memory_budget_bytes,
        });
    }
    let n_in = spec.input_shape.numel();
    for m in [&x, &y] {
        if m.ncols() != n_in {
            return Err(Error::Shape(format!("inputs have {} features, spec expects {n_in}", m.ncols())));
        }
    }
    let dx: Vec<Vec<Vec<f64>>> = x.axis_iter(Axis(0)).into_par_iter().map(|r| self_diagonals(spec, r)).collect();
    let dy: Vec<Vec<Vec<f64>>> = y.axis_iter(Axis(0)).into_par_iter().map(|r| self_diagonals(spec, r)).collect();
    let cols = y.nrows();
    let values: Vec<f64> = (0..x.nrows() * cols)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / cols, idx % cols);
            propagate(spec, x.row(i), y.row(j), Some((&dx[i], &dy[j]))).0
        })
        .collect();
    let values = Array2::from_shape_vec((x.nrows(), cols), values).expect("gram shape");
    Ok(KernelMatrix::new(
        values,
        KernelKind::InfiniteExact,
        KernelMeta {
            spec_hash: spec.spec_hash(),
            ..Default::default()
        },
    ))
}

/// Exact infinite NTK of a Relu MLP with `depth` hidden layers on flattened
/// inputs. `bias_std` adds the bias variance at every layer.
pub fn infinite_ntk_mlp(depth: usize, x: ArrayView2<f64>, y: ArrayView2<f64>, bias_std: Option<f64>) -> Result<KernelMatrix> {
    if x.ncols() != y.ncols() {
        return Err(Error::Shape(format!("{} vs {} input features", x.ncols(), y.ncols())));
    }
    let d = x.ncols() as f64;
    let b2 = bias_std.map_or(0.0, |b| b * b);
    // Per-input pre-activation variances at each hidden layer.
    let variances = |m: &ArrayView2<f64>| -> Result<Vec<Vec<f64>>> {
        m.axis_iter(Axis(0))
            .map(|r| {
                let mut s = r.dot(&r) / d + b2;
                let mut out = Vec::with_capacity(depth);
                for _ in 0..depth {
                    if s <= 0.0 {
                        return Err(Error::DegenerateInput(
                            "zero-norm input has no defined correlation".into(),
                        ));
                    }
                    out.push(s);
                    s = s / 2.0 + b2;
                }
                Ok(out)
            })
            .collect()
    };
    let vx = variances(&x)?;
    let vy = variances(&y)?;
    let mut values = x.dot(&y.t());
    values.mapv_inplace(|v| v / d + b2);
    values.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(i, mut row)| {
        for (j, v) in row.iter_mut().enumerate() {
            let mut sigma = *v;
            let mut theta = sigma;
            for l in 0..depth {
                let (k1, k0) = relu_expectations(vx[i][l], vy[j][l], sigma);
                sigma = k1 + b2;
                theta = sigma + theta * k0;
            }
            *v = theta;
        }
    });
    Ok(KernelMatrix::new(
        values,
        KernelKind::InfiniteExact,
        KernelMeta {
            spec_hash: format!("mlp-depth{depth}"),
            ..Default::default()
        },
    ))
}

/// Number of hidden Relu layers if `spec` is a plain MLP
/// (`[Flatten] (Dense Relu)* Dense`), else `None`.
fn mlp_depth(spec: &NetworkSpec) -> Option<usize> {
    let mut layers = spec.layers.as_slice();
    if let [Layer::Flatten, rest @ ..] = layers {
        layers = rest;
    } else if spec.input_shape.hwc().0 * spec.input_shape.hwc().1 != 1 {
        return None;
    }
    let (last, body) = layers.split_last()?;
    if !matches!(last, Layer::Dense { .. }) || body.len() % 2 != 0 {
        return None;
    }
    for pair in body.chunks(2) {
        if !matches!(pair, [Layer::Dense { .. }, Layer::Relu]) {
            return None;
        }
    }
    Some(body.len() / 2)
}

/// Infinite NTK of `spec`, using the scalar recursion for plain MLPs and the
/// positional recursion otherwise.
pub fn infinite_ntk(spec: &NetworkSpec, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<KernelMatrix> {
    crate::nn::Network::new(spec)?;
    match mlp_depth(spec) {
        Some(depth) => {
            let bias = spec.use_bias.then_some(spec.bias_std);
            let mut k = infinite_ntk_mlp(depth, x, y, bias)?;
            k.meta.spec_hash = spec.spec_hash();
            Ok(k)
        }
        None => infinite_ntk_cnn(spec, x, y),
    }
}
