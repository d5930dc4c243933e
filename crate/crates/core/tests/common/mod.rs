//! Independent reference code for the integration tests: a loop-level
//! network evaluator, finite differences and small linear-algebra helpers.
#![allow(dead_code)]

use ndarray::Array2;
use ntklab::nn::{InputShape, Layer, NetworkSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), normals(rng, rows * cols)).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Output of the loop-level evaluator plus the smallest pre-activation
/// magnitude seen at any Relu (how close the input sits to a kink).
pub struct Reference {
    pub output: f64,
    pub min_preactivation: f64,
}

/// Evaluates a network one multiply-add at a time. Weight layout per
/// parametric layer: `out × fan_in` row-major (conv columns ordered
/// `(ky, kx, c)`), followed by `out` biases when enabled.
pub fn reference_forward(spec: &NetworkSpec, w: &[f64], x: &[f64]) -> Reference {
    let (mut h, mut wd, mut c) = match spec.input_shape {
        InputShape::Image { height, width, channels } => (height, width, channels),
        InputShape::Vector { dim } => (1, 1, dim),
    };
    let mut a: Vec<f64> = x.to_vec();
    let mut off = 0;
    let mut min_pre = f64::INFINITY;
    let at = |a: &[f64], y: usize, x: usize, ch: usize, wd: usize, c: usize| a[(y * wd + x) * c + ch];
    for layer in &spec.layers {
        match *layer {
            Layer::Dense { out_units } => {
                let fan_in = h * wd * c;
                let scale = 1.0 / (fan_in as f64).sqrt();
                let mut z = vec![0.0; out_units];
                for (o, zo) in z.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for i in 0..fan_in {
                        s += w[off + o * fan_in + i] * a[i];
                    }
                    *zo = scale * s;
                }
                off += out_units * fan_in;
                if spec.use_bias {
                    for (o, zo) in z.iter_mut().enumerate() {
                        *zo += spec.bias_std * w[off + o];
                    }
                    off += out_units;
                }
                a = z;
                h = 1;
                wd = 1;
                c = out_units;
            }
            Layer::Conv { out_channels } => {
                let fan_in = 9 * c;
                let scale = 1.0 / (fan_in as f64).sqrt();
                let mut z = vec![0.0; h * wd * out_channels];
                for y in 0..h {
                    for xx in 0..wd {
                        for o in 0..out_channels {
                            let mut s = 0.0;
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    for ch in 0..c {
                                        let wi = off + o * fan_in + (ky * 3 + kx) * c + ch;
                                        s += w[wi] * at(&a, sy as usize, sx as usize, ch, wd, c);
                                    }
                                }
                            }
                            z[(y * wd + xx) * out_channels + o] = scale * s;
                        }
                    }
                }
                off += out_channels * fan_in;
                if spec.use_bias {
                    for p in 0..h * wd {
                        for o in 0..out_channels {
                            z[p * out_channels + o] += spec.bias_std * w[off + o];
                        }
                    }
                    off += out_channels;
                }
                a = z;
                c = out_channels;
            }
            Layer::Relu => {
                for v in a.iter_mut() {
                    min_pre = min_pre.min(v.abs());
                    *v = v.max(0.0);
                }
            }
            Layer::AvgPool { window, stride } => {
                let (oh, ow) = ((h - window) / stride + 1, (wd - window) / stride + 1);
                let mut z = vec![0.0; oh * ow * c];
                for y in 0..oh {
                    for xx in 0..ow {
                        for ch in 0..c {
                            let mut s = 0.0;
                            for dy in 0..window {
                                for dx in 0..window {
                                    s += at(&a, y * stride + dy, xx * stride + dx, ch, wd, c);
                                }
                            }
                            z[(y * ow + xx) * c + ch] = s / (window * window) as f64;
                        }
                    }
                }
                a = z;
                h = oh;
                wd = ow;
            }
            Layer::Flatten => {
                c = h * wd * c;
                h = 1;
                wd = 1;
            }
        }
    }
    assert_eq!(off, w.len(), "reference layout consumed every parameter");
    Reference { output: a[0], min_preactivation: min_pre }
}

/// Central-difference gradient of `f` at `w`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, w: &[f64], h: f64) -> Vec<f64> {
    let mut wp = w.to_vec();
    (0..w.len())
        .map(|i| {
            let orig = wp[i];
            wp[i] = orig + h;
            let up = f(&wp);
            wp[i] = orig - h;
            let down = f(&wp);
            wp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest coordinate error relative to the larger of the coordinate and
/// 1e-3 of the vector's largest entry.
pub fn max_rel_vec_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3 * scale).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// Gaussian elimination with partial pivoting, for small dense systems.
pub fn gauss_solve(a: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a[[i, j]]).chain([b[i]]).collect()).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = m[r][col] / m[col][col];
                for k in col..=n {
                    m[r][k] -= f * m[col][k];
                }
            }
        }
    }
    (0..n).map(|i| m[i][n] / m[i][i]).collect()
}
