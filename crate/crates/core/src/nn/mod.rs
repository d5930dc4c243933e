//! NTK-parameterized networks and exact first/second-order derivatives
//! with respect to their weights.
//!
//! Every Dense or Conv layer computes `(1/√fan_in)·W·a`, with all weights
//! drawn i.i.d. `N(0, 1)`. `fan_in` is the input width for Dense layers and
//! `9·in_channels` for 3×3 convolutions.

mod engine;
mod io;
pub(crate) mod plan;
mod spec;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub(crate) use engine::{im2col, layer_factors, LayerFactor};
use engine::{backward, forward as run_forward, Order};
pub use io::{read_weights, write_weights, WeightSidecar};
pub use plan::LayerView;
use plan::Plan;
pub use spec::{cnn5, dense_readout, mlp4, myrtle_cnn, Architecture, InputShape, Layer, NetworkSpec};

use crate::error::{Error, Result};
use crate::real::Real;

/// Flat parameter vector plus the layout that maps it onto layers.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector<T> {
    pub flat: Vec<T>,
    pub layer_views: Vec<LayerView>,
    /// Links the vector to the initialization or checkpoint it came from.
    pub anchor_tag: Option<String>,
}

impl<T: Real> WeightVector<T> {
    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.flat
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.anchor_tag = Some(tag.into());
        self
    }

    /// Same layout, new values.
    pub fn with_values(&self, flat: Vec<T>) -> Result<Self> {
        if flat.len() != self.flat.len() {
            return Err(Error::Length {
                expected: self.flat.len(),
                got: flat.len(),
            });
        }
        Ok(WeightVector {
            flat,
            layer_views: self.layer_views.clone(),
            anchor_tag: self.anchor_tag.clone(),
        })
    }

    pub fn cast<U: Real>(&self) -> WeightVector<U> {
        WeightVector {
            flat: self.flat.iter().map(|v| U::of(v.f64())).collect(),
            layer_views: self.layer_views.clone(),
            anchor_tag: self.anchor_tag.clone(),
        }
    }

    /// `self − other`, elementwise.
    pub fn delta_from(&self, other: &WeightVector<T>) -> Vec<T> {
        self.flat.iter().zip(&other.flat).map(|(a, b)| *a - *b).collect()
    }
}

/// A spec compiled once for repeated evaluation.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    plan: Plan,
}

impl Network {
    pub fn new(spec: &NetworkSpec) -> Result<Self> {
        Ok(Network {
            spec: spec.clone(),
            plan: Plan::compile(spec)?,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.plan.num_params
    }

    /// Number of scalars per input sample.
    pub fn input_len(&self) -> usize {
        self.plan.input_len()
    }

    pub fn layer_views(&self) -> &[LayerView] {
        &self.plan.views
    }

    pub(crate) fn plan(&self) -> &Plan {
        &self.plan
    }

    /// Fresh NTK-parameterized weights: every entry i.i.d. `N(0, 1)` from a
    /// ChaCha8 stream seeded with `seed`. Values are drawn in `f64` and cast,
    /// so both precisions see the same draw.
    pub fn init_weights<T: Real>(&self, seed: u64) -> WeightVector<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = (0..self.plan.num_params)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::of(z)
            })
            .collect();
        WeightVector {
            flat,
            layer_views: self.plan.views.clone(),
            anchor_tag: Some(format!("init:{}:seed={seed}", self.spec.spec_hash())),
        }
    }

    fn check_weights<T: Real>(&self, w: &[T]) -> Result<()> {
        if w.len() != self.plan.num_params {
            return Err(Error::Length {
                expected: self.plan.num_params,
                got: w.len(),
            });
        }
        Ok(())
    }

    fn check_inputs<T: Real>(&self, x: &ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.plan.input_len() {
            return Err(Error::Shape(format!(
                "inputs have {} features, network expects {}",
                x.ncols(),
                self.plan.input_len()
            )));
        }
        Ok(())
    }

    /// Scalar output for every row of `x`.
    pub fn forward<T: Real>(&self, w: &[T], x: ArrayView2<T>) -> Result<Vec<T>> {
        self.check_weights(w)?;
        self.check_inputs(&x)?;
        if x.nrows() == 0 {
            return Ok(Vec::new());
        }
        Ok(run_forward(&self.plan, w, x, None, Order::Primal, false).out)
    }

    /// `Σ_b cot_b ∇_w f(w, x_b)`.
    pub fn vjp<T: Real>(&self, w: &[T], x: ArrayView2<T>, cot: &[T]) -> Result<Vec<T>> {
        self.check_weights(w)?;
        self.check_inputs(&x)?;
        if cot.len() != x.nrows() {
            return Err(Error::Length {
                expected: x.nrows(),
                got: cot.len(),
            });
        }
        if x.nrows() == 0 {
            return Ok(vec![T::zero(); self.plan.num_params]);
        }
        let pass = run_forward(&self.plan, w, x, None, Order::Primal, true);
        let tape = pass.tape.expect("tape kept");
        Ok(backward(&self.plan, w, None, &tape, cot).0)
    }

    /// Forward-mode directional derivatives `∇_w f(w, x_b)·v` for every row.
    pub fn jvp<T: Real>(&self, w: &[T], x: ArrayView2<T>, v: &[T]) -> Result<Vec<T>> {
        Ok(self.jvp_with_primal(w, x, v)?.1)
    }

    /// `(f(w, x_b), ∇_w f(w, x_b)·v)` for every row.
    pub fn jvp_with_primal<T: Real>(&self, w: &[T], x: ArrayView2<T>, v: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        self.check_weights(w)?;
        self.check_weights(v)?;
        self.check_inputs(&x)?;
        if x.nrows() == 0 {
            return Ok((Vec::new(), Vec::new()));
        }
        let pass = run_forward(&self.plan, w, x, Some(v), Order::Tangent, false);
        Ok((pass.out, pass.tangent.expect("tangent stream")))
    }

    /// Returns `(Σ_b cot_b ∇f(x_b), Σ_b cot_b ∇²f(x_b)·v)`.
    pub fn hvp<T: Real>(&self, w: &[T], x: ArrayView2<T>, v: &[T], cot: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        self.check_weights(w)?;
        self.check_weights(v)?;
        self.check_inputs(&x)?;
        if cot.len() != x.nrows() {
            return Err(Error::Length {
                expected: x.nrows(),
                got: cot.len(),
            });
        }
        if x.nrows() == 0 {
            let z = vec![T::zero(); self.plan.num_params];
            return Ok((z.clone(), z));
        }
        let pass = run_forward(&self.plan, w, x, Some(v), Order::Tangent, true);
        let tape = pass.tape.expect("tape kept");
        let (g, hv) = backward(&self.plan, w, Some(v), &tape, cot);
        Ok((g, hv.expect("hvp requested")))
    }

    /// Second-order expansion along `d` for every row:
    /// `(f(w, x), ∇f·d, dᵀ∇²f d)`.
    pub fn second_order<T: Real>(&self, w: &[T], x: ArrayView2<T>, d: &[T]) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
        self.check_weights(w)?;
        self.check_weights(d)?;
        self.check_inputs(&x)?;
        if x.nrows() == 0 {
            return Ok((Vec::new(), Vec::new(), Vec::new()));
        }
        let pass = run_forward(&self.plan, w, x, Some(d), Order::Second, false);
        Ok((
            pass.out,
            pass.tangent.expect("tangent stream"),
            pass.second.expect("second stream"),
        ))
    }
}

fn single<T: Real>(x: &[T]) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((1, x.len()), x).expect("row view")
}

/// Deterministic NTK initialization (see [`Network::init_weights`]).
pub fn init_weights<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<WeightVector<T>> {
    Ok(Network::new(spec)?.init_weights(seed))
}

pub fn forward<T: Real>(spec: &NetworkSpec, w: &WeightVector<T>, x: ArrayView2<T>) -> Result<Vec<T>> {
    Network::new(spec)?.forward(&w.flat, x)
}

/// Exact `∇_w f(w, x)` for a single input, by reverse accumulation.
pub fn grad_params<T: Real>(spec: &NetworkSpec, w: &WeightVector<T>, x: &[T]) -> Result<Vec<T>> {
    Network::new(spec)?.vjp(&w.flat, single(x), &[T::one()])
}

/// `∇_w f(w, x)·v` without materializing the gradient.
pub fn jvp_params<T: Real>(spec: &NetworkSpec, w: &WeightVector<T>, x: &[T], v: &[T]) -> Result<T> {
    Ok(Network::new(spec)?.jvp(&w.flat, single(x), v)?[0])
}

/// `∇²_w f(w, x)·v`, with Relu curvature taken as zero.
pub fn hvp_params<T: Real>(spec: &NetworkSpec, w: &WeightVector<T>, x: &[T], v: &[T]) -> Result<Vec<T>> {
    Ok(Network::new(spec)?.hvp(&w.flat, single(x), v, &[T::one()])?.1)
}

/// A network re-centred so that its output at `w0` is zero everywhere.
#[derive(Clone, Debug)]
pub struct ZeroOutputWrapper<T> {
    network: Network,
    pub w0: WeightVector<T>,
}

pub fn wrap_zero_output<T: Real>(spec: &NetworkSpec, w0: WeightVector<T>) -> Result<ZeroOutputWrapper<T>> {
    let network = Network::new(spec)?;
    network.check_weights(&w0.flat)?;
    Ok(ZeroOutputWrapper { network, w0 })
}

impl<T: Real> ZeroOutputWrapper<T> {
    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.network.spec()
    }

    /// `f(w0, x_b)` for every row; the offset the wrapper removes.
    pub fn reference_outputs(&self, x: ArrayView2<T>) -> Result<Vec<T>> {
        self.network.forward(&self.w0.flat, x)
    }

    pub fn forward(&self, w: &[T], x: ArrayView2<T>) -> Result<Vec<T>> {
        let f = self.network.forward(w, x.view())?;
        let f0 = self.reference_outputs(x)?;
        Ok(f.into_iter().zip(f0).map(|(a, b)| a - b).collect())
    }

    pub fn grad_params(&self, w: &[T], x: &[T]) -> Result<Vec<T>> {
        self.network.vjp(w, single(x), &[T::one()])
    }
}

/// Copies rows of `x` into an owned batch of a different precision.
pub fn cast_batch<T: Real>(x: ArrayView2<f64>) -> Array2<T> {
    x.mapv(T::of)
}
