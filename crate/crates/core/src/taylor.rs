//! Taylor expansions of a network around anchor weights `w0`.
//!
//! With `d = w − w0`:
//!
//! * `G1(w, x)     = ∇f(w0, x)·d` (the empirical NTK model, no offset)
//! * `G2Only(w, x) = ½ dᵀ∇²f(w0, x) d`
//! * `G2Full(w, x) = f(w0, x) + G1 + G2Only`
//!
//! The quadratic term is evaluated by a second-order forward pass along
//! `d`, which equals `½·d·hvp(d)` without a per-sample reverse sweep.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, NetworkSpec, WeightVector};
use crate::real::Real;
use crate::trainer::ParametricModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaylorKind {
    Network,
    G1,
    G2Only,
    G2Full,
}

/// Where the anchor weights came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AnchorProvenance {
    Init { seed: u64 },
    AfterTrain { trained_on: usize, step: u64 },
}

#[derive(Clone, Debug)]
pub struct TaylorModel<T> {
    pub kind: TaylorKind,
    network: Network,
    pub w0: WeightVector<T>,
    pub w: WeightVector<T>,
    pub provenance: AnchorProvenance,
}

impl<T: Real> TaylorModel<T> {
    /// Anchors a model at `w0`; the trainable weights start at `w0`.
    pub fn new(kind: TaylorKind, spec: &NetworkSpec, w0: WeightVector<T>, provenance: AnchorProvenance) -> Result<Self> {
        let network = Network::new(spec)?;
        if w0.len() != network.num_params() {
            return Err(Error::Length {
                expected: network.num_params(),
                got: w0.len(),
            });
        }
        Ok(TaylorModel {
            kind,
            network,
            w: w0.clone(),
            w0,
            provenance,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.network.spec()
    }

    pub fn set_weights(&mut self, w: Vec<T>) -> Result<()> {
        self.w = self.w.with_values(w)?;
        Ok(())
    }

    fn displacement(&self) -> Vec<T> {
        self.w.delta_from(&self.w0)
    }

    /// Model output for every row of `x`.
    pub fn predict(&self, x: ArrayView2<T>) -> Result<Vec<T>> {
        let varying = self.varying_part(x.view())?;
        Ok(match self.constant_part(x)? {
            Some(offset) => varying.into_iter().zip(offset).map(|(a, b)| a + b).collect(),
            None => varying,
        })
    }

    /// The part of the prediction that depends on `w`.
    fn varying_part(&self, x: ArrayView2<T>) -> Result<Vec<T>> {
        let half = T::of(0.5);
        match self.kind {
            TaylorKind::Network => self.network.forward(&self.w.flat, x),
            TaylorKind::G1 => self.network.jvp(&self.w0.flat, x, &self.displacement()),
            TaylorKind::G2Only => {
                let (_, _, second) = self.network.second_order(&self.w0.flat, x, &self.displacement())?;
                Ok(second.into_iter().map(|q| q * half).collect())
            }
            TaylorKind::G2Full => {
                let (_, lin, second) = self.network.second_order(&self.w0.flat, x, &self.displacement())?;
                Ok(lin.into_iter().zip(second).map(|(l, q)| l + q * half).collect())
            }
        }
    }

    /// `f(w0, x)` for the full second-order model, nothing otherwise.
    fn constant_part(&self, x: ArrayView2<T>) -> Result<Option<Vec<T>>> {
        match self.kind {
            TaylorKind::G2Full => Ok(Some(self.network.forward(&self.w0.flat, x)?)),
            _ => Ok(None),
        }
    }

    /// `∇_w` of the model output at a single input.
    pub fn param_gradient(&self, x: &[T]) -> Result<Vec<T>> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        self.gradient_batch(view, &[T::one()])
    }

    /// `Σ_b cot_b ∇_w model(w, x_b)`.
    pub fn gradient_batch(&self, x: ArrayView2<T>, cot: &[T]) -> Result<Vec<T>> {
        match self.kind {
            TaylorKind::Network => self.network.vjp(&self.w.flat, x, cot),
            TaylorKind::G1 => self.network.vjp(&self.w0.flat, x, cot),
            TaylorKind::G2Only => Ok(self.network.hvp(&self.w0.flat, x, &self.displacement(), cot)?.1),
            TaylorKind::G2Full => {
                let (g, hv) = self.network.hvp(&self.w0.flat, x, &self.displacement(), cot)?;
                Ok(g.into_iter().zip(hv).map(|(a, b)| a + b).collect())
            }
        }
    }
}

impl<T: Real> ParametricModel<T> for TaylorModel<T> {
    fn params(&self) -> &[T] {
        &self.w.flat
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.w.flat
    }

    fn predict_varying(&self, x: ArrayView2<T>) -> Result<Vec<T>> {
        self.varying_part(x)
    }

    fn fixed_offset(&self, x: ArrayView2<T>) -> Result<Option<Vec<T>>> {
        self.constant_part(x)
    }

    fn gradient(&self, x: ArrayView2<T>, cot: &[T]) -> Result<Vec<T>> {
        self.gradient_batch(x, cot)
    }
}
