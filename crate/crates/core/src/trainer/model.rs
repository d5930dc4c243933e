use ndarray::ArrayView2;

use crate::error::Result;
use crate::nn::{WeightVector, ZeroOutputWrapper};
use crate::real::Real;

/// Anything the shared optimizer can train on input batches.
///
/// Predictions are split into a part that varies with the parameters and a
/// fixed additive offset, so trainers can evaluate the offset once per
/// dataset.
pub trait ParametricModel<T: Real> {
    fn params(&self) -> &[T];
    fn params_mut(&mut self) -> &mut [T];
    fn predict_varying(&self, x: ArrayView2<T>) -> Result<Vec<T>>;
    fn fixed_offset(&self, _x: ArrayView2<T>) -> Result<Option<Vec<T>>> {
        Ok(None)
    }
    /// `Σ_b cot_b ∇_params prediction(x_b)`.
    fn gradient(&self, x: ArrayView2<T>, cot: &[T]) -> Result<Vec<T>>;

    fn predict(&self, x: ArrayView2<T>) -> Result<Vec<T>> {
        let v = self.predict_varying(x.view())?;
        Ok(match self.fixed_offset(x)? {
            Some(o) => v.into_iter().zip(o).map(|(a, b)| a + b).collect(),
            None => v,
        })
    }
}

/// Trainable form of a [`ZeroOutputWrapper`]; weights start at `w0`.
#[derive(Clone, Debug)]
pub struct ZeroOutputModel<T> {
    pub wrapper: ZeroOutputWrapper<T>,
    pub w: WeightVector<T>,
}

impl<T: Real> ZeroOutputModel<T> {
    pub fn new(wrapper: ZeroOutputWrapper<T>) -> Self {
        let w = wrapper.w0.clone();
        ZeroOutputModel { wrapper, w }
    }
}

impl<T: Real> ParametricModel<T> for ZeroOutputModel<T> {
    fn params(&self) -> &[T] {
        &self.w.flat
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.w.flat
    }

    fn predict_varying(&self, x: ArrayView2<T>) -> Result<Vec<T>> {
        self.wrapper.network().forward(&self.w.flat, x)
    }

    fn fixed_offset(&self, x: ArrayView2<T>) -> Result<Option<Vec<T>>> {
        let f0 = self.wrapper.reference_outputs(x)?;
        Ok(Some(f0.into_iter().map(|v| -v).collect()))
    }

    fn gradient(&self, x: ArrayView2<T>, cot: &[T]) -> Result<Vec<T>> {
        self.wrapper.network().vjp(&self.w.flat, x, cot)
    }
}
