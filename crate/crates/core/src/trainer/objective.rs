use ndarray::{Array2, ArrayView2, Axis};

use super::ParametricModel;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::cast_batch;
use crate::real::Real;

/// Rows evaluated per chunk when predicting a whole split.
const EVAL_CHUNK: usize = 2048;

/// A model bound to its train and test sets, addressed by sample index.
pub trait Objective {
    type Scalar: Real;

    fn num_train(&self) -> usize;
    fn num_test(&self) -> usize;
    fn params(&self) -> &[Self::Scalar];
    fn params_mut(&mut self) -> &mut [Self::Scalar];
    fn predict_train(&self, idx: &[usize]) -> Result<Vec<Self::Scalar>>;
    fn predict_test(&self) -> Result<Vec<Self::Scalar>>;
    /// Descent direction for the batch `idx` given per-sample cotangents.
    fn gradient(&self, idx: &[usize], cot: &[Self::Scalar]) -> Result<Vec<Self::Scalar>>;

    fn predict_all_train(&self) -> Result<Vec<Self::Scalar>> {
        let n = self.num_train();
        let mut out = Vec::with_capacity(n);
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            out.extend(self.predict_train(chunk)?);
        }
        Ok(out)
    }
}

/// A [`ParametricModel`] with its datasets cast to the model precision and
/// its fixed output offsets precomputed.
pub struct ModelObjective<'m, T: Real, M> {
    model: &'m mut M,
    train_x: Array2<T>,
    test_x: Array2<T>,
    train_offset: Option<Vec<T>>,
    test_offset: Option<Vec<T>>,
}

fn offsets<T: Real, M: ParametricModel<T>>(model: &M, x: &Array2<T>) -> Result<Option<Vec<T>>> {
    let mut out: Option<Vec<T>> = None;
    for chunk in x.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
        match model.fixed_offset(chunk)? {
            Some(o) => out.get_or_insert_with(Vec::new).extend(o),
            None => return Ok(None),
        }
    }
    Ok(out)
}

impl<'m, T: Real, M: ParametricModel<T>> ModelObjective<'m, T, M> {
    pub fn new(model: &'m mut M, train: &LabeledDataset, test: &LabeledDataset) -> Result<Self> {
        let train_x = cast_batch::<T>(train.inputs.view());
        let test_x = cast_batch::<T>(test.inputs.view());
        let train_offset = offsets(&*model, &train_x)?;
        let test_offset = offsets(&*model, &test_x)?;
        Ok(ModelObjective {
            model,
            train_x,
            test_x,
            train_offset,
            test_offset,
        })
    }

    fn predict_rows(&self, x: ArrayView2<T>, offset: Option<&[T]>, idx: Option<&[usize]>) -> Result<Vec<T>> {
        let mut v = self.model.predict_varying(x)?;
        if let Some(o) = offset {
            match idx {
                Some(idx) => v.iter_mut().zip(idx).for_each(|(p, &i)| *p += o[i]),
                None => v.iter_mut().zip(o).for_each(|(p, &b)| *p += b),
            }
        }
        Ok(v)
    }
}

impl<T: Real, M: ParametricModel<T>> Objective for ModelObjective<'_, T, M> {
    type Scalar = T;

    fn num_train(&self) -> usize {
        self.train_x.nrows()
    }

    fn num_test(&self) -> usize {
        self.test_x.nrows()
    }

    fn params(&self) -> &[T] {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut [T] {
        self.model.params_mut()
    }

    fn predict_train(&self, idx: &[usize]) -> Result<Vec<T>> {
        let x = self.train_x.select(Axis(0), idx);
        self.predict_rows(x.view(), self.train_offset.as_deref(), Some(idx))
    }

    fn predict_test(&self) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(self.test_x.nrows());
        for (c, chunk) in self.test_x.axis_chunks_iter(Axis(0), EVAL_CHUNK).enumerate() {
            let off = self
                .test_offset
                .as_deref()
                .map(|o| &o[c * EVAL_CHUNK..c * EVAL_CHUNK + chunk.nrows()]);
            out.extend(self.predict_rows(chunk, off, None)?);
        }
        Ok(out)
    }

    fn gradient(&self, idx: &[usize], cot: &[T]) -> Result<Vec<T>> {
        let x = self.train_x.select(Axis(0), idx);
        self.model.gradient(x.view(), cot)
    }
}

/// Kernel-expansion coefficients `a` with `f(x) = Σ_i a_i K(x, x_i)`.
pub struct KernelObjective<'k> {
    k_train: ArrayView2<'k, f64>,
    k_test: ArrayView2<'k, f64>,
    coefficients: Vec<f64>,
}

impl<'k> KernelObjective<'k> {
    pub fn new(k_train: ArrayView2<'k, f64>, k_test: ArrayView2<'k, f64>) -> Result<Self> {
        let n = k_train.nrows();
        if k_train.ncols() != n {
            return Err(Error::Shape(format!("train kernel is {}x{}, not square", n, k_train.ncols())));
        }
        if k_test.ncols() != n {
            return Err(Error::Shape(format!(
                "test kernel has {} columns, train set has {n} samples",
                k_test.ncols()
            )));
        }
        Ok(KernelObjective {
            k_train,
            k_test,
            coefficients: vec![0.0; n],
        })
    }
}

impl Objective for KernelObjective<'_> {
    type Scalar = f64;

    fn num_train(&self) -> usize {
        self.coefficients.len()
    }

    fn num_test(&self) -> usize {
        self.k_test.nrows()
    }

    fn params(&self) -> &[f64] {
        &self.coefficients
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.coefficients
    }

    fn predict_train(&self, idx: &[usize]) -> Result<Vec<f64>> {
        Ok(idx
            .iter()
            .map(|&i| self.k_train.row(i).iter().zip(&self.coefficients).map(|(k, a)| k * a).sum())
            .collect())
    }

    fn predict_all_train(&self) -> Result<Vec<f64>> {
        Ok(self.k_train.dot(&ndarray::ArrayView1::from(&self.coefficients)).to_vec())
    }

    fn predict_test(&self) -> Result<Vec<f64>> {
        Ok(self.k_test.dot(&ndarray::ArrayView1::from(&self.coefficients)).to_vec())
    }

    fn gradient(&self, idx: &[usize], cot: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.coefficients.len()];
        for (&i, c) in idx.iter().zip(cot) {
            g[i] += c;
        }
        Ok(g)
    }
}
