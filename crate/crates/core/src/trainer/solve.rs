use nalgebra::{Cholesky, DMatrix, DVector};

use super::evaluate;
use crate::error::{Error, Result};
use crate::kernel::KernelMatrix;

/// Relative pivot below which `K + λI` is treated as singular.
const PIVOT_TOLERANCE: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaOutcome {
    pub lambda: f64,
    pub coefficients: Option<Vec<f64>>,
    pub test_predictions: Option<Vec<f64>>,
    pub test_error: Option<f64>,
    /// Why this λ was skipped, if it was.
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectSolveResult {
    pub outcomes: Vec<LambdaOutcome>,
    /// Index into `outcomes` of the lowest test error.
    pub best: Option<usize>,
}

/// Solves `(K + λI) a = y` by Cholesky for every `λ` in the grid and scores
/// each solution on the test kernel rows.
pub fn direct_solve(
    k_train: &KernelMatrix,
    k_test_train: &KernelMatrix,
    y: &[f64],
    y_test: &[f64],
    lambdas: &[f64],
) -> Result<DirectSolveResult> {
    let n = k_train.nrows();
    if k_train.ncols() != n {
        return Err(Error::Shape("train kernel is not square".into()));
    }
    if y.len() != n {
        return Err(Error::Length { expected: n, got: y.len() });
    }
    if k_test_train.ncols() != n || k_test_train.nrows() != y_test.len() {
        return Err(Error::Shape("test kernel does not match train/test sizes".into()));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::Config(format!("regularization {l} must be nonnegative")));
    }
    let scale = (0..n).map(|i| k_train.values[[i, i]].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let rhs = DVector::from_column_slice(y);
    let mut outcomes = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let m = DMatrix::from_fn(n, n, |i, j| {
            let sym = 0.5 * (k_train.values[[i, j]] + k_train.values[[j, i]]);
            if i == j {
                sym + lambda
            } else {
                sym
            }
        });
        let chol = Cholesky::new(m).filter(|c| {
            let l = c.l_dirty();
            (0..n).all(|i| l[(i, i)] * l[(i, i)] > PIVOT_TOLERANCE * (scale + lambda))
        });
        let Some(chol) = chol else {
            outcomes.push(LambdaOutcome {
                lambda,
                coefficients: None,
                test_predictions: None,
                test_error: None,
                skipped: Some(format!("K + {lambda}·I is singular to working precision")),
            });
            continue;
        };
        let a = chol.solve(&rhs);
        let a: Vec<f64> = a.iter().copied().collect();
        let pred = k_test_train.values.dot(&ndarray::ArrayView1::from(&a)).to_vec();
        outcomes.push(LambdaOutcome {
            lambda,
            test_error: Some(evaluate(&pred, y_test)),
            coefficients: Some(a),
            test_predictions: Some(pred),
            skipped: None,
        });
    }
    let best = outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.test_error.map(|e| (i, e)))
        .fold(None, |acc: Option<(usize, f64)>, (i, e)| match acc {
            Some((_, be)) if e >= be => acc,
            _ => Some((i, e)),
        })
        .map(|(i, _)| i);
    Ok(DirectSolveResult { outcomes, best })
}
