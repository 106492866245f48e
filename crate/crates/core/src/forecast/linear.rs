//! Sixteen independent ridge regressions on the flattened 100 standardized inputs.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::PredictorConfig;
use crate::error::{Error, Result};
use crate::features::{fit_standardizer, Sample, Standardizer, TargetVector, N_INPUTS};
use crate::types::N_FUNDAMENTALS;

pub const MIN_LINEAR_SAMPLES: usize = N_INPUTS + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// `100 × 16`, one column per target.
    pub coefficients: Array2<f64>,
    pub intercept: Array1<f64>,
    pub ridge_lambda: f64,
    pub standardizer: Standardizer,
}

/// Minimizes `Σ‖Xw + b − y‖² + λ‖w‖²` per target column with an unpenalized
/// intercept, via the centred normal equations and a Cholesky solve.
pub fn ridge_fit(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    lambda: f64,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let (n, p) = x.dim();
    if n == 0 || y.nrows() != n {
        return Err(Error::Domain(format!(
            "ridge needs matching non-empty X ({n} rows) and y ({} rows)",
            y.nrows()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::Domain("ridge lambda must be non-negative".into()));
    }
    let x_mean = x.mean_axis(Axis(0)).expect("non-empty");
    let y_mean = y.mean_axis(Axis(0)).expect("non-empty");
    let xc = &x - &x_mean;
    let yc = &y - &y_mean;

    let mut gram = xc.t().dot(&xc);
    gram.diag_mut().iter_mut().for_each(|d| *d += lambda);
    let rhs = xc.t().dot(&yc);

    let gram = DMatrix::from_fn(p, p, |i, j| gram[[i, j]]);
    let rhs = DMatrix::from_fn(p, y.ncols(), |i, j| rhs[[i, j]]);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{p}×{p} system is not positive definite")))?;
    if lambda == 0.0 {
        let diag = chol.l_dirty().diagonal();
        let max = diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if min * min < 1e-12 * max * max {
            return Err(Error::Singular(format!("{p}×{p} system is rank deficient")));
        }
    }
    let solution = chol.solve(&rhs);
    let coef = Array2::from_shape_fn((p, y.ncols()), |(i, j)| solution[(i, j)]);
    let intercept = &y_mean - &x_mean.dot(&coef);
    Ok((coef, intercept))
}

/// Fits the standardizer and the ridge model on training samples.
pub fn fit_linear(samples: &[Sample], cfg: &PredictorConfig) -> Result<LinearModel> {
    let train: Vec<&Sample> = samples.iter().filter(|s| s.target.is_some()).collect();
    if train.len() < MIN_LINEAR_SAMPLES {
        return Err(Error::Domain(format!(
            "linear fit needs at least {MIN_LINEAR_SAMPLES} samples, got {}",
            train.len()
        )));
    }
    let owned: Vec<Sample> = train.iter().map(|s| (*s).clone()).collect();
    let standardizer = fit_standardizer(&owned)?;
    let mut x = Array2::zeros((train.len(), N_INPUTS));
    let mut y = Array2::zeros((train.len(), N_FUNDAMENTALS));
    for (i, s) in train.iter().enumerate() {
        x.row_mut(i)
            .iter_mut()
            .zip(s.standardized_inputs(&standardizer))
            .for_each(|(d, v)| *d = v);
        let t = s
            .standardized_target(&standardizer)
            .expect("filtered on target");
        y.row_mut(i).iter_mut().zip(t).for_each(|(d, v)| *d = v);
    }
    let (coefficients, intercept) = ridge_fit(x.view(), y.view(), cfg.ridge_lambda)?;
    Ok(LinearModel {
        coefficients,
        intercept,
        ridge_lambda: cfg.ridge_lambda,
        standardizer,
    })
}

impl LinearModel {
    pub fn validate(&self) -> Result<()> {
        if self.coefficients.dim() != (N_INPUTS, N_FUNDAMENTALS)
            || self.intercept.len() != N_FUNDAMENTALS
        {
            return Err(Error::Contract(format!(
                "linear model has shape {:?}, expected ({N_INPUTS}, {N_FUNDAMENTALS})",
                self.coefficients.dim()
            )));
        }
        Ok(())
    }

    pub fn predict_one(&self, x: &[f64; N_INPUTS]) -> TargetVector {
        let mut out = [0.0; N_FUNDAMENTALS];
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.intercept[j]
                + x.iter()
                    .zip(self.coefficients.column(j))
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn two_feature_toy_matches_hand_solution() {
        // Four points; normal equations on the centred data solved by hand:
        // x̄ = (0.5, 0.5), ȳ = 3.25, Sxx = [[1, 0], [0, 1]], Sxy = (1.5, 2.5)
        // → w = (1.5, 2.5), b = 3.25 − 0.75 − 1.25 = 1.25.
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let y = array![[1.0], [3.0], [4.0], [5.0]];
        let (w, b) = ridge_fit(x.view(), y.view(), 0.0).unwrap();
        assert!((w[[0, 0]] - 1.5).abs() < 1e-12);
        assert!((w[[1, 0]] - 2.5).abs() < 1e-12);
        assert!((b[0] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn exact_linear_targets_interpolate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_simple_fn((300, 20), || StandardNormal.sample(&mut rng));
        let true_w = Array2::from_shape_simple_fn((20, 3), || StandardNormal.sample(&mut rng));
        let y = x.dot(&true_w) + 0.5;
        let (w, b) = ridge_fit(x.view(), y.view(), 0.0).unwrap();
        let pred = x.dot(&w) + &b;
        let mse = (&pred - &y).mapv(|v| v * v).mean().unwrap();
        assert!(mse < 1e-16, "mse {mse}");
    }

    #[test]
    fn huge_lambda_shrinks_to_mean() {
        let x = array![[0.0, 1.0], [1.0, 3.0], [2.0, 2.0], [3.0, 7.0]];
        let y = array![[1.0], [2.0], [2.0], [7.0]];
        let (w, b) = ridge_fit(x.view(), y.view(), 1e15).unwrap();
        assert!(w.iter().all(|v| v.abs() < 1e-12));
        assert!((b[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn rank_deficient_without_ridge_is_singular() {
        let x = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let y = array![[1.0], [2.0], [3.0]];
        assert!(matches!(
            ridge_fit(x.view(), y.view(), 0.0),
            Err(Error::Singular(_))
        ));
        assert!(ridge_fit(x.view(), y.view(), 1e-3).is_ok());
    }
}
