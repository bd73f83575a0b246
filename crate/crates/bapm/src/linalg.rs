//! Small linear-algebra helpers shared by the matching and inference code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Ridge factor applied to covariance matrices before inversion, relative
/// to the mean diagonal scale.
pub const RIDGE_EPS: f64 = 1e-8;

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance (denominator `n - 1`).
pub fn sample_var(values: &[f64]) -> f64 {
    let n = values.len();
    assert!(n >= 2, "sample variance needs at least two values");
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
}

/// Sample covariance of the rows of `data` (denominator `n - 1`).
pub fn sample_covariance(data: &DMatrix<f64>) -> DMatrix<f64> {
    let n = data.nrows();
    let k = data.ncols();
    assert!(n >= 2, "covariance needs at least two rows");
    let means: Vec<f64> = (0..k).map(|j| data.column(j).sum() / n as f64).collect();
    let mut centered = data.clone();
    for j in 0..k {
        for i in 0..n {
            centered[(i, j)] -= means[j];
        }
    }
    let mut cov = centered.transpose() * &centered;
    cov /= (n - 1) as f64;
    cov
}

/// Add the standard ridge `eps * (trace/k) * I` (falling back to `eps * I`
/// when the trace vanishes) so downstream Cholesky factorizations are
/// well-defined for degenerate inputs.
pub fn regularize(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let k = cov.nrows();
    let scale = cov.trace() / k as f64;
    let ridge = if scale > 0.0 { RIDGE_EPS * scale } else { RIDGE_EPS };
    let mut out = cov.clone();
    for i in 0..k {
        out[(i, i)] += ridge;
    }
    out
}

/// Cholesky-based whitener for a positive definite matrix `S = L Lᵀ`.
///
/// Whitened coordinates `u = L⁻¹ x` satisfy
/// `‖u_i − u_j‖² = (x_i − x_j)ᵀ S⁻¹ (x_i − x_j)`.
pub struct Whitener {
    l: DMatrix<f64>,
}

impl Whitener {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        match nalgebra::Cholesky::new(cov.clone()) {
            Some(chol) => Ok(Whitener { l: chol.l() }),
            None => {
                let bad: Vec<usize> = (0..cov.nrows())
                    .filter(|&j| cov[(j, j)] <= 0.0 || !cov[(j, j)].is_finite())
                    .collect();
                if bad.is_empty() {
                    Err(Error::SingularMatrix(
                        "covariance not positive definite after ridge regularization \
                         (collinear columns)"
                            .into(),
                    ))
                } else {
                    Err(Error::SingularMatrix(format!(
                        "covariance rank-deficient after ridge regularization; \
                         offending columns: {bad:?}"
                    )))
                }
            }
        }
    }

    /// Whiten each row of `data`, returning a matrix of the same shape.
    pub fn whiten_rows(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let solved = self
            .l
            .solve_lower_triangular(&data.transpose())
            .expect("Cholesky factor is nonsingular");
        solved.transpose()
    }
}

/// A fitted linear model `y ≈ intercept + xᵀ slopes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub intercept: f64,
    pub slopes: DVector<f64>,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.slopes.len());
        self.intercept + x.iter().zip(self.slopes.iter()).map(|(a, b)| a * b).sum::<f64>()
    }
}

// Cholesky that also rejects numerically singular matrices (nalgebra
// accepts zero pivots on exactly rank-deficient input).
fn cholesky_strict(m: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let chol = nalgebra::Cholesky::new(m)
        .ok_or_else(|| Error::SingularMatrix("matrix is not positive definite".into()))?;
    let l = chol.l_dirty();
    let mut min_pivot = f64::INFINITY;
    let mut max_pivot = 0.0_f64;
    for i in 0..l.nrows() {
        min_pivot = min_pivot.min(l[(i, i)]);
        max_pivot = max_pivot.max(l[(i, i)]);
    }
    if !(min_pivot > 1e-7 * max_pivot) {
        return Err(Error::SingularMatrix("matrix is numerically rank-deficient".into()));
    }
    Ok(chol)
}

/// Least squares with an unpenalized intercept and an optional ridge
/// penalty on the slopes. `ridge = 0` is plain OLS.
pub fn linear_fit(x: &DMatrix<f64>, y: &[f64], ridge: f64) -> Result<LinearModel> {
    let n = x.nrows();
    let k = x.ncols();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} feature rows but {} targets",
            y.len()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidInput("need at least 2 rows to fit".into()));
    }
    // Center so the intercept drops out of the normal equations and the
    // penalty touches only the slopes.
    let x_means: Vec<f64> = (0..k).map(|j| x.column(j).sum() / n as f64).collect();
    let y_mean = mean(y);
    let mut xc = x.clone();
    for j in 0..k {
        for i in 0..n {
            xc[(i, j)] -= x_means[j];
        }
    }
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let mut gram = xc.transpose() * &xc;
    for j in 0..k {
        gram[(j, j)] += ridge;
    }
    let rhs = xc.transpose() * yc;
    let slopes = cholesky_strict(gram)
        .map_err(|_| Error::SingularMatrix("singular design matrix".into()))?
        .solve(&rhs);
    let intercept =
        y_mean - x_means.iter().zip(slopes.iter()).map(|(a, b)| a * b).sum::<f64>();
    Ok(LinearModel { intercept, slopes })
}

/// OLS plus the homoskedastic covariance of the slope estimates,
/// `σ̂² (XcᵀXc)⁻¹` with `σ̂² = SSE / (n − k − 1)`.
pub fn ols_with_covariance(
    x: &DMatrix<f64>,
    y: &[f64],
) -> Result<(LinearModel, DMatrix<f64>)> {
    let n = x.nrows();
    let k = x.ncols();
    if n <= k + 1 {
        return Err(Error::InvalidInput(format!(
            "need more than k + 1 = {} rows for OLS covariance, got {n}",
            k + 1
        )));
    }
    let model = linear_fit(x, y, 0.0)?;
    let sse: f64 = (0..n)
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let r = y[i] - model.predict(&row);
            r * r
        })
        .sum();
    let sigma2 = sse / (n - k - 1) as f64;
    let x_means: Vec<f64> = (0..k).map(|j| x.column(j).sum() / n as f64).collect();
    let mut xc = x.clone();
    for j in 0..k {
        for i in 0..n {
            xc[(i, j)] -= x_means[j];
        }
    }
    let gram = xc.transpose() * &xc;
    let inv = cholesky_strict(gram)
        .map_err(|_| Error::SingularMatrix("singular design matrix".into()))?
        .inverse();
    Ok((model, inv * sigma2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn covariance_matches_two_point_formula() {
        let data = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 2.0]);
        let cov = sample_covariance(&data);
        for v in [cov[(0, 0)], cov[(0, 1)], cov[(1, 0)], cov[(1, 1)]] {
            assert_relative_eq!(v, 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn whitener_reproduces_mahalanobis_in_one_dimension() {
        // variance 2 => whitened gap = 2 / sqrt(2)
        let cov = DMatrix::from_element(1, 1, 2.0);
        let w = Whitener::new(&cov).unwrap();
        let data = DMatrix::from_row_slice(2, 1, &[0.0, 2.0]);
        let u = w.whiten_rows(&data);
        assert_relative_eq!((u[(1, 0)] - u[(0, 0)]).abs(), 2.0_f64 / 2.0_f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn exact_linear_data_is_interpolated() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let y: Vec<f64> = x.column(0).iter().map(|v| 2.0 * v + 1.0).collect();
        let m = linear_fit(&x, &y, 0.0).unwrap();
        for (i, yi) in y.iter().enumerate() {
            assert_relative_eq!(m.predict(&[x[(i, 0)]]), *yi, epsilon = 1e-10);
        }
    }

    #[test]
    fn huge_ridge_returns_training_mean() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let y = vec![1.0, 3.0, 5.0, 7.0];
        let m = linear_fit(&x, &y, 1e8).unwrap();
        assert_relative_eq!(m.predict(&[1.5]), 4.0, max_relative = 1e-3);
    }
}
