//! Ordinary least squares for one or several responses sharing a design.
//!
//! Fits go through a thin SVD of the design matrix. The coefficient
//! covariance `s^2 (X^T X)^-1` is assembled as `s^2 V S^-2 V^T`, so the
//! cross-product matrix is never formed or inverted.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Singular values below this fraction of the largest one mean the design
/// is rank deficient.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegressError {
    #[error("design matrix is rank deficient (smallest/largest singular value {ratio:e})")]
    RankDeficient { ratio: f64 },
    #[error("need more observations than columns: n = {n}, p = {p}")]
    TooFewObservations { n: usize, p: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("design or response contains non-finite values")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, RegressError>;

/// A full-column-rank regression design with more rows than columns.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    x: DMatrix<f64>,
    // thin SVD pieces: U (n x p), singular values, V (p x p)
    u: DMatrix<f64>,
    s: DVector<f64>,
    v: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        let (n, p) = x.shape();
        if n <= p {
            return Err(RegressError::TooFewObservations { n, p });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(RegressError::NonFinite);
        }
        let svd = x.clone().svd(true, true);
        let s = svd.singular_values;
        let smax = s.max();
        let smin = s.min();
        if !(smax > 0.0) || smin <= RANK_TOL * smax {
            let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
            return Err(RegressError::RankDeficient { ratio });
        }
        let u = svd.u.expect("requested U");
        let v = svd.v_t.expect("requested V^T").transpose();
        Ok(DesignMatrix { x, u, s, v })
    }

    /// Intercept column followed by the given regressor columns.
    pub fn with_intercept(regressors: &[&[f64]]) -> Result<Self> {
        let n = regressors.first().map_or(0, |c| c.len());
        if regressors.iter().any(|c| c.len() != n) {
            return Err(RegressError::DimensionMismatch(
                "regressor columns differ in length".into(),
            ));
        }
        let x = DMatrix::from_fn(n, regressors.len() + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                regressors[j - 1][i]
            }
        });
        DesignMatrix::new(x)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn nobs(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    /// `(X^T X)^-1` from the SVD.
    pub fn xtx_inverse(&self) -> DMatrix<f64> {
        let inv_s2 = self.s.map(|s| 1.0 / (s * s));
        let scaled = &self.v * DMatrix::from_diagonal(&inv_s2);
        let out = scaled * self.v.transpose();
        symmetrize(out)
    }

    /// Least-squares coefficients for every column of `y`.
    fn solve(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let uty = self.u.tr_mul(y);
        let mut scaled = uty;
        for (r, s) in self.s.iter().enumerate() {
            scaled.row_mut(r).scale_mut(1.0 / s);
        }
        &self.v * scaled
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Single-response fit.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: DVector<f64>,
    pub coef_covariance: DMatrix<f64>,
    /// `RSS / (n - p)`.
    pub residual_variance: f64,
    pub dof: usize,
    pub residuals: DVector<f64>,
}

impl OlsFit {
    pub fn std_error(&self, i: usize) -> f64 {
        self.coef_covariance[(i, i)].max(0.0).sqrt()
    }
}

pub fn ols_fit(design: &DesignMatrix, response: &[f64]) -> Result<OlsFit> {
    if response.len() != design.nobs() {
        return Err(RegressError::DimensionMismatch(format!(
            "response has {} values, design has {} rows",
            response.len(),
            design.nobs()
        )));
    }
    if response.iter().any(|v| !v.is_finite()) {
        return Err(RegressError::NonFinite);
    }
    let y = DMatrix::from_column_slice(response.len(), 1, response);
    let b = design.solve(&y);
    let resid = &y - design.matrix() * &b;
    let dof = design.nobs() - design.ncols();
    let rss = resid.norm_squared();
    let s2 = rss / dof as f64;
    Ok(OlsFit {
        coefficients: b.column(0).into_owned(),
        coef_covariance: design.xtx_inverse() * s2,
        residual_variance: s2,
        dof,
        residuals: resid.column(0).into_owned(),
    })
}

/// Multi-response fit on a shared design.
#[derive(Debug, Clone)]
pub struct MvOlsFit {
    /// `p x J`, column `k` holds the coefficients of response `k`.
    pub coefficients: DMatrix<f64>,
    /// `J x J` residual cross-products divided by `n - p`.
    pub residual_covariance: DMatrix<f64>,
    /// `(X^T X)^-1`, `p x p`.
    pub xtx_inverse: DMatrix<f64>,
    pub dof: usize,
    pub residuals: DMatrix<f64>,
}

impl MvOlsFit {
    pub fn num_responses(&self) -> usize {
        self.coefficients.ncols()
    }

    /// `cov(b[a, k], b[c, l]) = (X^T X)^-1[a, c] * Sigma[k, l]`.
    pub fn coef_cov(&self, a: usize, k: usize, c: usize, l: usize) -> f64 {
        self.xtx_inverse[(a, c)] * self.residual_covariance[(k, l)]
    }

    /// `J x J` covariance of the coefficients on design column `a` across
    /// all responses.
    pub fn param_covariance(&self, a: usize) -> DMatrix<f64> {
        &self.residual_covariance * self.xtx_inverse[(a, a)]
    }

    /// The single-response view of response `k`.
    pub fn response_fit(&self, k: usize) -> OlsFit {
        let s2 = self.residual_covariance[(k, k)];
        OlsFit {
            coefficients: self.coefficients.column(k).into_owned(),
            coef_covariance: &self.xtx_inverse * s2,
            residual_variance: s2,
            dof: self.dof,
            residuals: self.residuals.column(k).into_owned(),
        }
    }
}

pub fn mv_ols_fit(design: &DesignMatrix, responses: &DMatrix<f64>) -> Result<MvOlsFit> {
    if responses.nrows() != design.nobs() {
        return Err(RegressError::DimensionMismatch(format!(
            "responses have {} rows, design has {}",
            responses.nrows(),
            design.nobs()
        )));
    }
    if responses.ncols() == 0 {
        return Err(RegressError::DimensionMismatch("no responses".into()));
    }
    if responses.iter().any(|v| !v.is_finite()) {
        return Err(RegressError::NonFinite);
    }
    let b = design.solve(responses);
    let resid = responses - design.matrix() * &b;
    let dof = design.nobs() - design.ncols();
    let sigma = symmetrize(resid.tr_mul(&resid) / dof as f64);
    Ok(MvOlsFit {
        coefficients: b,
        residual_covariance: sigma,
        xtx_inverse: design.xtx_inverse(),
        dof,
        residuals: resid,
    })
}
