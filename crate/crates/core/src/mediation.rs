//! Stratified linear mediation through ilr coordinates.
//!
//! Within every confounder stratum `h` two models are fitted:
//!
//! * mediator model: `M_k = b_h0k + b_h1k X + eps_k`, jointly for all `k`;
//! * response model: `Y = g_h0 + sum_k g_h1k M_k + g_h2 X + e`.
//!
//! Stratum results are pooled with weights `P(h)`. The coordinate-wise
//! indirect effects are products of the exposure-to-coordinate and
//! coordinate-to-response coefficients and always sum to the overall
//! indirect effect. The direct effect is the pooled exposure coefficient of
//! the response model. Exposure is coded `x* = 0`, `x = 1`.
//!
//! Under a linear response model the sequential (ordered) and the
//! "others at reference level" definitions of a coordinate-wise indirect
//! effect reduce to the same product, so a single estimator covers both.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::coda::{self, basis_from_sbp, CodaError, ContrastBasis, SbpMatrix};
use crate::regress::{mv_ols_fit, ols_fit, DesignMatrix, RegressError};

pub const DEFAULT_CI_LEVEL: f64 = 0.90;

/// Relative tolerance for the symmetry check on covariance inputs.
const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MediationError {
    #[error(transparent)]
    Coda(#[from] CodaError),
    #[error("stratum {stratum}: {source}")]
    Regress {
        stratum: String,
        #[source]
        source: RegressError,
    },
    #[error("stratum {stratum} needs both exposed and unexposed individuals")]
    MissingExposureLevel { stratum: String },
    #[error("stratum {stratum} has {n} individuals, at least {required} are needed")]
    StratumTooSmall {
        stratum: String,
        n: usize,
        required: usize,
    },
    #[error("invalid stratum weights: {0}")]
    WeightMismatch(String),
    #[error("inconsistent dimensions: {0}")]
    InconsistentDimensions(String),
    #[error("invalid cohort: {0}")]
    InvalidCohort(String),
    #[error("variance input {0} is negative")]
    NegativeVariance(f64),
    #[error("covariance matrix is not symmetric")]
    NonSymmetricCovariance,
    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidCiLevel(f64),
}

pub type Result<T> = std::result::Result<T, MediationError>;

/// Per-individual counts, binary exposure, confounder stratum and response.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortData {
    pub sample_ids: Vec<String>,
    pub part_labels: Vec<String>,
    /// `n x (J+1)` nonnegative integer counts.
    pub counts: DMatrix<f64>,
    pub exposure: Vec<u8>,
    pub stratum: Vec<String>,
    pub response: Vec<f64>,
}

impl CohortData {
    pub fn new(
        sample_ids: Vec<String>,
        part_labels: Vec<String>,
        counts: DMatrix<f64>,
        exposure: Vec<u8>,
        stratum: Vec<String>,
        response: Vec<f64>,
    ) -> Result<Self> {
        let n = counts.nrows();
        if [sample_ids.len(), exposure.len(), stratum.len(), response.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(MediationError::InvalidCohort(format!(
                "column lengths differ from the {n} count rows"
            )));
        }
        if part_labels.len() != counts.ncols() {
            return Err(MediationError::InvalidCohort(format!(
                "{} part labels for {} count columns",
                part_labels.len(),
                counts.ncols()
            )));
        }
        if let Some(c) = counts
            .iter()
            .find(|c| !(c.is_finite() && **c >= 0.0 && c.fract() == 0.0))
        {
            return Err(MediationError::InvalidCohort(format!(
                "count {c} is not a nonnegative integer"
            )));
        }
        if let Some(x) = exposure.iter().find(|&&x| x > 1) {
            return Err(MediationError::InvalidCohort(format!(
                "exposure {x} is not 0/1"
            )));
        }
        if response.iter().any(|y| !y.is_finite()) {
            return Err(MediationError::InvalidCohort(
                "response contains non-finite values".into(),
            ));
        }
        Ok(CohortData {
            sample_ids,
            part_labels,
            counts,
            exposure,
            stratum,
            response,
        })
    }

    pub fn len(&self) -> usize {
        self.counts.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_parts(&self) -> usize {
        self.counts.ncols()
    }

    /// Row indices per stratum, strata in lexicographic order.
    pub fn strata(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, h) in self.stratum.iter().enumerate() {
            out.entry(h.clone()).or_default().push(i);
        }
        out
    }

    /// Empirical stratum proportions `n_h / n`.
    pub fn empirical_weights(&self) -> BTreeMap<String, f64> {
        let n = self.len() as f64;
        self.strata()
            .into_iter()
            .map(|(h, rows)| (h, rows.len() as f64 / n))
            .collect()
    }
}

/// Coefficients and covariances of one stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumFit {
    pub stratum: String,
    pub n: usize,
    /// Mediator-model intercepts `b_h0k`.
    pub beta0: DVector<f64>,
    /// Exposure effects on each coordinate `b_h1k`.
    pub beta1: DVector<f64>,
    pub beta1_cov: DMatrix<f64>,
    pub gamma0: f64,
    /// Coordinate effects on the response `g_1k`.
    pub gamma1: DVector<f64>,
    /// Direct exposure effect `g_2`.
    pub gamma2: f64,
    /// Covariance of `(g_11, .., g_1J, g_2)`.
    pub gamma_cov: DMatrix<f64>,
    /// Exposure coefficient of the response-on-exposure regression.
    pub total: f64,
    pub total_var: f64,
}

impl StratumFit {
    pub fn num_balances(&self) -> usize {
        self.beta1.len()
    }

    fn gamma1_cov(&self) -> DMatrix<f64> {
        let j = self.num_balances();
        self.gamma_cov.view((0, 0), (j, j)).into_owned()
    }
}

/// Smallest stratum that leaves one residual degree of freedom in the
/// response model (intercept, exposure and `J` coordinates).
pub fn min_stratum_size(num_balances: usize) -> usize {
    num_balances + 3
}

/// Fit the mediator and response models in one stratum from its ilr
/// coordinates (`n_h x J`).
pub fn fit_stratum_ilr(
    stratum: &str,
    ilr: &DMatrix<f64>,
    exposure: &[u8],
    response: &[f64],
) -> Result<StratumFit> {
    let n = ilr.nrows();
    let j = ilr.ncols();
    if exposure.len() != n || response.len() != n {
        return Err(MediationError::InconsistentDimensions(format!(
            "stratum {stratum}: {n} ilr rows, {} exposures, {} responses",
            exposure.len(),
            response.len()
        )));
    }
    let required = min_stratum_size(j);
    if n < required {
        return Err(MediationError::StratumTooSmall {
            stratum: stratum.to_string(),
            n,
            required,
        });
    }
    let exposed = exposure.iter().filter(|&&x| x == 1).count();
    if exposed == 0 || exposed == n {
        return Err(MediationError::MissingExposureLevel {
            stratum: stratum.to_string(),
        });
    }
    let wrap = |source| MediationError::Regress {
        stratum: stratum.to_string(),
        source,
    };

    let x: Vec<f64> = exposure.iter().map(|&v| f64::from(v)).collect();
    let exposure_design = DesignMatrix::with_intercept(&[&x]).map_err(wrap)?;

    let mediators = mv_ols_fit(&exposure_design, ilr).map_err(wrap)?;
    let beta0 = mediators.coefficients.row(0).transpose();
    let beta1 = mediators.coefficients.row(1).transpose();
    let beta1_cov = mediators.param_covariance(1);

    let total = ols_fit(&exposure_design, response).map_err(wrap)?;

    // response design: 1, M_1..M_J, X
    let full = DMatrix::from_fn(n, j + 2, |i, c| match c {
        0 => 1.0,
        c if c <= j => ilr[(i, c - 1)],
        _ => x[i],
    });
    let response_design = DesignMatrix::new(full).map_err(wrap)?;
    let outcome = ols_fit(&response_design, response).map_err(wrap)?;

    Ok(StratumFit {
        stratum: stratum.to_string(),
        n,
        beta0,
        beta1,
        beta1_cov,
        gamma0: outcome.coefficients[0],
        gamma1: outcome.coefficients.rows(1, j).into_owned(),
        gamma2: outcome.coefficients[j + 1],
        gamma_cov: outcome.coef_covariance.view((1, 1), (j + 1, j + 1)).into_owned(),
        total: total.coefficients[1],
        total_var: total.coef_covariance[(1, 1)],
    })
}

/// Close, transform and fit the rows of one stratum.
pub fn fit_stratum(
    data: &CohortData,
    rows: &[usize],
    stratum: &str,
    basis: &ContrastBasis,
    zero_replacement: f64,
) -> Result<StratumFit> {
    let counts = data.counts.select_rows(rows);
    let ilr = coda::ilr_counts_matrix(&counts, basis, zero_replacement)?;
    let exposure: Vec<u8> = rows.iter().map(|&i| data.exposure[i]).collect();
    let response: Vec<f64> = rows.iter().map(|&i| data.response[i]).collect();
    fit_stratum_ilr(stratum, &ilr, &exposure, &response)
}

/// Point estimate with standard error and a normal-theory interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub point: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Effect {
    pub fn new(point: f64, se: f64, z: f64) -> Self {
        Effect {
            point,
            se,
            ci_low: point - z * se,
            ci_high: point + z * se,
        }
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }

    pub fn excludes_zero(&self) -> bool {
        !self.covers(0.0)
    }
}

/// Indirect effect through one coordinate together with the pooled path
/// coefficients behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateEffect {
    pub label: String,
    pub cie: Effect,
    pub beta: f64,
    pub beta_se: f64,
    pub gamma: f64,
    pub gamma_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumWeight {
    pub stratum: String,
    pub n: usize,
    pub weight: f64,
}

/// How per-stratum path coefficients are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// `CIE_k = sum_h P(h) g_h1k b_h1k`; keeps `TE = NDE + OIE` exact.
    #[default]
    StratumProducts,
    /// `CIE_k = (sum_h P(h) g_h1k) (sum_h P(h) b_h1k)`, for response models
    /// whose coordinate effects do not vary by stratum.
    SharedGamma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediationEstimate {
    pub te: Effect,
    pub nde: Effect,
    pub oie: Effect,
    pub cie: Vec<CoordinateEffect>,
    pub stratum_weights: Vec<StratumWeight>,
    pub ci_level: f64,
    pub pooling: Pooling,
}

/// Two-sided normal quantile for a confidence level.
pub fn z_value(ci_level: f64) -> Result<f64> {
    if !(ci_level > 0.0 && ci_level < 1.0) {
        return Err(MediationError::InvalidCiLevel(ci_level));
    }
    Ok(Normal::standard().inverse_cdf((1.0 + ci_level) / 2.0))
}

/// Delta-method standard error of `beta * gamma` for independent estimators.
pub fn delta_se_cie(beta: f64, var_beta: f64, gamma: f64, var_gamma: f64) -> Result<f64> {
    for v in [var_beta, var_gamma] {
        if v < 0.0 || v.is_nan() {
            return Err(MediationError::NegativeVariance(v));
        }
    }
    Ok((beta * beta * var_gamma + gamma * gamma * var_beta).sqrt())
}

fn check_symmetric(m: &DMatrix<f64>, dim: usize) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(MediationError::InconsistentDimensions(format!(
            "covariance is {}x{}, expected {dim}x{dim}",
            m.nrows(),
            m.ncols()
        )));
    }
    for k in 0..dim {
        if m[(k, k)] < 0.0 {
            return Err(MediationError::NegativeVariance(m[(k, k)]));
        }
        for l in 0..k {
            let (a, b) = (m[(k, l)], m[(l, k)]);
            if (a - b).abs() > SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0) {
                return Err(MediationError::NonSymmetricCovariance);
            }
        }
    }
    Ok(())
}

/// Delta-method standard error of `sum_k beta_k gamma_k` with independent
/// `beta` and `gamma` estimators:
/// `sqrt(beta^T Cov(gamma) beta + gamma^T Cov(beta) gamma)`.
pub fn delta_se_oie(
    beta: &DVector<f64>,
    beta_cov: &DMatrix<f64>,
    gamma: &DVector<f64>,
    gamma_cov: &DMatrix<f64>,
) -> Result<f64> {
    let j = beta.len();
    if gamma.len() != j {
        return Err(MediationError::InconsistentDimensions(format!(
            "beta has {j} entries, gamma {}",
            gamma.len()
        )));
    }
    check_symmetric(beta_cov, j)?;
    check_symmetric(gamma_cov, j)?;
    let var = gamma_cov.quadratic_form(beta) + beta_cov.quadratic_form(gamma);
    Ok(var.max(0.0).sqrt())
}

trait QuadraticForm {
    fn quadratic_form(&self, v: &DVector<f64>) -> f64;
}

impl QuadraticForm for DMatrix<f64> {
    fn quadratic_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(self * v))
    }
}

/// Pool per-stratum fits with weights `P(h)` (same order as `fits`).
pub fn pool_effects(
    fits: &[StratumFit],
    weights: &[f64],
    balance_labels: &[String],
    ci_level: f64,
    pooling: Pooling,
) -> Result<MediationEstimate> {
    let z = z_value(ci_level)?;
    if fits.is_empty() {
        return Err(MediationError::WeightMismatch("no strata to pool".into()));
    }
    if weights.len() != fits.len() {
        return Err(MediationError::WeightMismatch(format!(
            "{} weights for {} strata",
            weights.len(),
            fits.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(MediationError::WeightMismatch(
            "weights must be finite and nonnegative".into(),
        ));
    }
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-9 {
        return Err(MediationError::WeightMismatch(format!(
            "weights sum to {wsum}"
        )));
    }
    let j = fits[0].num_balances();
    if fits.iter().any(|f| f.num_balances() != j) || balance_labels.len() != j {
        return Err(MediationError::InconsistentDimensions(
            "strata disagree on the number of balances".into(),
        ));
    }

    let mut beta_bar = DVector::zeros(j);
    let mut beta_bar_cov = DMatrix::zeros(j, j);
    let mut gamma_bar = DVector::zeros(j);
    let mut gamma_bar_cov = DMatrix::zeros(j, j);
    let (mut nde, mut nde_var, mut te, mut te_var) = (0.0, 0.0, 0.0, 0.0);
    for (f, &w) in fits.iter().zip(weights) {
        let w2 = w * w;
        beta_bar += &f.beta1 * w;
        beta_bar_cov += &f.beta1_cov * w2;
        gamma_bar += &f.gamma1 * w;
        gamma_bar_cov += f.gamma1_cov() * w2;
        nde += w * f.gamma2;
        nde_var += w2 * f.gamma_cov[(j, j)];
        te += w * f.total;
        te_var += w2 * f.total_var;
    }

    let (cie_points, cie_ses, oie_se) = match pooling {
        Pooling::SharedGamma => {
            let points: Vec<f64> = (0..j).map(|k| gamma_bar[k] * beta_bar[k]).collect();
            let ses = (0..j)
                .map(|k| {
                    delta_se_cie(
                        beta_bar[k],
                        beta_bar_cov[(k, k)],
                        gamma_bar[k],
                        gamma_bar_cov[(k, k)],
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let oie_se = delta_se_oie(&beta_bar, &beta_bar_cov, &gamma_bar, &gamma_bar_cov)?;
            (points, ses, oie_se)
        }
        Pooling::StratumProducts => {
            let mut points = vec![0.0; j];
            let mut vars = vec![0.0; j];
            let mut oie_var = 0.0;
            for (f, &w) in fits.iter().zip(weights) {
                let gcov = f.gamma1_cov();
                for k in 0..j {
                    points[k] += w * f.gamma1[k] * f.beta1[k];
                    let se = delta_se_cie(f.beta1[k], f.beta1_cov[(k, k)], f.gamma1[k], gcov[(k, k)])?;
                    vars[k] += w * w * se * se;
                }
                let se = delta_se_oie(&f.beta1, &f.beta1_cov, &f.gamma1, &gcov)?;
                oie_var += w * w * se * se;
            }
            (points, vars.into_iter().map(f64::sqrt).collect(), oie_var.sqrt())
        }
    };

    let oie_point: f64 = cie_points.iter().sum();
    let cie = (0..j)
        .map(|k| CoordinateEffect {
            label: balance_labels[k].clone(),
            cie: Effect::new(cie_points[k], cie_ses[k], z),
            beta: beta_bar[k],
            beta_se: beta_bar_cov[(k, k)].max(0.0).sqrt(),
            gamma: gamma_bar[k],
            gamma_se: gamma_bar_cov[(k, k)].max(0.0).sqrt(),
        })
        .collect();

    Ok(MediationEstimate {
        te: Effect::new(te, te_var.sqrt(), z),
        nde: Effect::new(nde, nde_var.max(0.0).sqrt(), z),
        oie: Effect::new(oie_point, oie_se, z),
        cie,
        stratum_weights: fits
            .iter()
            .zip(weights)
            .map(|(f, &w)| StratumWeight {
                stratum: f.stratum.clone(),
                n: f.n,
                weight: w,
            })
            .collect(),
        ci_level,
        pooling,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MediationOptions {
    pub zero_replacement: f64,
    pub ci_level: f64,
    pub pooling: Pooling,
    /// Stratum weights; empirical proportions when `None`.
    pub weights: Option<BTreeMap<String, f64>>,
}

impl Default for MediationOptions {
    fn default() -> Self {
        MediationOptions {
            zero_replacement: coda::DEFAULT_ZERO_REPLACEMENT,
            ci_level: DEFAULT_CI_LEVEL,
            pooling: Pooling::default(),
            weights: None,
        }
    }
}

fn resolve_weights(
    data: &CohortData,
    strata: &BTreeMap<String, Vec<usize>>,
    weights: Option<&BTreeMap<String, f64>>,
) -> Result<Vec<f64>> {
    match weights {
        None => {
            let n = data.len() as f64;
            Ok(strata.values().map(|rows| rows.len() as f64 / n).collect())
        }
        Some(map) => {
            if map.len() != strata.len() {
                return Err(MediationError::WeightMismatch(format!(
                    "{} weights for {} strata",
                    map.len(),
                    strata.len()
                )));
            }
            strata
                .keys()
                .map(|h| {
                    map.get(h).copied().ok_or_else(|| {
                        MediationError::WeightMismatch(format!("no weight for stratum {h}"))
                    })
                })
                .collect()
        }
    }
}

/// Stratified regression of the response on exposure, pooled by `P(h)`
/// with standard error `sqrt(sum_h P(h)^2 var_h)`.
pub fn estimate_total_effect(
    data: &CohortData,
    weights: Option<&BTreeMap<String, f64>>,
    ci_level: f64,
) -> Result<Effect> {
    let z = z_value(ci_level)?;
    let strata = data.strata();
    let w = resolve_weights(data, &strata, weights)?;
    let (mut point, mut var) = (0.0, 0.0);
    for ((h, rows), wh) in strata.iter().zip(&w) {
        let x: Vec<f64> = rows.iter().map(|&i| f64::from(data.exposure[i])).collect();
        if x.iter().all(|&v| v == x[0]) {
            return Err(MediationError::MissingExposureLevel { stratum: h.clone() });
        }
        let y: Vec<f64> = rows.iter().map(|&i| data.response[i]).collect();
        let wrap = |source| MediationError::Regress {
            stratum: h.clone(),
            source,
        };
        let design = DesignMatrix::with_intercept(&[&x]).map_err(wrap)?;
        let fit = ols_fit(&design, &y).map_err(wrap)?;
        point += wh * fit.coefficients[1];
        var += wh * wh * fit.coef_covariance[(1, 1)];
    }
    Ok(Effect::new(point, var.sqrt(), z))
}

/// Fit every stratum of `data` under `basis`, in stratum order.
pub fn fit_strata(
    data: &CohortData,
    basis: &ContrastBasis,
    zero_replacement: f64,
) -> Result<Vec<StratumFit>> {
    if data.num_parts() != basis.num_parts() {
        return Err(MediationError::InconsistentDimensions(format!(
            "cohort has {} parts, partition has {}",
            data.num_parts(),
            basis.num_parts()
        )));
    }
    data.strata()
        .iter()
        .map(|(h, rows)| fit_stratum(data, rows, h, basis, zero_replacement))
        .collect()
}

/// Full pipeline: close, transform, fit per stratum, pool.
pub fn mediate(data: &CohortData, sbp: &SbpMatrix, options: &MediationOptions) -> Result<MediationEstimate> {
    if data.is_empty() {
        return Err(MediationError::InvalidCohort("cohort is empty".into()));
    }
    let basis = basis_from_sbp(sbp);
    let fits = fit_strata(data, &basis, options.zero_replacement)?;
    let strata = data.strata();
    let weights = resolve_weights(data, &strata, options.weights.as_ref())?;
    pool_effects(
        &fits,
        &weights,
        sbp.balance_labels(),
        options.ci_level,
        options.pooling,
    )
}
