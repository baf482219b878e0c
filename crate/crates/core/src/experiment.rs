//! Replication harness: repeated simulate-then-estimate runs over a grid of
//! scenarios, with bias, standard-error, power and coverage summaries.
//!
//! Every random draw comes from a stream keyed by the master seed and the
//! generating configuration, and results are gathered in replicate order,
//! so output does not depend on the number of worker threads. Cells that
//! share a generating configuration analyse the same simulated cohorts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rayon::prelude::*;

use crate::coda::{pivotal_sbp, validate_sbp, CodaError, SbpMatrix};
use crate::mediation::{mediate, Effect, MediationError, MediationOptions, Pooling};
use crate::rng::{derive_seed, fnv1a, stream_rng};
use crate::simgen::{self, concentration, GenerativeConfig, SimgenError, TruePathCoefficients};

pub const DEFAULT_REPLICATES: usize = 200;
pub const DEFAULT_COHORT_SIZE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Simgen(#[from] SimgenError),
    #[error(transparent)]
    Coda(#[from] CodaError),
    #[error(transparent)]
    Mediation(#[from] MediationError),
    #[error("invalid study plan: {0}")]
    PlanInvalid(String),
    #[error("study plan JSON: {0}")]
    Json(String),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Partition used for estimation.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalysisBasis {
    /// The partition the data were generated under.
    #[default]
    Generating,
    /// Pivotal partition in the given part order (0-based indices).
    Pivotal { order: Vec<usize> },
    /// Explicit `(J+1) x J` matrix, rows in part order.
    Matrix { rows: Vec<Vec<i64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    /// Preset name, or a free label when `config` is given.
    pub scenario: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<GenerativeConfig>,
    #[serde(default, with = "concentration::option", skip_serializing_if = "Option::is_none")]
    pub alpha_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default)]
    pub analysis: AnalysisBasis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

fn default_replicates() -> usize {
    DEFAULT_REPLICATES
}
fn default_n() -> usize {
    DEFAULT_COHORT_SIZE
}
fn default_ci() -> f64 {
    crate::mediation::DEFAULT_CI_LEVEL
}
fn default_mc_reps() -> usize {
    simgen::DEFAULT_MC_REPS
}
fn default_pooling() -> Pooling {
    Pooling::SharedGamma
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyPlan {
    pub cells: Vec<CellSpec>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_ci")]
    pub ci_level: f64,
    #[serde(default = "default_mc_reps")]
    pub mc_reps: usize,
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
    #[serde(default)]
    pub write_replicates: bool,
}

impl StudyPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: StudyPlan = serde_json::from_str(text).map_err(|e| ExperimentError::Json(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ExperimentError::PlanInvalid(m.to_string()));
        if self.cells.is_empty() {
            return bad("no cells");
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if self.n == 0 {
            return bad("n must be positive");
        }
        if self.mc_reps == 0 {
            return bad("mc_reps must be positive");
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad("ci_level must lie in (0, 1)");
        }
        for cell in &self.cells {
            self.resolve(cell)?;
        }
        Ok(())
    }

    /// Generating configuration, analysis partition and identifiers of a
    /// cell.
    pub fn resolve(&self, cell: &CellSpec) -> Result<ResolvedCell> {
        let mut config = match &cell.config {
            Some(c) => c.clone(),
            None => simgen::preset(&cell.scenario)?,
        };
        if let Some(a) = cell.alpha_s {
            config.alpha_s = a;
        }
        if let Some(t) = cell.theta {
            config.theta = t;
        }
        if let Some(m) = cell.mu {
            config.mu = m;
        }
        config.n = self.n;
        config.seed = 0;
        config.validate()?;
        let generating = config.sbp.to_sbp()?;
        let parts = config.sbp.parts.clone();
        let (analysis, default_label) = match &cell.analysis {
            AnalysisBasis::Generating => (generating.clone(), "generating".to_string()),
            AnalysisBasis::Pivotal { order } => (
                pivotal_sbp(parts.len(), order, parts)?,
                format!(
                    "pivotal[{}]",
                    order.iter().map(|o| o.to_string()).collect::<Vec<_>>().join(" ")
                ),
            ),
            AnalysisBasis::Matrix { rows } => (validate_sbp(rows, parts, None)?, "matrix".to_string()),
        };
        let misspecified = analysis.entries() != generating.entries();
        let key = fnv1a(config.to_json().as_bytes());
        Ok(ResolvedCell {
            scenario: cell.scenario.clone(),
            analysis_label: cell.label.clone().unwrap_or(default_label),
            config,
            analysis,
            misspecified,
            key,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedCell {
    pub scenario: String,
    pub analysis_label: String,
    pub config: GenerativeConfig,
    pub analysis: SbpMatrix,
    /// Analysis partition differs from the generating one; truth-based
    /// metrics are then not reported.
    pub misspecified: bool,
    key: u64,
}

impl ResolvedCell {
    pub fn calibration_seed(&self, master: u64) -> u64 {
        derive_seed(master, &[self.key, 0])
    }
}

/// Estimates kept from one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimates {
    pub cie: Vec<Effect>,
    pub oie: Effect,
    pub nde: Effect,
    pub te: Effect,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub index: usize,
    pub outcome: std::result::Result<ReplicateEstimates, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectMetrics {
    pub effect: String,
    pub truth: Option<f64>,
    pub mean: f64,
    pub bias: Option<f64>,
    /// Mean of the estimated standard errors.
    pub avg_se: f64,
    /// Standard deviation of the estimates.
    pub emp_se: f64,
    pub power: f64,
    pub coverage: Option<f64>,
}

/// Per-coordinate path coefficients and the empirical variances of their
/// estimators across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateDiagnostics {
    pub coordinate: String,
    pub beta: f64,
    pub gamma: f64,
    pub beta_var: f64,
    pub gamma_var: f64,
    /// `beta` and `gamma` are calibrated truths rather than mean estimates.
    pub from_truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellId {
    pub scenario: String,
    #[serde(with = "concentration")]
    pub alpha_s: f64,
    pub theta: f64,
    pub mu: f64,
    pub analysis: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub cell: CellId,
    pub replicates_ok: usize,
    pub replicates_failed: usize,
    pub effects: Vec<EffectMetrics>,
    pub diagnostics: Vec<CoordinateDiagnostics>,
    pub truth: TruePathCoefficients,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub summary: ReplicationSummary,
    pub replicates: Vec<ReplicateRecord>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with `n - 1` denominator.
fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

fn fraction(flags: impl Iterator<Item = bool>, n: usize) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    flags.filter(|&f| f).count() as f64 / n as f64
}

fn effect_metrics(name: String, estimates: &[Effect], truth: Option<f64>) -> EffectMetrics {
    let points: Vec<f64> = estimates.iter().map(|e| e.point).collect();
    let ses: Vec<f64> = estimates.iter().map(|e| e.se).collect();
    let m = mean(&points);
    let n = estimates.len();
    EffectMetrics {
        effect: name,
        truth,
        mean: m,
        bias: truth.map(|t| m - t),
        avg_se: mean(&ses),
        emp_se: variance(&points).sqrt(),
        power: fraction(estimates.iter().map(Effect::excludes_zero), n),
        coverage: truth.map(|t| fraction(estimates.iter().map(|e| e.covers(t)), n)),
    }
}

fn run_replicate(
    cell: &ResolvedCell,
    truth: &TruePathCoefficients,
    options: &MediationOptions,
    master_seed: u64,
    index: usize,
) -> ReplicateRecord {
    let outcome = (|| -> Result<ReplicateEstimates> {
        let mut rng = stream_rng(master_seed, &[cell.key, 1, index as u64]);
        let sim = simgen::simulate_cohort_with_rng(&cell.config, &truth.gamma1, &mut rng)?;
        let est = mediate(&sim.data, &cell.analysis, options)?;
        Ok(ReplicateEstimates {
            cie: est.cie.iter().map(|c| c.cie).collect(),
            oie: est.oie,
            nde: est.nde,
            te: est.te,
            beta: est.cie.iter().map(|c| c.beta).collect(),
            gamma: est.cie.iter().map(|c| c.gamma).collect(),
        })
    })()
    .map_err(|e| e.to_string());
    ReplicateRecord { index, outcome }
}

/// Calibrate the truth of a cell, run its replicates and summarise them.
/// Parallel work runs on the current rayon pool.
pub fn run_cell(plan: &StudyPlan, cell: &ResolvedCell) -> Result<CellResult> {
    let truth = simgen::calibrate_truth(&cell.config, plan.mc_reps, cell.calibration_seed(plan.master_seed))?;
    let options = MediationOptions {
        ci_level: plan.ci_level,
        pooling: plan.pooling,
        zero_replacement: cell.config.zero_replacement,
        weights: None,
    };
    let replicates: Vec<ReplicateRecord> = (0..plan.replicates)
        .into_par_iter()
        .map(|r| run_replicate(cell, &truth, &options, plan.master_seed, r))
        .collect();
    let summary = summarise(cell, &truth, &replicates);
    Ok(CellResult { summary, replicates })
}

fn summarise(cell: &ResolvedCell, truth: &TruePathCoefficients, replicates: &[ReplicateRecord]) -> ReplicationSummary {
    let ok: Vec<&ReplicateEstimates> = replicates.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
    let j = cell.analysis.num_balances();
    let labels = cell.analysis.balance_labels();
    let known = !cell.misspecified;
    let mut effects = Vec::with_capacity(j + 1);
    for k in 0..j {
        let est: Vec<Effect> = ok.iter().map(|r| r.cie[k]).collect();
        effects.push(effect_metrics(format!("CIE_{}", k + 1), &est, known.then(|| truth.cie[k])));
    }
    let oie: Vec<Effect> = ok.iter().map(|r| r.oie).collect();
    effects.push(effect_metrics("OIE".into(), &oie, known.then(|| truth.oie())));

    let diagnostics = (0..j)
        .map(|k| {
            let betas: Vec<f64> = ok.iter().map(|r| r.beta[k]).collect();
            let gammas: Vec<f64> = ok.iter().map(|r| r.gamma[k]).collect();
            let (beta, gamma) = if known {
                (truth.beta1_weighted[k], truth.gamma1[k])
            } else {
                (mean(&betas), mean(&gammas))
            };
            CoordinateDiagnostics {
                coordinate: labels[k].clone(),
                beta,
                gamma,
                beta_var: variance(&betas),
                gamma_var: variance(&gammas),
                from_truth: known,
            }
        })
        .collect();

    ReplicationSummary {
        cell: CellId {
            scenario: cell.scenario.clone(),
            alpha_s: cell.config.alpha_s,
            theta: cell.config.theta,
            mu: cell.config.mu,
            analysis: cell.analysis_label.clone(),
        },
        replicates_ok: ok.len(),
        replicates_failed: replicates.len() - ok.len(),
        effects,
        diagnostics,
        truth: truth.clone(),
    }
}

/// Run every cell of the plan on a pool of `threads` workers (rayon's
/// default when `None`).
pub fn run_plan(plan: &StudyPlan, threads: Option<usize>) -> Result<Vec<CellResult>> {
    plan.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(ExperimentError::PlanInvalid("threads must be at least 1".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| ExperimentError::ThreadPool(e.to_string()))?;
    pool.install(|| {
        plan.cells
            .iter()
            .map(|c| run_cell(plan, &plan.resolve(c)?))
            .collect()
    })
}

/// One row of the variance-ratio table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub cell: CellId,
    pub coordinate: String,
    /// `beta^2 / var(beta_hat)`.
    pub beta_ratio: f64,
    /// `gamma^2 / var(gamma_hat)`.
    pub gamma_ratio: f64,
    /// `var(beta_hat) var(gamma_hat)`.
    pub variance_product: f64,
    /// `beta^2 var(gamma_hat) + gamma^2 var(beta_hat)`.
    pub indirect_variance: f64,
}

pub fn ratio_diagnostics(summaries: &[ReplicationSummary]) -> Vec<RatioRow> {
    summaries
        .iter()
        .flat_map(|s| {
            s.diagnostics.iter().map(move |d| RatioRow {
                cell: s.cell.clone(),
                coordinate: d.coordinate.clone(),
                beta_ratio: d.beta * d.beta / d.beta_var,
                gamma_ratio: d.gamma * d.gamma / d.gamma_var,
                variance_product: d.beta_var * d.gamma_var,
                indirect_variance: d.beta * d.beta * d.gamma_var + d.gamma * d.gamma * d.beta_var,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cell_prefix(c: &CellId) -> String {
    format!(
        "{},{},{},{},{}",
        c.scenario,
        concentration::format(c.alpha_s),
        c.theta,
        c.mu,
        c.analysis
    )
}

pub const SUMMARY_HEADER: &str =
    "scenario,alpha_s,theta,mu,analysis,ok,failed,Eff.,True,Est.,Bias,SE-hat,SE-est,Power,Coverage";

pub fn write_summary_csv(summaries: &[ReplicationSummary]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for s in summaries {
        for e in &s.effects {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                cell_prefix(&s.cell),
                s.replicates_ok,
                s.replicates_failed,
                e.effect,
                opt(e.truth),
                e.mean,
                opt(e.bias),
                e.avg_se,
                e.emp_se,
                e.power,
                opt(e.coverage)
            ));
        }
    }
    out
}

pub const DIAGNOSTICS_HEADER: &str =
    "scenario,alpha_s,theta,mu,analysis,coordinate,beta,gamma,var_beta,var_gamma,beta_ratio,gamma_ratio,variance_product,indirect_variance";

pub fn write_diagnostics_csv(summaries: &[ReplicationSummary]) -> String {
    let mut out = format!("{DIAGNOSTICS_HEADER}\n");
    let rows = ratio_diagnostics(summaries);
    let diags = summaries.iter().flat_map(|s| s.diagnostics.iter());
    for (r, d) in rows.iter().zip(diags) {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            cell_prefix(&r.cell),
            r.coordinate,
            d.beta,
            d.gamma,
            d.beta_var,
            d.gamma_var,
            r.beta_ratio,
            r.gamma_ratio,
            r.variance_product,
            r.indirect_variance
        ));
    }
    out
}

pub const REPLICATES_HEADER: &str = "scenario,alpha_s,theta,mu,analysis,replicate,effect,point,se,ci_low,ci_high,error";

pub fn write_replicates_csv(results: &[CellResult]) -> String {
    let mut out = format!("{REPLICATES_HEADER}\n");
    for res in results {
        let prefix = cell_prefix(&res.summary.cell);
        for r in &res.replicates {
            match &r.outcome {
                Ok(est) => {
                    let named = est
                        .cie
                        .iter()
                        .enumerate()
                        .map(|(k, e)| (format!("CIE_{}", k + 1), e))
                        .chain([
                            ("OIE".to_string(), &est.oie),
                            ("NDE".to_string(), &est.nde),
                            ("TE".to_string(), &est.te),
                        ]);
                    for (name, e) in named {
                        out.push_str(&format!(
                            "{prefix},{},{name},{},{},{},{},\n",
                            r.index, e.point, e.se, e.ci_low, e.ci_high
                        ));
                    }
                }
                Err(msg) => {
                    out.push_str(&format!("{prefix},{},,,,,,\"{}\"\n", r.index, msg.replace('"', "\"\"")));
                }
            }
        }
    }
    out
}

pub fn write_truth_json(summaries: &[ReplicationSummary]) -> String {
    #[derive(Serialize)]
    struct Entry<'a> {
        cell: &'a CellId,
        truth: &'a TruePathCoefficients,
    }
    let entries: Vec<Entry> = summaries
        .iter()
        .map(|s| Entry {
            cell: &s.cell,
            truth: &s.truth,
        })
        .collect();
    serde_json::to_string_pretty(&entries).expect("truth serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_plan() -> StudyPlan {
        StudyPlan::from_json(
            r#"{
                "cells": [
                    {"scenario": "scenario3", "theta": 0.0, "alpha_s": 50},
                    {"scenario": "scenario3", "theta": 0.0, "alpha_s": 50,
                     "analysis": {"kind": "pivotal", "order": [4, 3, 2, 1, 0]}, "label": "3B"}
                ],
                "replicates": 12,
                "n": 300,
                "master_seed": 9,
                "mc_reps": 2000
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn plan_defaults_and_resolution() {
        let plan = small_plan();
        assert_eq!(plan.pooling, Pooling::SharedGamma);
        assert_eq!(plan.ci_level, 0.9);
        let a = plan.resolve(&plan.cells[0]).unwrap();
        let b = plan.resolve(&plan.cells[1]).unwrap();
        assert!(!a.misspecified && b.misspecified);
        assert_eq!(b.analysis_label, "3B");
        assert_eq!(a.calibration_seed(9), b.calibration_seed(9));
    }

    #[test]
    fn plan_rejections() {
        assert!(StudyPlan::from_json(r#"{"cells": []}"#).is_err());
        assert!(StudyPlan::from_json(r#"{"cells": [{"scenario": "nope"}]}"#).is_err());
        assert!(StudyPlan::from_json(r#"{"cells": [{"scenario": "scenario1"}], "replicates": 0}"#).is_err());
        assert!(StudyPlan::from_json(
            r#"{"cells": [{"scenario": "scenario1", "analysis": {"kind": "pivotal", "order": [0, 0, 1, 2, 3]}}]}"#
        )
        .is_err());
        assert!(StudyPlan::from_json(r#"{"cells": [{"scenario": "scenario1", "bogus": 1}]}"#).is_err());
    }

    #[test]
    fn misspecified_cells_omit_truth_metrics_and_share_data() {
        let plan = small_plan();
        let results = run_plan(&plan, Some(2)).unwrap();
        let (a, b) = (&results[0], &results[1]);
        assert!(a.summary.effects.iter().all(|e| e.bias.is_some() && e.coverage.is_some()));
        assert!(b.summary.effects.iter().all(|e| e.truth.is_none() && e.bias.is_none() && e.coverage.is_none()));
        // the same cohorts under two partitions: identical overall indirect effects
        for (ra, rb) in a.replicates.iter().zip(&b.replicates) {
            let (ea, eb) = (ra.outcome.as_ref().unwrap(), rb.outcome.as_ref().unwrap());
            assert!((ea.oie.point - eb.oie.point).abs() < 1e-10);
            let sum: f64 = ea.cie.iter().map(|e| e.point).sum();
            assert!((sum - ea.oie.point).abs() <= 1e-12 * ea.oie.point.abs().max(1e-300));
        }
        let csv = write_summary_csv(&[a.summary.clone(), b.summary.clone()]);
        assert_eq!(csv.lines().count(), 1 + 10);
        assert!(csv.lines().nth(6).unwrap().contains(",3B,12,0,CIE_1,,"));
    }

    #[test]
    fn ratio_identity() {
        let d = CoordinateDiagnostics {
            coordinate: "M1".into(),
            beta: -0.87,
            gamma: -0.046,
            beta_var: 0.0047,
            gamma_var: 0.00021,
            from_truth: true,
        };
        let s = ReplicationSummary {
            cell: CellId {
                scenario: "s".into(),
                alpha_s: 1.0,
                theta: 0.0,
                mu: 1e4,
                analysis: "generating".into(),
            },
            replicates_ok: 1,
            replicates_failed: 0,
            effects: vec![],
            diagnostics: vec![d.clone()],
            truth: TruePathCoefficients {
                strata: vec![],
                stratum_weights: vec![],
                beta1_by_stratum: vec![],
                beta1_weighted: vec![],
                gamma1: vec![],
                cie: vec![],
                mc_reps: 0,
            },
        };
        let r = &ratio_diagnostics(&[s])[0];
        let factored = r.variance_product * (r.beta_ratio + r.gamma_ratio);
        assert!((factored - r.indirect_variance).abs() <= 1e-10 * r.indirect_variance);
    }

    #[test]
    fn metrics_arithmetic() {
        let est = [Effect::new(0.1, 0.05, 1.0), Effect::new(0.3, 0.05, 1.0), Effect::new(-0.01, 0.05, 1.0)];
        let m = effect_metrics("x".into(), &est, Some(0.1));
        assert!((m.mean - 0.13).abs() < 1e-15);
        assert_eq!(m.bias, Some(m.mean - 0.1));
        assert!((m.power - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.coverage.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.avg_se - 0.05).abs() < 1e-15);
    }
}
