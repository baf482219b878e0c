//! Hierarchical count simulator: negative-binomial total, Dirichlet class
//! probabilities, multinomial counts, and a linear response driven by the
//! ilr coordinates of the counts.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coda::{self, basis_from_sbp, validate_sbp, CodaError, ContrastBasis, SbpMatrix};
use crate::mediation::CohortData;
use crate::rng::stream_rng;

pub const DEFAULT_MC_REPS: usize = 100_000;

/// Below this magnitude a pooled exposure effect cannot be inverted.
pub const BETA_EPS: f64 = 1e-8;

const PROP_TOL: f64 = 1e-12;
const CALIBRATION_STREAM: u64 = 0xca1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimgenError {
    #[error("invalid generative configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Coda(#[from] CodaError),
    #[error("coordinate {coordinate} has a nonzero indirect-effect target but pooled exposure effect {beta}")]
    DivideByZeroBeta { coordinate: usize, beta: f64 },
    #[error("unknown preset {0:?}; expected scenario1, scenario2 or scenario3")]
    UnknownPreset(String),
    #[error("configuration JSON: {0}")]
    Json(String),
}

pub type Result<T> = std::result::Result<T, SimgenError>;

/// Serde helpers writing an infinite concentration as `"inf"`.
pub mod concentration {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    fn from_raw<E: serde::de::Error>(raw: Raw) -> Result<f64, E> {
        match raw {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => parse(&t).ok_or_else(|| E::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }

    pub fn parse(text: &str) -> Option<f64> {
        match text.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "+inf" => Some(f64::INFINITY),
            other => other.parse::<f64>().ok().filter(|v| v.is_finite()),
        }
    }

    pub fn format(v: f64) -> String {
        if v.is_infinite() {
            "inf".into()
        } else {
            v.to_string()
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_raw(Raw::deserialize(d)?)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            match Option::<Raw>::deserialize(d)? {
                None => Ok(None),
                Some(raw) => from_raw::<D::Error>(raw).map(Some),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseProportions {
    pub unexposed: Vec<f64>,
    pub exposed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Confounder {
    pub name: String,
    /// `P(C = 1)`.
    pub probability: f64,
    /// Added to the class proportions when `C = 1`.
    pub offsets: Vec<f64>,
}

/// `P(X = 1 | C) = baseline + sum_c slopes_c C_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExposureModel {
    pub baseline: f64,
    pub slopes: Vec<f64>,
}

/// Non-mediator part of the response model and the residual sd.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseParams {
    pub intercept: f64,
    pub direct: f64,
    pub confounder_effects: Vec<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbpSpec {
    pub parts: Vec<String>,
    pub rows: Vec<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balances: Option<Vec<String>>,
}

impl SbpSpec {
    pub fn to_sbp(&self) -> Result<SbpMatrix> {
        Ok(validate_sbp(&self.rows, self.parts.clone(), self.balances.clone())?)
    }

    pub fn from_sbp(sbp: &SbpMatrix) -> Self {
        SbpSpec {
            parts: sbp.part_labels().to_vec(),
            rows: sbp
                .rows()
                .into_iter()
                .map(|r| r.into_iter().map(i64::from).collect())
                .collect(),
            balances: Some(sbp.balance_labels().to_vec()),
        }
    }
}

fn default_zero_replacement() -> f64 {
    coda::DEFAULT_ZERO_REPLACEMENT
}

/// Full parameterisation of one simulated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerativeConfig {
    #[serde(default)]
    pub name: String,
    /// Expected total count.
    pub mu: f64,
    /// Overdispersion of the total, `var K = mu (1 + theta mu)`; 0 is Poisson.
    pub theta: f64,
    /// Dirichlet concentration total; infinite fixes the class probabilities.
    #[serde(with = "concentration")]
    pub alpha_s: f64,
    pub base_props: BaseProportions,
    pub confounders: Vec<Confounder>,
    pub exposure_model: ExposureModel,
    pub response: ResponseParams,
    pub cie_targets: Vec<f64>,
    pub sbp: SbpSpec,
    pub n: usize,
    pub seed: u64,
    #[serde(default = "default_zero_replacement")]
    pub zero_replacement: f64,
}

pub const PRESET_NAMES: [&str; 3] = ["scenario1", "scenario2", "scenario3"];

pub fn preset(name: &str) -> Result<GenerativeConfig> {
    let text = match name {
        "scenario1" => include_str!("../presets/scenario1.json"),
        "scenario2" => include_str!("../presets/scenario2.json"),
        "scenario3" => include_str!("../presets/scenario3.json"),
        other => return Err(SimgenError::UnknownPreset(other.to_string())),
    };
    GenerativeConfig::from_json(text)
}

/// All `2^C` confounder patterns, ordered by stratum label.
pub fn confounder_patterns(confounders: &[Confounder]) -> Vec<Vec<u8>> {
    let c = confounders.len();
    let mut out: Vec<Vec<u8>> = (0..1usize << c)
        .map(|bits| (0..c).map(|i| ((bits >> (c - 1 - i)) & 1) as u8).collect())
        .collect();
    out.sort_by_key(|p| stratum_label(confounders, p));
    out
}

/// `name=value` pairs joined by `;`; the empty pattern is `all`.
pub fn stratum_label(confounders: &[Confounder], pattern: &[u8]) -> String {
    if confounders.is_empty() {
        return "all".into();
    }
    confounders
        .iter()
        .zip(pattern)
        .map(|(c, v)| format!("{}={v}", c.name))
        .collect::<Vec<_>>()
        .join(";")
}

impl GenerativeConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: GenerativeConfig =
            serde_json::from_str(text).map_err(|e| SimgenError::Json(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn num_parts(&self) -> usize {
        self.sbp.parts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimgenError::ConfigInvalid(m));
        let sbp = self.sbp.to_sbp()?;
        let d = sbp.num_parts();
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return bad(format!("mu must be positive, got {}", self.mu));
        }
        if !(self.theta.is_finite() && self.theta >= 0.0) {
            return bad(format!("theta must be >= 0, got {}", self.theta));
        }
        if !(self.alpha_s > 0.0) {
            return bad(format!("alpha_s must be positive, got {}", self.alpha_s));
        }
        for (which, props) in [("unexposed", &self.base_props.unexposed), ("exposed", &self.base_props.exposed)] {
            if props.len() != d {
                return bad(format!("{which} proportions have {} entries for {d} parts", props.len()));
            }
            if props.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
                return bad(format!("{which} proportions must be positive"));
            }
            let s: f64 = props.iter().sum();
            if (s - 1.0).abs() > PROP_TOL {
                return bad(format!("{which} proportions sum to {s}"));
            }
        }
        let c = self.confounders.len();
        for conf in &self.confounders {
            if !(0.0..=1.0).contains(&conf.probability) {
                return bad(format!("confounder {} probability {}", conf.name, conf.probability));
            }
            if conf.offsets.len() != d {
                return bad(format!("confounder {} has {} offsets for {d} parts", conf.name, conf.offsets.len()));
            }
            let s: f64 = conf.offsets.iter().sum();
            if conf.offsets.iter().any(|o| !o.is_finite()) || s.abs() > PROP_TOL {
                return bad(format!("confounder {} offsets must be finite and sum to 0 (sum {s})", conf.name));
            }
            if conf.name.is_empty() || conf.name.contains([';', '=']) {
                return bad(format!("confounder name {:?} must be nonempty without ';' or '='", conf.name));
            }
        }
        if self.exposure_model.slopes.len() != c {
            return bad(format!("{} exposure slopes for {c} confounders", self.exposure_model.slopes.len()));
        }
        if self.response.confounder_effects.len() != c {
            return bad(format!(
                "{} response confounder effects for {c} confounders",
                self.response.confounder_effects.len()
            ));
        }
        if !(self.response.sigma.is_finite() && self.response.sigma >= 0.0) {
            return bad(format!("sigma must be >= 0, got {}", self.response.sigma));
        }
        if self.cie_targets.len() != d - 1 {
            return bad(format!("{} indirect-effect targets for {} balances", self.cie_targets.len(), d - 1));
        }
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if !(self.zero_replacement.is_finite() && self.zero_replacement > 0.0) {
            return bad(format!("zero_replacement must be positive, got {}", self.zero_replacement));
        }
        for pattern in confounder_patterns(&self.confounders) {
            let px = self.exposure_probability(&pattern);
            if !(0.0..=1.0).contains(&px) {
                return bad(format!("exposure probability {px} outside [0, 1]"));
            }
            for x in 0..2 {
                if let Some(p) = self.proportions(x, &pattern).iter().find(|p| **p <= 0.0) {
                    return bad(format!("class proportion {p} is not positive after offsets"));
                }
            }
        }
        Ok(())
    }

    pub fn exposure_probability(&self, confounders: &[u8]) -> f64 {
        self.exposure_model.baseline
            + self
                .exposure_model
                .slopes
                .iter()
                .zip(confounders)
                .map(|(s, &c)| s * f64::from(c))
                .sum::<f64>()
    }

    /// Expected class proportions `alpha_j / alpha_S` for one individual.
    pub fn proportions(&self, x: u8, confounders: &[u8]) -> Vec<f64> {
        let base = if x == 1 { &self.base_props.exposed } else { &self.base_props.unexposed };
        let mut props = base.clone();
        for (conf, &c) in self.confounders.iter().zip(confounders) {
            if c == 1 {
                for (p, o) in props.iter_mut().zip(&conf.offsets) {
                    *p += o;
                }
            }
        }
        props
    }

    pub fn stratum_probability(&self, confounders: &[u8]) -> f64 {
        self.confounders
            .iter()
            .zip(confounders)
            .map(|(conf, &c)| if c == 1 { conf.probability } else { 1.0 - conf.probability })
            .product()
    }

    pub fn basis(&self) -> Result<ContrastBasis> {
        Ok(basis_from_sbp(&self.sbp.to_sbp()?))
    }
}

/// Total count: Poisson(mu) when `theta == 0`, else a gamma-Poisson mixture
/// with mean `mu` and variance `mu (1 + theta mu)`.
pub fn draw_total<R: Rng + ?Sized>(mu: f64, theta: f64, rng: &mut R) -> u64 {
    let lambda = if theta == 0.0 {
        mu
    } else {
        Gamma::new(1.0 / theta, theta * mu)
            .expect("positive gamma parameters")
            .sample(rng)
    };
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("positive rate").sample(rng) as u64
}

/// Dirichlet draw computed through log-gamma variates so that very small
/// shapes never produce an all-zero vector.
pub fn draw_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let logs: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            if a >= 1.0 {
                Gamma::new(a, 1.0).expect("positive shape").sample(rng).ln()
            } else {
                let g: f64 = Gamma::new(a + 1.0, 1.0).expect("positive shape").sample(rng);
                let u: f64 = 1.0 - rng.random::<f64>();
                g.ln() + u.ln() / a
            }
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Multinomial draw by sequential conditional binomials.
pub fn draw_multinomial<R: Rng + ?Sized>(total: u64, probs: &[f64], rng: &mut R) -> Vec<u64> {
    let mut out = vec![0u64; probs.len()];
    let mut remaining = total;
    let mut mass = 1.0;
    for (j, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if j + 1 == probs.len() {
            out[j] = remaining;
            break;
        }
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 1.0 };
        let c = Binomial::new(remaining, q).expect("valid binomial").sample(rng);
        out[j] = c;
        remaining -= c;
        mass -= p;
    }
    out
}

/// Counts for a total `total` and mean proportions `props`, with Dirichlet
/// concentration `alpha_s` (infinite: multinomial with fixed `props`).
pub fn draw_counts_given_total<R: Rng + ?Sized>(
    alpha_s: f64,
    props: &[f64],
    total: u64,
    rng: &mut R,
) -> Vec<u64> {
    if alpha_s.is_infinite() {
        draw_multinomial(total, props, rng)
    } else {
        let alpha: Vec<f64> = props.iter().map(|p| alpha_s * p).collect();
        let pi = draw_dirichlet(&alpha, rng);
        draw_multinomial(total, &pi, rng)
    }
}

/// One individual's class counts given exposure and confounder values.
pub fn draw_individual_counts<R: Rng + ?Sized>(
    config: &GenerativeConfig,
    x: u8,
    confounders: &[u8],
    rng: &mut R,
) -> Result<Vec<u64>> {
    if confounders.len() != config.confounders.len() {
        return Err(SimgenError::ConfigInvalid(format!(
            "{} confounder values for {} confounders",
            confounders.len(),
            config.confounders.len()
        )));
    }
    let props = config.proportions(x, confounders);
    if let Some(p) = props.iter().find(|p| **p <= 0.0) {
        return Err(SimgenError::ConfigInvalid(format!(
            "class proportion {p} is not positive after offsets"
        )));
    }
    let total = draw_total(config.mu, config.theta, rng);
    Ok(draw_counts_given_total(config.alpha_s, &props, total, rng))
}

/// Calibrated exposure-to-coordinate and coordinate-to-response effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruePathCoefficients {
    pub strata: Vec<String>,
    pub stratum_weights: Vec<f64>,
    /// One row per stratum.
    pub beta1_by_stratum: Vec<Vec<f64>>,
    pub beta1_weighted: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub cie: Vec<f64>,
    pub mc_reps: usize,
}

impl TruePathCoefficients {
    pub fn oie(&self) -> f64 {
        self.cie.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaCalibration {
    pub strata: Vec<String>,
    pub stratum_weights: Vec<f64>,
    pub beta1_by_stratum: Vec<Vec<f64>>,
    pub beta1_weighted: Vec<f64>,
    pub mc_reps: usize,
}

/// Mean ilr coordinates of `mc_reps` simulated individuals in one cell.
fn mean_ilr<R: Rng + ?Sized>(
    config: &GenerativeConfig,
    basis: &ContrastBasis,
    x: u8,
    pattern: &[u8],
    mc_reps: usize,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let d = config.num_parts();
    let mut log_sum = DVector::<f64>::zeros(d);
    for _ in 0..mc_reps {
        let counts = draw_individual_counts(config, x, pattern, rng)?;
        for (s, &c) in log_sum.iter_mut().zip(&counts) {
            *s += if c == 0 { config.zero_replacement.ln() } else { (c as f64).ln() };
        }
    }
    // the closure constant drops out because every basis column sums to 0
    Ok(basis.matrix().transpose() * (log_sum / mc_reps as f64))
}

/// Exposure effects on the ilr coordinates as differences of Monte Carlo
/// means, per stratum and weighted by stratum probability. Cells run in
/// parallel on independent streams derived from `seed`.
pub fn calibrate_true_betas(config: &GenerativeConfig, mc_reps: usize, seed: u64) -> Result<BetaCalibration> {
    config.validate()?;
    if mc_reps == 0 {
        return Err(SimgenError::ConfigInvalid("mc_reps must be positive".into()));
    }
    let basis = config.basis()?;
    let patterns = confounder_patterns(&config.confounders);
    let cells: Vec<(usize, u8)> = (0..patterns.len()).flat_map(|h| [(h, 0u8), (h, 1u8)]).collect();
    let means = cells
        .par_iter()
        .enumerate()
        .map(|(idx, &(h, x))| {
            let mut rng = stream_rng(seed, &[CALIBRATION_STREAM, idx as u64]);
            mean_ilr(config, &basis, x, &patterns[h], mc_reps, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let j = basis.num_balances();
    let mut weighted = vec![0.0; j];
    let mut by_stratum = Vec::with_capacity(patterns.len());
    let mut weights = Vec::with_capacity(patterns.len());
    for (h, pattern) in patterns.iter().enumerate() {
        let diff = &means[2 * h + 1] - &means[2 * h];
        let w = config.stratum_probability(pattern);
        for k in 0..j {
            weighted[k] += w * diff[k];
        }
        by_stratum.push(diff.iter().copied().collect());
        weights.push(w);
    }
    Ok(BetaCalibration {
        strata: patterns.iter().map(|p| stratum_label(&config.confounders, p)).collect(),
        stratum_weights: weights,
        beta1_by_stratum: by_stratum,
        beta1_weighted: weighted,
        mc_reps,
    })
}

/// Coordinate-to-response effects reproducing the indirect-effect targets.
pub fn calibrate_gammas(cie_targets: &[f64], beta1_weighted: &[f64]) -> Result<Vec<f64>> {
    if cie_targets.len() != beta1_weighted.len() {
        return Err(SimgenError::ConfigInvalid(format!(
            "{} targets for {} coordinates",
            cie_targets.len(),
            beta1_weighted.len()
        )));
    }
    cie_targets
        .iter()
        .zip(beta1_weighted)
        .enumerate()
        .map(|(k, (&cie, &beta))| {
            if cie == 0.0 {
                Ok(0.0)
            } else if beta.abs() < BETA_EPS {
                Err(SimgenError::DivideByZeroBeta { coordinate: k + 1, beta })
            } else {
                Ok(cie / beta)
            }
        })
        .collect()
}

pub fn calibrate_truth(config: &GenerativeConfig, mc_reps: usize, seed: u64) -> Result<TruePathCoefficients> {
    let betas = calibrate_true_betas(config, mc_reps, seed)?;
    let gamma1 = calibrate_gammas(&config.cie_targets, &betas.beta1_weighted)?;
    let cie = gamma1.iter().zip(&betas.beta1_weighted).map(|(g, b)| g * b + 0.0).collect();
    Ok(TruePathCoefficients {
        strata: betas.strata,
        stratum_weights: betas.stratum_weights,
        beta1_by_stratum: betas.beta1_by_stratum,
        beta1_weighted: betas.beta1_weighted,
        gamma1,
        cie,
        mc_reps,
    })
}

/// Simulated cohort together with the confounder values behind each stratum
/// label.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedCohort {
    pub data: CohortData,
    /// `n x C` confounder values.
    pub confounders: Vec<Vec<u8>>,
}

pub fn simulate_cohort_with_rng<R: Rng + ?Sized>(
    config: &GenerativeConfig,
    gamma1: &[f64],
    rng: &mut R,
) -> Result<SimulatedCohort> {
    config.validate()?;
    let basis = config.basis()?;
    if gamma1.len() != basis.num_balances() {
        return Err(SimgenError::ConfigInvalid(format!(
            "{} response coefficients for {} balances",
            gamma1.len(),
            basis.num_balances()
        )));
    }
    let n = config.n;
    let d = config.num_parts();
    let mut counts = DMatrix::<f64>::zeros(n, d);
    let mut exposure = Vec::with_capacity(n);
    let mut conf_values = Vec::with_capacity(n);
    for i in 0..n {
        let pattern: Vec<u8> = config
            .confounders
            .iter()
            .map(|c| u8::from(rng.random::<f64>() < c.probability))
            .collect();
        let x = u8::from(rng.random::<f64>() < config.exposure_probability(&pattern));
        let row = draw_individual_counts(config, x, &pattern, rng)?;
        for (j, c) in row.into_iter().enumerate() {
            counts[(i, j)] = c as f64;
        }
        exposure.push(x);
        conf_values.push(pattern);
    }
    let ilr = coda::ilr_counts_matrix(&counts, &basis, config.zero_replacement)?;
    let noise = Normal::new(0.0, config.response.sigma)
        .map_err(|e| SimgenError::ConfigInvalid(e.to_string()))?;
    let r = &config.response;
    let response: Vec<f64> = (0..n)
        .map(|i| {
            let mediated: f64 = (0..gamma1.len()).map(|k| gamma1[k] * ilr[(i, k)]).sum();
            let confounding: f64 = r
                .confounder_effects
                .iter()
                .zip(&conf_values[i])
                .map(|(g, &c)| g * f64::from(c))
                .sum();
            r.intercept + mediated + r.direct * f64::from(exposure[i]) + confounding + noise.sample(rng)
        })
        .collect();
    let stratum = conf_values
        .iter()
        .map(|p| stratum_label(&config.confounders, p))
        .collect();
    let data = CohortData::new(
        (1..=n).map(|i| format!("s{i}")).collect(),
        config.sbp.parts.clone(),
        counts,
        exposure,
        stratum,
        response,
    )
    .map_err(|e| SimgenError::ConfigInvalid(e.to_string()))?;
    Ok(SimulatedCohort {
        data,
        confounders: conf_values,
    })
}

/// Cohort drawn from the stream seeded by `config.seed`.
pub fn simulate_cohort(config: &GenerativeConfig, truth: &TruePathCoefficients) -> Result<SimulatedCohort> {
    let mut rng = stream_rng(config.seed, &[]);
    simulate_cohort_with_rng(config, &truth.gamma1, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn presets_load_and_validate() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            assert_eq!(cfg.name, name);
            assert_eq!(cfg.num_parts(), 5);
            assert_eq!(cfg.mu, 10000.0);
        }
        assert!(matches!(preset("scenario9"), Err(SimgenError::UnknownPreset(_))));
    }

    #[test]
    fn infinite_concentration_round_trips() {
        let mut cfg = preset("scenario1").unwrap();
        cfg.alpha_s = f64::INFINITY;
        let text = cfg.to_json();
        assert!(text.contains("\"alpha_s\": \"inf\""));
        assert_eq!(GenerativeConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn strata_order_and_weights() {
        let cfg = preset("scenario1").unwrap();
        let patterns = confounder_patterns(&cfg.confounders);
        let labels: Vec<_> = patterns.iter().map(|p| stratum_label(&cfg.confounders, p)).collect();
        assert_eq!(labels, ["c1=0;c2=0", "c1=0;c2=1", "c1=1;c2=0", "c1=1;c2=1"]);
        for p in &patterns {
            assert_eq!(cfg.stratum_probability(p), 0.25);
        }
        assert!((cfg.exposure_probability(&[1, 1]) - 0.35).abs() < 1e-15);
    }

    #[test]
    fn config_rejections() {
        let base = preset("scenario1").unwrap();
        let mut c = base.clone();
        c.confounders[0].offsets = vec![0.02, 0.0, 0.0, 0.0, 0.0];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.confounders[0].offsets = vec![-0.7, 0.7, 0.0, 0.0, 0.0];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.theta = -0.1;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.base_props.exposed[0] = 0.51;
        assert!(c.validate().is_err());
        let mut c = base;
        c.cie_targets.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn poisson_total_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k: Vec<f64> = (0..100_000).map(|_| draw_total(10000.0, 0.0, &mut rng) as f64).collect();
        let (m, v) = moments(&k);
        assert!((m / 10000.0 - 1.0).abs() < 0.01);
        assert!((v / 10000.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn dirichlet_small_shapes_stay_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10_000 {
            let pi = draw_dirichlet(&[0.01, 0.002, 0.05], &mut rng);
            assert!(pi.iter().all(|p| p.is_finite() && *p >= 0.0));
            assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn multinomial_conserves_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for total in [0u64, 1, 17, 10_000] {
            let c = draw_multinomial(total, &[0.5, 0.2, 0.0, 0.3], &mut rng);
            assert_eq!(c.iter().sum::<u64>(), total);
            assert_eq!(c[2], 0);
        }
    }

    #[test]
    fn gamma_calibration() {
        let g = calibrate_gammas(&[0.04, 0.01, 0.03, 0.02], &[-0.87, -1.742, 1.747, -2.031]).unwrap();
        let expect = [-0.0460, -0.0057, 0.0172, -0.0098];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 5e-5, "{a} vs {b}");
        }
        assert_eq!(calibrate_gammas(&[0.0; 3], &[0.0, 1.0, -1.0]).unwrap(), vec![0.0; 3]);
        let g3 = calibrate_gammas(&[0.10, 0.0, 0.0, 0.0], &[-0.36, 0.0, 0.2, 0.0]).unwrap();
        assert!((g3[0] + 0.2778).abs() < 1e-4);
        assert_eq!(
            calibrate_gammas(&[0.1], &[1e-9]),
            Err(SimgenError::DivideByZeroBeta { coordinate: 1, beta: 1e-9 })
        );
    }

    #[test]
    fn null_exposure_calibrates_to_zero() {
        let mut cfg = preset("scenario1").unwrap();
        cfg.base_props.exposed = cfg.base_props.unexposed.clone();
        let cal = calibrate_true_betas(&cfg, 20_000, 3).unwrap();
        for b in cal.beta1_weighted {
            assert!(b.abs() < 0.05, "{b}");
        }
    }

    #[test]
    fn noiseless_response_without_mediation() {
        let mut cfg = preset("scenario1").unwrap();
        cfg.response.sigma = 0.0;
        cfg.n = 200;
        let sim = simulate_cohort_with_rng(&cfg, &[0.0; 4], &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        for i in 0..cfg.n {
            let c = &sim.confounders[i];
            let expect = 2.0 + 0.4 * f64::from(sim.data.exposure[i]) + 0.05 * f64::from(c[0]) - 0.05 * f64::from(c[1]);
            assert!((sim.data.response[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn seeded_cohorts_are_identical() {
        let mut cfg = preset("scenario2").unwrap();
        cfg.n = 100;
        let truth = TruePathCoefficients {
            strata: vec![],
            stratum_weights: vec![],
            beta1_by_stratum: vec![],
            beta1_weighted: vec![1.0; 4],
            gamma1: vec![0.1, 0.2, -0.1, 0.05],
            cie: vec![],
            mc_reps: 0,
        };
        let a = simulate_cohort(&cfg, &truth).unwrap();
        let b = simulate_cohort(&cfg, &truth).unwrap();
        assert_eq!(a, b);
        cfg.seed += 1;
        assert_ne!(a.data.counts, simulate_cohort(&cfg, &truth).unwrap().data.counts);
    }
}
