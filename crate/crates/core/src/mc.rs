//! Monte Carlo verification of the population limits of every estimator.
//!
//! [`closed_form_predictions`] turns a [`DgpConfig`] into the value each
//! estimator converges to. [`mc_run`] simulates independent panels, estimates
//! on each, and compares replication means with those predictions.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::regress::least_squares;
use crate::simulate::{dgp_moments, simulate_panel, DgpConfig, DgpMoments, OutcomeModel};
use crate::data::score_column;
use crate::strategies::{
    balancing_regression, eiv_correct, eiv_fs_strategy, eiv_th_strategy, iv_strategy, medium_regression,
    StrategyOptions, MIN_LAGS,
};

/// Single-regime forms of the population limits, kept separate from the
/// general expressions so each can check the other.
pub mod formulas {
    pub fn lambda(sigma2_u: f64, sigma2_m: f64) -> f64 {
        sigma2_u / (sigma2_u + sigma2_m)
    }

    pub fn delta_m(delta: f64, lambda_tilde: f64) -> f64 {
        delta * lambda_tilde
    }

    pub fn gamma_m(gamma: f64, lambda: f64, lambda_tilde: f64) -> f64 {
        gamma * lambda / lambda_tilde
    }

    /// Free of the shrinkage factor.
    pub fn beta_m(beta: f64, gamma: f64, delta: f64, lambda: f64) -> f64 {
        beta + gamma * delta * (1.0 - lambda)
    }

    /// IV slope when drift is independent of SES and current ability.
    pub fn gamma_iv_independent_drift(gamma: f64, lambda_tilde: f64, b_gamma: f64) -> f64 {
        gamma * b_gamma / lambda_tilde
    }

    pub fn beta_iv_independent_drift(beta: f64, gamma: f64, delta: f64, b_gamma: f64) -> f64 {
        beta + gamma * delta * (1.0 - b_gamma)
    }
}

/// Population value of every estimand implied by a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormPrediction {
    pub lambda: f64,
    pub lambda_tilde: f64,
    pub delta_m: f64,
    pub gamma_m: f64,
    pub beta_m: f64,
    /// First stage on the one-period lag.
    pub pi: f64,
    pub pi_prime: f64,
    pub theta1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub b_gamma: Option<f64>,
    /// `(τ, Cov[u_t, u_{t-τ}] / σ²_u)`.
    pub b_pi: Vec<(usize, f64)>,
    pub gamma_iv: f64,
    pub beta_iv: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gamma_eiv_fs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub beta_eiv_fs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda_th: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub forecast_r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gamma_eiv_th: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub beta_eiv_th: Option<f64>,
    /// True when a linear-probability outcome is clamped often enough
    /// (over 1% of students) that the linear limits are only approximate.
    pub approximate: bool,
}

/// Probability limits under `config`, with the reliability forecast fitted
/// by a polynomial of `degree`.
pub fn closed_form_predictions(config: &DgpConfig, degree: usize) -> Result<ClosedFormPrediction> {
    let m = dgp_moments(config)?;
    let lt = config.lambda_tilde;
    let lambda = m.lambda;
    let delta_m = m.delta_m;
    let gamma_m = formulas::gamma_m(config.gamma, lambda, lt);
    let beta_m = formulas::beta_m(config.beta, config.gamma, config.delta, lambda);
    let total = config.sigma2_u + config.sigma2_m_at(0);

    let l1 = m.lags[0];
    let lag_total = l1.var_u + l1.sigma2_m;
    let pi = l1.cov_u_current / lag_total;
    let pi_prime = l1.cov_u_current / total;
    let theta1 = l1.cov_y_u / (lt * lag_total);
    let gamma_iv = l1.cov_y_u / (lt * l1.cov_u_current);
    let beta_iv = config.beta + config.gamma * config.delta - gamma_iv * delta_m;

    let fs = eiv_correct(beta_m, gamma_m, delta_m, pi_prime).ok();

    let (lambda_th, forecast_r2) = match forecast_population(&m, total, degree) {
        Some((l, r2)) => (Some(l), r2),
        None => (None, None),
    };
    let th = lambda_th.and_then(|l| eiv_correct(beta_m, gamma_m, delta_m, l).ok());

    Ok(ClosedFormPrediction {
        lambda,
        lambda_tilde: lt,
        delta_m,
        gamma_m,
        beta_m,
        pi,
        pi_prime,
        theta1,
        b_gamma: m.b_gamma,
        b_pi: m.lags.iter().map(|l| (l.tau, l.b_pi)).collect(),
        gamma_iv,
        beta_iv,
        gamma_eiv_fs: fs.map(|f| f.1),
        beta_eiv_fs: fs.map(|f| f.0),
        lambda_th,
        forecast_r2,
        gamma_eiv_th: th.map(|t| t.1),
        beta_eiv_th: th.map(|t| t.0),
        approximate: clamp_share(config) > 0.01,
    })
}

// Polynomial through the population π′ points, evaluated at τ = 0. The fit
// R² is undefined (None) when the population series is flat.
fn forecast_population(m: &DgpMoments, total: f64, degree: usize) -> Option<(f64, Option<f64>)> {
    let n = m.lags.len();
    if degree == 0 || n < MIN_LAGS.max(degree + 2) {
        return None;
    }
    let x = nalgebra::DMatrix::from_fn(n, degree + 1, |i, j| (m.lags[i].tau as f64).powi(j as i32));
    let y = nalgebra::DVector::from_fn(n, |i, _| m.lags[i].cov_u_current / total);
    let ls = least_squares(&x, &y, 1e-12).ok()?;
    let ybar = y.mean();
    let tss: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    let ssr = ls.residuals.norm_squared();
    let r2 = (tss > 1e-24).then(|| (1.0 - ssr / tss).clamp(0.0, 1.0));
    Some((ls.coefficients[0], r2))
}

// Share of students whose linear-probability index falls outside [0, 1].
fn clamp_share(config: &DgpConfig) -> f64 {
    let OutcomeModel::LinearProbability { intercept } = config.outcome_model else {
        return 0.0;
    };
    let total_ses = config.beta + config.gamma * config.delta;
    let var = total_ses.powi(2)
        + config.gamma.powi(2) * config.sigma2_u
        + config.teacher_drift_weight.powi(2) * noise_variance(config)
        + config.sigma2_e
        + config.cluster_effect_var;
    let sd = var.sqrt();
    if sd == 0.0 {
        return if (0.0..=1.0).contains(&intercept) { 0.0 } else { 1.0 };
    }
    let dist = Normal::new(intercept, sd).expect("positive sd");
    dist.cdf(0.0) + (1.0 - dist.cdf(1.0))
}

fn noise_variance(config: &DgpConfig) -> f64 {
    config
        .drift_law
        .steps(config.periods - 1)
        .map(|s| s[0].noise_variance)
        .unwrap_or(0.0)
}

/// Quantities the Monte Carlo engine can track.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    BetaM,
    GammaM,
    DeltaM,
    Pi,
    PiPrime,
    Theta1,
    GammaIv,
    BetaIv,
    GammaEivFs,
    BetaEivFs,
    LambdaTh,
    ForecastR2,
    GammaEivTh,
    BetaEivTh,
}

impl Estimand {
    pub const ALL: [Estimand; 14] = [
        Estimand::BetaM,
        Estimand::GammaM,
        Estimand::DeltaM,
        Estimand::Pi,
        Estimand::PiPrime,
        Estimand::Theta1,
        Estimand::GammaIv,
        Estimand::BetaIv,
        Estimand::GammaEivFs,
        Estimand::BetaEivFs,
        Estimand::LambdaTh,
        Estimand::ForecastR2,
        Estimand::GammaEivTh,
        Estimand::BetaEivTh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimand::BetaM => "beta_m",
            Estimand::GammaM => "gamma_m",
            Estimand::DeltaM => "delta_m",
            Estimand::Pi => "pi",
            Estimand::PiPrime => "pi_prime",
            Estimand::Theta1 => "theta1",
            Estimand::GammaIv => "gamma_iv",
            Estimand::BetaIv => "beta_iv",
            Estimand::GammaEivFs => "gamma_eiv_fs",
            Estimand::BetaEivFs => "beta_eiv_fs",
            Estimand::LambdaTh => "lambda_th",
            Estimand::ForecastR2 => "forecast_r2",
            Estimand::GammaEivTh => "gamma_eiv_th",
            Estimand::BetaEivTh => "beta_eiv_th",
        }
    }

    pub fn predicted(self, p: &ClosedFormPrediction) -> Option<f64> {
        match self {
            Estimand::BetaM => Some(p.beta_m),
            Estimand::GammaM => Some(p.gamma_m),
            Estimand::DeltaM => Some(p.delta_m),
            Estimand::Pi => Some(p.pi),
            Estimand::PiPrime => Some(p.pi_prime),
            Estimand::Theta1 => Some(p.theta1),
            Estimand::GammaIv => Some(p.gamma_iv),
            Estimand::BetaIv => Some(p.beta_iv),
            Estimand::GammaEivFs => p.gamma_eiv_fs,
            Estimand::BetaEivFs => p.beta_eiv_fs,
            Estimand::LambdaTh => p.lambda_th,
            Estimand::ForecastR2 => p.forecast_r2,
            Estimand::GammaEivTh => p.gamma_eiv_th,
            Estimand::BetaEivTh => p.beta_eiv_th,
        }
    }

    /// Every estimand with a prediction under `p`, except the forecast R²:
    /// a sample R² is bounded by one, so its mean sits below an exact
    /// population fit and the z band means nothing. Request it explicitly.
    pub fn available(p: &ClosedFormPrediction) -> Vec<Estimand> {
        Self::ALL
            .into_iter()
            .filter(|e| *e != Estimand::ForecastR2 && e.predicted(p).is_some())
            .collect()
    }
}

impl std::fmt::Display for Estimand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_degree() -> usize {
    1
}

fn default_band() -> f64 {
    4.0
}

fn default_true() -> bool {
    true
}

/// A Monte Carlo experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub dgp: DgpConfig,
    pub replications: usize,
    /// Empty means every estimand with a closed form.
    #[serde(default)]
    pub estimands: Vec<Estimand>,
    pub master_seed: u64,
    #[serde(default = "default_degree")]
    pub degree: usize,
    /// Replaces the closed-form value of an estimand; used to plant a wrong
    /// prediction as a negative control.
    #[serde(default)]
    pub overrides: BTreeMap<Estimand, f64>,
    #[serde(default = "default_band")]
    pub z_band: f64,
    #[serde(default = "default_true")]
    pub parallel: bool,
}

impl McConfig {
    pub fn new(dgp: DgpConfig, replications: usize, master_seed: u64) -> Self {
        Self {
            dgp,
            replications,
            estimands: Vec::new(),
            master_seed,
            degree: 1,
            overrides: BTreeMap::new(),
            z_band: 4.0,
            parallel: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 replications, got {}",
                self.replications
            )));
        }
        if self.z_band.is_nan() || self.z_band <= 0.0 {
            return Err(Error::InvalidConfig("z_band must be positive".into()));
        }
        self.dgp.validate()
    }
}

/// Counter-based seed for replication `index`: a splitmix64 step of the
/// master seed offset by the index, so any replication can be rerun alone.
pub fn replication_seed(master_seed: u64, index: usize) -> u64 {
    let mut z = master_seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandSummary {
    pub estimand: Estimand,
    pub mean: f64,
    pub sd: f64,
    pub mc_se: f64,
    pub predicted: f64,
    pub z: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub replications: usize,
    pub z_band: f64,
    /// At least 30 replications.
    pub reportable: bool,
    pub approximate: bool,
    pub prediction: ClosedFormPrediction,
    pub estimands: Vec<EstimandSummary>,
}

impl McSummary {
    pub fn get(&self, estimand: Estimand) -> Option<&EstimandSummary> {
        self.estimands.iter().find(|e| e.estimand == estimand)
    }

    pub fn all_within_band(&self) -> bool {
        self.estimands.iter().all(|e| !e.flagged)
    }
}

/// Summary plus the raw draws, `draws[k][r]` for estimand `k` and
/// replication `r`.
#[derive(Debug, Clone)]
pub struct McRun {
    pub summary: McSummary,
    pub draws: Vec<Vec<f64>>,
    pub runtime_seconds: f64,
}

/// Estimates the requested estimands on one simulated panel.
pub fn replicate(config: &McConfig, estimands: &[Estimand], index: usize) -> Result<Vec<f64>> {
    let wrap = |e: Error| Error::Replication { index, source: Box::new(e) };
    let mut dgp = config.dgp.clone();
    dgp.seed = replication_seed(config.master_seed, index);
    let panel = simulate_panel(&dgp).map_err(wrap)?;
    let data = &panel.dataset;
    let opts = StrategyOptions { degree: config.degree, ..Default::default() };
    let needs = |set: &[Estimand]| estimands.iter().any(|e| set.contains(e));
    let cur = score_column(0);

    let medium = if needs(&[Estimand::BetaM, Estimand::GammaM]) {
        Some(medium_regression(data, &opts).map_err(wrap)?)
    } else {
        None
    };
    let delta_m = if needs(&[Estimand::DeltaM]) {
        Some(balancing_regression(data, 0, &opts).map_err(wrap)?.coef(&opts.ses).map_err(wrap)?)
    } else {
        None
    };
    let iv = if needs(&[Estimand::Pi, Estimand::PiPrime, Estimand::Theta1, Estimand::GammaIv, Estimand::BetaIv]) {
        Some(iv_strategy(data, &opts).map_err(wrap)?)
    } else {
        None
    };
    let fs = if needs(&[Estimand::GammaEivFs, Estimand::BetaEivFs]) {
        Some(eiv_fs_strategy(data, &opts).map_err(wrap)?)
    } else {
        None
    };
    let th = if needs(&[Estimand::LambdaTh, Estimand::ForecastR2, Estimand::GammaEivTh, Estimand::BetaEivTh]) {
        Some(eiv_th_strategy(data, &opts).map_err(wrap)?)
    } else {
        None
    };

    estimands
        .iter()
        .map(|e| {
            let v = match e {
                Estimand::BetaM => medium.as_ref().map(|f| f.coef(&opts.ses)).transpose()?,
                Estimand::GammaM => medium.as_ref().map(|f| f.coef(&cur)).transpose()?,
                Estimand::DeltaM => delta_m,
                Estimand::Pi => iv.as_ref().and_then(|s| s.details.pi),
                Estimand::PiPrime => iv.as_ref().and_then(|s| s.details.pi_prime),
                Estimand::Theta1 => iv.as_ref().and_then(|s| s.details.theta1),
                Estimand::GammaIv => iv.as_ref().map(|s| s.gamma_hat),
                Estimand::BetaIv => iv.as_ref().map(|s| s.beta_hat),
                Estimand::GammaEivFs => fs.as_ref().map(|s| s.gamma_hat),
                Estimand::BetaEivFs => fs.as_ref().map(|s| s.beta_hat),
                Estimand::LambdaTh => th.as_ref().and_then(|s| s.lambda_hat),
                Estimand::ForecastR2 => th.as_ref().and_then(|s| s.details.forecast_r2),
                Estimand::GammaEivTh => th.as_ref().map(|s| s.gamma_hat),
                Estimand::BetaEivTh => th.as_ref().map(|s| s.beta_hat),
            };
            v.ok_or_else(|| wrap(Error::InvalidConfig(format!("estimand `{e}` was not computed"))))
        })
        .collect()
}

/// Runs the experiment and summarizes it against the closed forms.
pub fn mc_run(config: &McConfig) -> Result<McRun> {
    config.validate()?;
    let start = Instant::now();
    let prediction = closed_form_predictions(&config.dgp, config.degree)?;
    if prediction.approximate {
        log::warn!("linear-probability outcome is clamped for over 1% of students; predictions are approximate");
    }
    let estimands = if config.estimands.is_empty() {
        Estimand::available(&prediction)
    } else {
        config.estimands.clone()
    };
    let predicted: Vec<f64> = estimands
        .iter()
        .map(|e| {
            config
                .overrides
                .get(e)
                .copied()
                .or_else(|| e.predicted(&prediction))
                .ok_or_else(|| Error::InvalidConfig(format!("no closed form for `{e}` under this configuration")))
        })
        .collect::<Result<_>>()?;

    let r = config.replications;
    let rows: Vec<Vec<f64>> = if config.parallel {
        (0..r).into_par_iter().map(|i| replicate(config, &estimands, i)).collect::<Result<_>>()?
    } else {
        (0..r).map(|i| replicate(config, &estimands, i)).collect::<Result<_>>()?
    };
    let draws: Vec<Vec<f64>> = (0..estimands.len()).map(|k| rows.iter().map(|row| row[k]).collect()).collect();

    let summaries = estimands
        .iter()
        .zip(&draws)
        .zip(&predicted)
        .map(|((&estimand, xs), &pred)| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let mc_se = (sd / n.sqrt()).max(1e-15);
            let z = (mean - pred) / mc_se;
            EstimandSummary { estimand, mean, sd, mc_se, predicted: pred, z, flagged: z.abs() > config.z_band }
        })
        .collect();

    Ok(McRun {
        summary: McSummary {
            replications: r,
            z_band: config.z_band,
            reportable: r >= 30,
            approximate: prediction.approximate,
            prediction,
            estimands: summaries,
        },
        draws,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Writes `estimand,replication,value`.
pub fn write_draws_csv<W: Write>(run: &McRun, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["estimand", "replication", "value"])?;
    for (s, xs) in run.summary.estimands.iter().zip(&run.draws) {
        for (r, x) in xs.iter().enumerate() {
            w.write_record([s.estimand.name().to_string(), r.to_string(), x.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::DriftLaw;

    fn classical() -> DgpConfig {
        DgpConfig::classical(2_000, 0)
    }

    #[test]
    fn proposition_one_arithmetic() {
        let p = closed_form_predictions(&classical(), 1).unwrap();
        assert!((p.beta_m - 0.022).abs() < 1e-12);
        assert!((p.gamma_m - 0.352).abs() < 1e-12);
        assert!((p.delta_m - 0.25).abs() < 1e-15);
    }

    #[test]
    fn shrinkage_equal_to_reliability() {
        let mut c = classical();
        c.lambda_tilde = c.lambda();
        let p = closed_form_predictions(&c, 1).unwrap();
        let base = closed_form_predictions(&classical(), 1).unwrap();
        assert!((p.gamma_m - 0.4).abs() < 1e-15);
        assert_eq!(p.beta_m, base.beta_m);
    }

    #[test]
    fn constant_drift_limits() {
        let p = closed_form_predictions(&classical(), 1).unwrap();
        assert!((p.beta_iv - 0.01).abs() < 1e-15);
        assert!((p.pi_prime - p.lambda).abs() < 1e-15);
        assert!((p.beta_eiv_fs.unwrap() - 0.01).abs() < 1e-15);
        assert!(p.lambda_th.is_none());

        let mut c = classical();
        c.periods = 4;
        let p = closed_form_predictions(&c, 1).unwrap();
        assert!((p.lambda_th.unwrap() - 0.88).abs() < 1e-12);
        // flat series: no R² to compare against
        assert!(p.forecast_r2.is_none());
        assert!(Estimand::ForecastR2.predicted(&p).is_none());
    }

    #[test]
    fn general_forms_agree_with_single_regime_forms() {
        let mut c = classical();
        c.lambda_tilde = 0.8;
        c.drift_law = DriftLaw::Noise { variance: 0.1 };
        c.teacher_drift_weight = 0.3;
        let p = closed_form_predictions(&c, 1).unwrap();
        let bg = p.b_gamma.unwrap();
        assert!((bg - (1.0 - 0.3 * 0.1 / (0.4 * 0.88))).abs() < 1e-15);
        assert!((p.beta_iv - formulas::beta_iv_independent_drift(0.01, 0.4, 0.25, bg)).abs() < 1e-15);
        assert!((p.gamma_iv - formulas::gamma_iv_independent_drift(0.4, 0.8, bg)).abs() < 1e-15);
        assert!((p.beta_iv - (0.01 + 0.25 * 0.3 * 0.1 / 0.88)).abs() < 1e-15);
        assert!((p.pi_prime - p.lambda).abs() < 1e-15);
        assert!((p.beta_eiv_fs.unwrap() - 0.01).abs() < 1e-15);
        // reduced form over first stage
        assert!((p.theta1 / p.pi - p.gamma_iv).abs() < 1e-14);
    }

    #[test]
    fn linear_decay_forecast_recovers_reliability() {
        let mut c = classical();
        c.periods = 8;
        c.drift_law = DriftLaw::linear_persistence_decay(0.02, 7);
        let p = closed_form_predictions(&c, 1).unwrap();
        assert!((p.lambda_th.unwrap() - 0.88).abs() < 1e-12);
        assert!((p.forecast_r2.unwrap() - 1.0).abs() < 1e-12);
        assert!((p.beta_eiv_th.unwrap() - 0.01).abs() < 1e-12);
        assert!((p.pi_prime - 0.88 * 0.98).abs() < 1e-12);
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..100).map(|i| replication_seed(7, i)).collect();
        let mut b = a.clone();
        b.sort();
        b.dedup();
        assert_eq!(b.len(), 100);
        assert_eq!(replication_seed(7, 3), a[3]);
    }

    #[test]
    fn one_replication_is_rejected() {
        let cfg = McConfig::new(classical(), 1, 0);
        assert!(matches!(mc_run(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn smoke_run_is_finite_and_deterministic() {
        let mut cfg = McConfig::new(classical(), 2, 5);
        cfg.estimands = vec![Estimand::BetaM, Estimand::BetaIv, Estimand::BetaEivFs];
        let a = mc_run(&cfg).unwrap();
        assert!(a.summary.estimands.iter().all(|e| e.z.is_finite()));
        cfg.parallel = false;
        let b = mc_run(&cfg).unwrap();
        assert_eq!(a.summary, b.summary);
        let mut buf = Vec::new();
        write_draws_csv(&a, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 7);
    }

    #[test]
    fn missing_closed_form_is_a_config_error() {
        let mut cfg = McConfig::new(classical(), 2, 5);
        cfg.estimands = vec![Estimand::LambdaTh];
        assert!(matches!(mc_run(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn lpm_clamping_is_flagged() {
        let mut c = classical();
        c.outcome_model = OutcomeModel::LinearProbability { intercept: 0.5 };
        assert!(closed_form_predictions(&c, 1).unwrap().approximate);
        c.sigma2_e = 0.0;
        c.gamma = 0.1;
        assert!(!closed_form_predictions(&c, 1).unwrap().approximate);
    }
}
