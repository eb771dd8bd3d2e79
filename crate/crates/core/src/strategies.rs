//! Estimators of the conditional SES gap: plain OLS, lagged-score IV, and the
//! two errors-in-variables corrections (reliability from the first stage, or
//! forecast from the test history).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{score_column, PanelDataset, TestSlot, VariableSpec, OUTCOME, SCHOOL_ID, SES};
use crate::error::{Error, Result};
use crate::regress::{
    delta_method, least_squares, ols_fit_on, restrict_rows, stacked_fit_on, stacked_name, tsls_fit_on, RegressOptions,
    RegressionFit, StackedSystem,
};

/// Two-sided 95% normal critical value.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Numerical slack above one still accepted as a reliability ratio.
const LAMBDA_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "OLS")]
    Ols,
    #[serde(rename = "IV")]
    Iv,
    #[serde(rename = "EIV_FS")]
    EivFs,
    #[serde(rename = "EIV_TH")]
    EivTh,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ols, Method::Iv, Method::EivFs, Method::EivTh];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Ols => "OLS",
            Method::Iv => "IV",
            Method::EivFs => "EIV_FS",
            Method::EivTh => "EIV_TH",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Which rows each lag regression of the reliability series uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Complete cases of that lag's own variables.
    #[default]
    PerLag,
    /// Rows complete for every lag at once.
    Common,
}

/// Where and how the reliability forecast is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastOptions {
    /// Lag at which the fitted polynomial is evaluated (0 = current test).
    pub target_tau: f64,
    /// Weight points by inverse squared standard error.
    pub weighted: bool,
}

impl Default for ForecastOptions {
    fn default() -> Self {
        Self { target_tau: 0.0, weighted: false }
    }
}

/// Column choices and numerical options shared by every strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOptions {
    pub outcome: String,
    pub ses: String,
    pub cluster: String,
    /// Lag of the instrument for IV and EIV-FS.
    pub instrument_lag: usize,
    pub degree: usize,
    pub sample_mode: SampleMode,
    pub forecast: ForecastOptions,
    pub regress: RegressOptions,
}

impl Default for StrategyOptions {
    fn default() -> Self {
        Self {
            outcome: OUTCOME.into(),
            ses: SES.into(),
            cluster: SCHOOL_ID.into(),
            instrument_lag: 1,
            degree: 1,
            sample_mode: SampleMode::PerLag,
            forecast: ForecastOptions::default(),
            regress: RegressOptions::default(),
        }
    }
}

/// Method-specific by-products of an estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimateDetails {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pi_prime: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_stage_f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forecast_r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,
}

/// One strategy's answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyEstimate {
    pub method: Method,
    pub beta_hat: f64,
    pub gamma_hat: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda_hat: Option<f64>,
    pub se_beta: f64,
    pub se_gamma: f64,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub details: EstimateDetails,
}

/// One point of the lagged first-stage series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityPoint {
    pub tau: usize,
    pub label: String,
    pub pi: f64,
    pub pi_prime: f64,
    pub se: f64,
    pub variance_ratio: f64,
    pub n_obs: usize,
}

/// Rescaled first stages for every usable lag, oldest test first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilitySeries {
    pub points: Vec<ReliabilityPoint>,
}

/// Polynomial fit to a [`ReliabilitySeries`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityForecast {
    pub degree: usize,
    pub target_tau: f64,
    pub lambda_hat: f64,
    pub fit_r2: f64,
    /// Ascending powers of τ.
    pub coefficients: Vec<f64>,
}

impl ReliabilityForecast {
    pub fn evaluate(&self, tau: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * tau + c)
    }
}

fn current() -> String {
    score_column(0)
}

fn complete(data: &PanelDataset, names: &[&str]) -> Result<Vec<usize>> {
    data.complete_rows(names)
}

/// `y` on SES and the current score.
pub fn medium_regression(data: &PanelDataset, opts: &StrategyOptions) -> Result<RegressionFit> {
    let cur = current();
    let rows = complete(data, &[&opts.outcome, &opts.ses, &cur])?;
    medium_on(data, opts, &rows)
}

fn medium_on(data: &PanelDataset, opts: &StrategyOptions, rows: &[usize]) -> Result<RegressionFit> {
    let cur = current();
    let spec = VariableSpec::new(opts.outcome.as_str(), &[&opts.ses, &cur], opts.cluster.as_str());
    ols_fit_on(data, &spec, rows, &opts.regress)
}

/// Score `lag` periods back on SES.
pub fn balancing_regression(data: &PanelDataset, lag: usize, opts: &StrategyOptions) -> Result<RegressionFit> {
    let col = score_column(lag);
    let rows = complete(data, &[&col, &opts.ses])?;
    balancing_on(data, lag, opts, &rows)
}

fn balancing_on(data: &PanelDataset, lag: usize, opts: &StrategyOptions, rows: &[usize]) -> Result<RegressionFit> {
    let col = score_column(lag);
    let spec = VariableSpec::new(col.as_str(), &[&opts.ses], opts.cluster.as_str());
    ols_fit_on(data, &spec, rows, &opts.regress)
}

/// `π · (lag residual variance / current residual variance)`.
pub fn adjusted_first_stage(pi_hat: f64, resid_var_lag: f64, resid_var_current: f64) -> Result<f64> {
    if !(resid_var_lag > 0.0 && resid_var_current > 0.0) {
        return Err(Error::NonpositiveVariance { lag: resid_var_lag, current: resid_var_current });
    }
    Ok(pi_hat * resid_var_lag / resid_var_current)
}

/// Errors-in-variables correction of the medium-regression coefficients.
/// Returns `(β, γ)`.
pub fn eiv_correct(beta_m: f64, gamma_m: f64, delta_m: f64, lambda: f64) -> Result<(f64, f64)> {
    if !(lambda > 0.0 && lambda <= 1.0 + LAMBDA_SLACK) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    Ok((beta_m - gamma_m * delta_m * (1.0 - lambda) / lambda, gamma_m / lambda))
}

/// `100 · (β^m − β•) / β^m`.
pub fn share_explained(beta_m: f64, beta_corrected: f64) -> Result<f64> {
    if beta_m == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok(100.0 * (beta_m - beta_corrected) / beta_m)
}

pub fn ols_strategy(data: &PanelDataset, opts: &StrategyOptions) -> Result<StrategyEstimate> {
    let fit = medium_regression(data, opts)?;
    let cur = current();
    let bal = balancing_regression(data, 0, opts)?;
    Ok(StrategyEstimate {
        method: Method::Ols,
        beta_hat: fit.coef(&opts.ses)?,
        gamma_hat: fit.coef(&cur)?,
        lambda_hat: None,
        se_beta: fit.se(&opts.ses)?,
        se_gamma: fit.se(&cur)?,
        n_obs: fit.n_obs,
        n_clusters: fit.n_clusters,
        details: EstimateDetails { delta_m: Some(bal.coef(&opts.ses)?), ..Default::default() },
    })
}

/// Residual-variance ratio `lag / current` from the two balancing regressions
/// on `rows`.
fn variance_ratio(data: &PanelDataset, lag: usize, opts: &StrategyOptions, rows: &[usize]) -> Result<f64> {
    let lagged = balancing_on(data, lag, opts, rows)?;
    let cur = balancing_on(data, 0, opts, rows)?;
    adjusted_first_stage(1.0, lagged.residual_variance, cur.residual_variance)
}

/// Current score instrumented by the score `instrument_lag` periods back.
pub fn iv_strategy(data: &PanelDataset, opts: &StrategyOptions) -> Result<StrategyEstimate> {
    let cur = current();
    let lag = score_column(opts.instrument_lag);
    let rows = complete(data, &[&opts.outcome, &opts.ses, &cur, &lag])?;
    let iv = tsls_fit_on(data, &opts.outcome, &cur, &lag, &[&opts.ses], &opts.cluster, &rows, &opts.regress)?;
    let rf_spec = VariableSpec::new(opts.outcome.as_str(), &[&opts.ses, &lag], opts.cluster.as_str());
    let rf = ols_fit_on(data, &rf_spec, &rows, &opts.regress)?;
    let pi = iv.first_stage.coef(&lag)?;
    let ratio = variance_ratio(data, opts.instrument_lag, opts, &rows)?;
    let fit = &iv.second_stage;
    Ok(StrategyEstimate {
        method: Method::Iv,
        beta_hat: fit.coef(&opts.ses)?,
        gamma_hat: fit.coef(&cur)?,
        lambda_hat: None,
        se_beta: fit.se(&opts.ses)?,
        se_gamma: fit.se(&cur)?,
        n_obs: fit.n_obs,
        n_clusters: fit.n_clusters,
        details: EstimateDetails {
            pi: Some(pi),
            pi_prime: Some(pi * ratio),
            theta1: Some(rf.coef(&lag)?),
            variance_ratio: Some(ratio),
            first_stage_f: Some(iv.first_stage_f),
            ..Default::default()
        },
    })
}

/// EIV with the reliability ratio taken from the rescaled first stage.
///
/// Medium, balancing and first-stage regressions are estimated jointly on a
/// triplicated sample so the delta method sees their cross-covariances. The
/// residual-variance ratio is held fixed.
pub fn eiv_fs_strategy(data: &PanelDataset, opts: &StrategyOptions) -> Result<StrategyEstimate> {
    let cur = current();
    let lag = score_column(opts.instrument_lag);
    let rows = complete(data, &[&opts.outcome, &opts.ses, &cur, &lag])?;
    let ratio = variance_ratio(data, opts.instrument_lag, opts, &rows)?;
    let system = StackedSystem::new(vec![
        (VariableSpec::new(opts.outcome.as_str(), &[&opts.ses, &cur], opts.cluster.as_str()), "medium".into()),
        (VariableSpec::new(cur.as_str(), &[&opts.ses], opts.cluster.as_str()), "balancing".into()),
        (VariableSpec::new(cur.as_str(), &[&opts.ses, &lag], opts.cluster.as_str()), "first_stage".into()),
    ]);
    let joint = stacked_fit_on(data, &system, &rows, &opts.regress)?;
    let ib = joint.index(&stacked_name("medium", &opts.ses))?;
    let ig = joint.index(&stacked_name("medium", &cur))?;
    let id = joint.index(&stacked_name("balancing", &opts.ses))?;
    let ip = joint.index(&stacked_name("first_stage", &lag))?;
    let b = joint.coefficients.as_slice();
    let (beta_m, gamma_m, delta_m, pi) = (b[ib], b[ig], b[id], b[ip]);
    let lambda = pi * ratio;
    let (beta, gamma) = eiv_correct(beta_m, gamma_m, delta_m, lambda)?;
    let k = b.len();

    let beta_est = delta_method(
        &joint,
        |b| b[ib] - b[ig] * b[id] * (1.0 / (b[ip] * ratio) - 1.0),
        |b| {
            let l = b[ip] * ratio;
            let mut g = vec![0.0; k];
            g[ib] = 1.0;
            g[ig] = -b[id] * (1.0 / l - 1.0);
            g[id] = -b[ig] * (1.0 / l - 1.0);
            g[ip] = b[ig] * b[id] * ratio / (l * l);
            g
        },
    )?;
    let gamma_est = delta_method(
        &joint,
        |b| b[ig] / (b[ip] * ratio),
        |b| {
            let l = b[ip] * ratio;
            let mut g = vec![0.0; k];
            g[ig] = 1.0 / l;
            g[ip] = -b[ig] * ratio / (l * l);
            g
        },
    )?;
    debug_assert!((beta_est.value - beta).abs() < 1e-12 && (gamma_est.value - gamma).abs() < 1e-12);
    Ok(StrategyEstimate {
        method: Method::EivFs,
        beta_hat: beta,
        gamma_hat: gamma,
        lambda_hat: Some(lambda),
        se_beta: beta_est.se,
        se_gamma: gamma_est.se,
        n_obs: rows.len(),
        n_clusters: joint.n_clusters,
        details: EstimateDetails {
            delta_m: Some(delta_m),
            pi: Some(pi),
            pi_prime: Some(lambda),
            variance_ratio: Some(ratio),
            ..Default::default()
        },
    })
}

/// Minimum number of lags needed for a history-based reliability forecast.
pub const MIN_LAGS: usize = 3;

/// Rescaled first stage of the current score on each available lag.
pub fn build_reliability_series(data: &PanelDataset, opts: &StrategyOptions) -> Result<ReliabilitySeries> {
    let lags = data.available_lags();
    if lags.len() < MIN_LAGS {
        return Err(Error::TooFewLags { found: lags.len(), needed: MIN_LAGS });
    }
    let cur = current();
    let all_rows: Vec<usize> = (0..data.n_rows()).collect();
    let common = match opts.sample_mode {
        SampleMode::PerLag => None,
        SampleMode::Common => {
            let cols: Vec<String> = lags.iter().map(|&l| score_column(l)).collect();
            let mut names: Vec<&str> = vec![&cur, &opts.ses];
            names.extend(cols.iter().map(String::as_str));
            Some(restrict_rows(data, &names, &all_rows)?)
        }
    };
    let mut points = Vec::with_capacity(lags.len());
    for &tau in lags.iter().rev() {
        let col = score_column(tau);
        let rows = match &common {
            Some(r) => r.clone(),
            None => complete(data, &[&cur, &opts.ses, &col])?,
        };
        let spec = VariableSpec::new(cur.as_str(), &[&opts.ses, &col], opts.cluster.as_str());
        let fs = ols_fit_on(data, &spec, &rows, &opts.regress)?;
        let ratio = variance_ratio(data, tau, opts, &rows)?;
        let pi = fs.coef(&col)?;
        points.push(ReliabilityPoint {
            tau,
            label: TestSlot::from_lag(tau).expect("available lag").label(),
            pi,
            pi_prime: pi * ratio,
            se: fs.se(&col)? * ratio,
            variance_ratio: ratio,
            n_obs: fs.n_obs,
        });
    }
    Ok(ReliabilitySeries { points })
}

/// Least-squares polynomial in τ through the series, evaluated at
/// `options.target_tau`.
pub fn forecast_reliability(
    series: &ReliabilitySeries,
    degree: usize,
    options: &ForecastOptions,
) -> Result<ReliabilityForecast> {
    if degree == 0 {
        return Err(Error::InvalidConfig("forecast degree must be at least 1".into()));
    }
    let n = series.points.len();
    if n < degree + 2 {
        return Err(Error::DegreeTooHigh { degree, points: n });
    }
    let weights: Vec<f64> = series
        .points
        .iter()
        .map(|p| if options.weighted && p.se > 0.0 { 1.0 / (p.se * p.se) } else { 1.0 })
        .collect();
    let x = nalgebra::DMatrix::from_fn(n, degree + 1, |i, j| {
        weights[i].sqrt() * (series.points[i].tau as f64).powi(j as i32)
    });
    let y = nalgebra::DVector::from_fn(n, |i, _| weights[i].sqrt() * series.points[i].pi_prime);
    let ls = least_squares(&x, &y, RegressOptions::default().rank_tolerance)?;
    let coefficients: Vec<f64> = ls.coefficients.iter().copied().collect();
    let mut forecast = ReliabilityForecast {
        degree,
        target_tau: options.target_tau,
        lambda_hat: 0.0,
        fit_r2: 0.0,
        coefficients,
    };
    forecast.lambda_hat = forecast.evaluate(options.target_tau);
    let wsum: f64 = weights.iter().sum();
    let mean = series.points.iter().zip(&weights).map(|(p, w)| w * p.pi_prime).sum::<f64>() / wsum;
    let (mut ssr, mut tss) = (0.0, 0.0);
    for (p, w) in series.points.iter().zip(&weights) {
        ssr += w * (p.pi_prime - forecast.evaluate(p.tau as f64)).powi(2);
        tss += w * (p.pi_prime - mean).powi(2);
    }
    forecast.fit_r2 = if tss > 0.0 { (1.0 - ssr / tss).clamp(0.0, 1.0) } else { 1.0 };
    Ok(forecast)
}

/// EIV with the reliability ratio forecast from the test history and held
/// fixed for inference.
pub fn eiv_th_strategy(data: &PanelDataset, opts: &StrategyOptions) -> Result<StrategyEstimate> {
    let series = build_reliability_series(data, opts)?;
    let forecast = forecast_reliability(&series, opts.degree, &opts.forecast)?;
    eiv_th_with(data, opts, &forecast)
}

/// EIV-TH given an already computed forecast.
pub fn eiv_th_with(
    data: &PanelDataset,
    opts: &StrategyOptions,
    forecast: &ReliabilityForecast,
) -> Result<StrategyEstimate> {
    let lambda = forecast.lambda_hat;
    let cur = current();
    let rows = complete(data, &[&opts.outcome, &opts.ses, &cur])?;
    let system = StackedSystem::new(vec![
        (VariableSpec::new(opts.outcome.as_str(), &[&opts.ses, &cur], opts.cluster.as_str()), "medium".into()),
        (VariableSpec::new(cur.as_str(), &[&opts.ses], opts.cluster.as_str()), "balancing".into()),
    ]);
    let joint = stacked_fit_on(data, &system, &rows, &opts.regress)?;
    let ib = joint.index(&stacked_name("medium", &opts.ses))?;
    let ig = joint.index(&stacked_name("medium", &cur))?;
    let id = joint.index(&stacked_name("balancing", &opts.ses))?;
    let b = joint.coefficients.as_slice();
    let delta_m = b[id];
    let (beta, gamma) = eiv_correct(b[ib], b[ig], delta_m, lambda)?;
    let k = b.len();
    let shrink = (1.0 - lambda) / lambda;
    let beta_est = delta_method(
        &joint,
        |b| b[ib] - b[ig] * b[id] * shrink,
        |b| {
            let mut g = vec![0.0; k];
            g[ib] = 1.0;
            g[ig] = -b[id] * shrink;
            g[id] = -b[ig] * shrink;
            g
        },
    )?;
    let se_gamma = joint.covariance[(ig, ig)].max(0.0).sqrt() / lambda;
    Ok(StrategyEstimate {
        method: Method::EivTh,
        beta_hat: beta,
        gamma_hat: gamma,
        lambda_hat: Some(lambda),
        se_beta: beta_est.se,
        se_gamma,
        n_obs: rows.len(),
        n_clusters: joint.n_clusters,
        details: EstimateDetails {
            delta_m: Some(delta_m),
            forecast_r2: Some(forecast.fit_r2),
            degree: Some(forecast.degree),
            ..Default::default()
        },
    })
}

pub fn run_strategy(method: Method, data: &PanelDataset, opts: &StrategyOptions) -> Result<StrategyEstimate> {
    match method {
        Method::Ols => ols_strategy(data, opts),
        Method::Iv => iv_strategy(data, opts),
        Method::EivFs => eiv_fs_strategy(data, opts),
        Method::EivTh => eiv_th_strategy(data, opts),
    }
}

/// Writes `tau,pi_prime,se,fitted`, one row per point plus a final row at
/// the forecast target with only the fitted value.
pub fn write_reliability_csv<W: Write>(
    series: &ReliabilitySeries,
    forecast: Option<&ReliabilityForecast>,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["tau", "pi_prime", "se", "fitted"])?;
    for p in &series.points {
        let fitted = forecast.map(|f| f.evaluate(p.tau as f64).to_string()).unwrap_or_default();
        w.write_record([p.tau.to_string(), p.pi_prime.to_string(), p.se.to_string(), fitted])?;
    }
    if let Some(f) = forecast {
        w.write_record([f.target_tau.to_string(), String::new(), String::new(), f.lambda_hat.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `method,parameter,estimate,ci_low,ci_high` with 95% normal
/// intervals for β and γ of each estimate.
pub fn write_estimates_csv<W: Write>(estimates: &[StrategyEstimate], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "parameter", "estimate", "ci_low", "ci_high"])?;
    for e in estimates {
        for (name, value, se) in [("beta", e.beta_hat, e.se_beta), ("gamma", e.gamma_hat, e.se_gamma)] {
            w.write_record([
                e.method.tag().to_string(),
                name.to_string(),
                value.to_string(),
                (value - Z_95 * se).to_string(),
                (value + Z_95 * se).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{simulate_panel, DgpConfig, DriftLaw};

    fn series(points: &[(usize, f64)]) -> ReliabilitySeries {
        ReliabilitySeries {
            points: points
                .iter()
                .map(|&(tau, pi_prime)| ReliabilityPoint {
                    tau,
                    label: TestSlot::from_lag(tau).unwrap().label(),
                    pi: pi_prime,
                    pi_prime,
                    se: 0.01,
                    variance_ratio: 1.0,
                    n_obs: 100,
                })
                .collect(),
        }
    }

    #[test]
    fn adjusted_first_stage_examples() {
        assert!((adjusted_first_stage(0.887, 0.992, 1.0).unwrap() - 0.880).abs() < 0.0005);
        assert_eq!(adjusted_first_stage(0.7, 2.0, 2.0).unwrap(), 0.7);
        assert!(matches!(adjusted_first_stage(0.7, 0.0, 1.0), Err(Error::NonpositiveVariance { .. })));
    }

    #[test]
    fn eiv_correct_examples() {
        let (b, g) = eiv_correct(0.028, 0.381, 0.229, 0.880).unwrap();
        let b_oracle = 0.028 - 0.381 * 0.229 * (0.120 / 0.880);
        assert!((b - b_oracle).abs() < 1e-15);
        assert!((b - 0.016).abs() < 0.0005 && (g - 0.433).abs() < 0.0005);
        let (b, g) = eiv_correct(0.028, 0.381, 0.229, 0.899).unwrap();
        assert!((b - 0.018).abs() < 0.0005 && (g - 0.424).abs() < 0.0005);
        assert_eq!(eiv_correct(0.028, 0.381, 0.229, 1.0).unwrap(), (0.028, 0.381));
        assert!(matches!(eiv_correct(0.0, 0.0, 0.0, 1.2), Err(Error::LambdaOutOfRange(_))));
        assert!(matches!(eiv_correct(0.0, 0.0, 0.0, 0.0), Err(Error::LambdaOutOfRange(_))));
    }

    #[test]
    fn share_examples() {
        assert!((share_explained(0.028, 0.016).unwrap() - 42.857142857142854).abs() < 1e-12);
        assert_eq!(share_explained(0.028, 0.028).unwrap(), 0.0);
        let s = share_explained(0.028, 0.018).unwrap();
        assert!((s - 35.714285714285715).abs() < 1e-12);
        assert!(matches!(share_explained(0.0, 0.1), Err(Error::ZeroBaseline)));
    }

    #[test]
    fn forecast_through_collinear_points() {
        let s = series(&[(4, 0.80), (3, 0.82), (2, 0.84), (1, 0.86)]);
        let f = forecast_reliability(&s, 1, &ForecastOptions::default()).unwrap();
        assert!((f.lambda_hat - 0.88).abs() < 1e-10);
        assert!((f.fit_r2 - 1.0).abs() < 1e-12);
        assert!(matches!(forecast_reliability(&s, 3, &ForecastOptions::default()), Err(Error::DegreeTooHigh { .. })));
        assert!(forecast_reliability(&s, 0, &ForecastOptions::default()).is_err());
    }

    #[test]
    fn weighted_forecast_of_exact_line_is_exact() {
        let mut s = series(&[(5, 0.78), (4, 0.80), (3, 0.82), (2, 0.84), (1, 0.86)]);
        s.points[2].se = 0.5;
        let f = forecast_reliability(&s, 1, &ForecastOptions { target_tau: 0.0, weighted: true }).unwrap();
        assert!((f.lambda_hat - 0.88).abs() < 1e-10);
    }

    #[test]
    fn stacked_iv_system_reproduces_standalone_fits() {
        let mut c = DgpConfig::classical(5_000, 31);
        c.drift_law = DriftLaw::Noise { variance: 0.1 };
        let p = simulate_panel(&c).unwrap();
        let opts = StrategyOptions::default();
        let est = eiv_fs_strategy(&p.dataset, &opts).unwrap();
        let med = medium_regression(&p.dataset, &opts).unwrap();
        let bal = balancing_regression(&p.dataset, 0, &opts).unwrap();
        let iv = iv_strategy(&p.dataset, &opts).unwrap();
        let (b, g) = eiv_correct(
            med.coef(SES).unwrap(),
            med.coef(&score_column(0)).unwrap(),
            bal.coef(SES).unwrap(),
            iv.details.pi_prime.unwrap(),
        )
        .unwrap();
        assert!((est.beta_hat - b).abs() < 1e-10);
        assert!((est.gamma_hat - g).abs() < 1e-10);
        assert!(est.se_beta > 0.0 && est.se_gamma > 0.0);
    }

    #[test]
    fn two_lags_are_too_few() {
        let mut c = DgpConfig::classical(500, 1);
        c.periods = 3;
        let p = simulate_panel(&c).unwrap();
        let err = eiv_th_strategy(&p.dataset, &StrategyOptions::default()).unwrap_err();
        assert!(matches!(err, Error::TooFewLags { found: 2, needed: 3 }));
    }

    #[test]
    fn series_orders_oldest_first_and_handles_common_sample() {
        let mut c = DgpConfig::classical(2_000, 4);
        c.periods = 5;
        let p = simulate_panel(&c).unwrap();
        let mut opts = StrategyOptions::default();
        let s = build_reliability_series(&p.dataset, &opts).unwrap();
        let taus: Vec<usize> = s.points.iter().map(|p| p.tau).collect();
        assert_eq!(taus, vec![4, 3, 2, 1]);
        assert_eq!(s.points.last().unwrap().label, "g5_mid");
        opts.sample_mode = SampleMode::Common;
        let common = build_reliability_series(&p.dataset, &opts).unwrap();
        // no missing data: both modes coincide
        assert_eq!(common, s);
    }

    #[test]
    fn ols_estimate_serializes_without_lambda() {
        let p = simulate_panel(&DgpConfig::classical(500, 2)).unwrap();
        let est = ols_strategy(&p.dataset, &StrategyOptions::default()).unwrap();
        let json = serde_json::to_value(&est).unwrap();
        assert!(json.get("lambda_hat").is_none());
        assert_eq!(json["method"], "OLS");
    }

    #[test]
    fn figure_csvs() {
        let s = series(&[(3, 0.82), (2, 0.84), (1, 0.86)]);
        let f = forecast_reliability(&s, 1, &ForecastOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_reliability_csv(&s, Some(&f), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("tau,pi_prime,se,fitted\n3,0.82,0.01,"));
        assert_eq!(text.lines().count(), 5);
        let est = StrategyEstimate {
            method: Method::EivFs,
            beta_hat: 0.016,
            gamma_hat: 0.433,
            lambda_hat: Some(0.88),
            se_beta: 0.001,
            se_gamma: 0.01,
            n_obs: 10,
            n_clusters: 2,
            details: EstimateDetails::default(),
        };
        let mut buf = Vec::new();
        write_estimates_csv(&[est], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let line = text.lines().nth(1).unwrap();
        assert!(line.starts_with("EIV_FS,beta,0.016,"));
    }
}
