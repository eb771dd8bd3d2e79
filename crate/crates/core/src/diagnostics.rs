//! Checks on how test scores change between periods.
//!
//! If score gains are unrelated to observables, the lagged score is a valid
//! instrument. These regressions of score changes on characteristics, and the
//! variance equalities that hold when gains are independent of later ability,
//! flag departures. They annotate reports; they never block estimation.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{score_column, PanelDataset, SCHOOL_ID, SES};
use crate::error::{Error, Result};
use crate::regress::{ols, RegressOptions};
use crate::simulate::SyntheticPanel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticOptions {
    pub ses: String,
    pub cluster: String,
    /// Two-sided level below which a characteristic is flagged.
    pub significance: f64,
    /// Lag used for the score change in [`delta_regressions`].
    pub lag: usize,
    pub regress: RegressOptions,
}

impl Default for DiagnosticOptions {
    fn default() -> Self {
        Self {
            ses: SES.into(),
            cluster: SCHOOL_ID.into(),
            significance: 0.01,
            lag: 1,
            regress: RegressOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Pass,
    Warn,
}

/// Score change regressed on one characteristic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicCheck {
    pub name: String,
    /// `Cov(Δs^m, x) / Var(x)`.
    pub alpha: f64,
    pub se: f64,
    pub p_value: f64,
    pub flag: Flag,
    /// Slope of the current score on `x`.
    pub level_coefficient: f64,
    /// `100 · (1 − alpha / level_coefficient)`; absent when the level slope is 0.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reduction_pct: Option<f64>,
    pub n_obs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub tau: usize,
    pub alpha_ses: f64,
    pub se: f64,
    pub n_obs: usize,
}

/// Variance equalities on latent ability; both residuals vanish when the
/// latest drift is uncorrelated with current ability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceCheck {
    /// `Cov(Δ, s_{t-1}) + Var(Δ)`.
    pub r1: f64,
    /// `Var(s_{t-1}) − Var(s_t) − Var(Δ)`.
    pub r2: f64,
    pub sigma2_drift: f64,
    /// `4 / √N`.
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub significance: f64,
    pub lag: usize,
    pub characteristics: Vec<CharacteristicCheck>,
    pub path: Vec<PathPoint>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub variance_check: Option<VarianceCheck>,
}

impl DiagnosticReport {
    pub fn all_pass(&self) -> bool {
        self.characteristics.iter().all(|c| c.flag == Flag::Pass)
            && self.variance_check.is_none_or(|v| v.pass)
    }
}

fn two_sided_p(t: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    2.0 * (1.0 - Normal::standard().cdf(t.abs()))
}

struct Slope {
    coef: f64,
    se: f64,
    n_obs: usize,
}

fn slope(data: &PanelDataset, y: &[&str], sign: &[f64], x: &str, opts: &DiagnosticOptions) -> Result<Slope> {
    let mut names: Vec<&str> = y.to_vec();
    names.push(x);
    let rows = data.complete_rows(&names)?;
    let ycols = y.iter().map(|n| data.column(n)).collect::<Result<Vec<_>>>()?;
    let xcol = data.column(x)?;
    let (ids, _) = data.cluster_ids(&opts.cluster)?;
    let yv: Vec<f64> = rows
        .iter()
        .map(|&i| ycols.iter().zip(sign).map(|(c, s)| s * c[i].unwrap_or_default()).sum())
        .collect();
    let xv: Vec<f64> = rows.iter().map(|&i| xcol[i].unwrap_or_default()).collect();
    let cl: Vec<usize> = rows.iter().map(|&i| ids[i]).collect();
    let fit = ols(&yv, &[(x, &xv)], &cl, &opts.regress)?;
    Ok(Slope { coef: fit.coef(x)?, se: fit.se(x)?, n_obs: fit.n_obs })
}

/// Regresses `s^m_t − s^m_{t−lag}` on each characteristic separately.
pub fn delta_regressions(
    data: &PanelDataset,
    characteristics: &[String],
    opts: &DiagnosticOptions,
) -> Result<Vec<CharacteristicCheck>> {
    let cur = score_column(0);
    let lag = score_column(opts.lag);
    data.column(&lag)?;
    characteristics
        .iter()
        .map(|name| {
            let change = slope(data, &[&cur, &lag], &[1.0, -1.0], name, opts)?;
            let level = slope(data, &[&cur], &[1.0], name, opts)?;
            let p_value = two_sided_p(change.coef / change.se);
            Ok(CharacteristicCheck {
                name: name.clone(),
                alpha: change.coef,
                se: change.se,
                p_value,
                flag: if p_value < opts.significance { Flag::Warn } else { Flag::Pass },
                level_coefficient: level.coef,
                reduction_pct: (level.coef != 0.0).then(|| 100.0 * (1.0 - change.coef / level.coef)),
                n_obs: change.n_obs,
            })
        })
        .collect()
}

/// SES slope of `s^m_t − s^m_{t−τ}` for every available lag, nearest first.
pub fn delta_path(data: &PanelDataset, opts: &DiagnosticOptions) -> Result<Vec<PathPoint>> {
    let lags = data.available_lags();
    if lags.is_empty() {
        return Err(Error::TooFewLags { found: 0, needed: 1 });
    }
    let cur = score_column(0);
    lags.iter()
        .map(|&tau| {
            let lag = score_column(tau);
            let s = slope(data, &[&cur, &lag], &[1.0, -1.0], &opts.ses, opts)?;
            Ok(PathPoint { tau, alpha_ses: s.coef, se: s.se, n_obs: s.n_obs })
        })
        .collect()
}

fn moments(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n
}

/// Evaluates the two variance equalities on the hidden ability columns.
pub fn variance_implication_check(panel: &SyntheticPanel) -> Result<VarianceCheck> {
    let truth = panel.truth.as_ref().ok_or(Error::NoTruthColumns)?;
    let (s_t, s_lag, drift) = (&truth.ability[0], &truth.ability[1], &truth.drift[0]);
    let var_drift = moments(drift, drift);
    let r1 = moments(drift, s_lag) + var_drift;
    let r2 = moments(s_lag, s_lag) - moments(s_t, s_t) - var_drift;
    let tolerance = 4.0 / (s_t.len() as f64).sqrt();
    Ok(VarianceCheck {
        r1,
        r2,
        sigma2_drift: var_drift,
        tolerance,
        pass: r1.abs() < tolerance && r2.abs() < tolerance,
    })
}

/// Full report: characteristic checks, the SES path and, for synthetic
/// panels, the variance equalities.
pub fn diagnose(
    data: &PanelDataset,
    characteristics: &[String],
    truth: Option<&SyntheticPanel>,
    opts: &DiagnosticOptions,
) -> Result<DiagnosticReport> {
    Ok(DiagnosticReport {
        significance: opts.significance,
        lag: opts.lag,
        characteristics: delta_regressions(data, characteristics, opts)?,
        path: delta_path(data, opts)?,
        variance_check: truth.map(variance_implication_check).transpose()?,
    })
}

/// Writes `tau,alpha_ses,se`.
pub fn write_path_csv<W: Write>(path: &[PathPoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["tau", "alpha_ses", "se"])?;
    for p in path {
        w.write_record([p.tau.to_string(), p.alpha_ses.to_string(), p.se.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
