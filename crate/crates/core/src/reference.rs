//! Arithmetic replication of published estimates.
//!
//! The individual-level data behind the published table are not public, so
//! this recomputes every number that follows from the reported coefficients
//! alone (IV ratio, reliability, EIV corrections, shares) and compares each
//! with its published value under rounding tolerances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strategies::{adjusted_first_stage, eiv_correct, share_explained};

/// The embedded constants file.
pub const EMBEDDED_CONSTANTS: &str = include_str!("../data/reference_constants.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediumConstants {
    pub beta_m: f64,
    pub gamma_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancingConstants {
    pub delta_m: f64,
    pub variance_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStageConstants {
    pub pi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedFormConstants {
    pub theta1: f64,
    pub theta1_rescaled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConstants {
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityConstants {
    pub first_stage: f64,
    pub forecast: f64,
    pub forecast_r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareConstants {
    pub iv: f64,
    pub eiv_low: f64,
    pub eiv_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticConstants {
    pub alpha_ses: f64,
    pub reduction_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Absolute tolerance on three-decimal coefficients.
    pub coefficient: f64,
    /// Percentage points on shares of the gap.
    pub share_pp: f64,
    /// Absolute tolerance on two-decimal percentages.
    pub percent: f64,
}

/// Versioned published values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConstants {
    pub version: u32,
    #[serde(default)]
    pub note: String,
    pub medium_regression: MediumConstants,
    pub balancing_regression: BalancingConstants,
    pub first_stage: FirstStageConstants,
    pub reduced_form: ReducedFormConstants,
    pub iv: PairConstants,
    pub reliability: ReliabilityConstants,
    pub eiv_fs: PairConstants,
    pub eiv_th: PairConstants,
    pub shares: ShareConstants,
    pub diagnostics: DiagnosticConstants,
    pub tolerances: Tolerances,
}

impl ReferenceConstants {
    pub fn embedded() -> Self {
        Self::from_json(EMBEDDED_CONSTANTS).expect("embedded constants parse")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("constants file: {e}")))
    }
}

/// One recomputed quantity against its published counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCheck {
    pub name: String,
    pub computed: f64,
    /// Published value, or the `[low, high]` published range.
    pub expected: Expected,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Expected {
    Value(f64),
    Range([f64; 2]),
}

impl Expected {
    fn admits(self, x: f64, tol: f64) -> bool {
        // tiny slack absorbs binary representation of decimal constants
        let eps = 1e-12;
        match self {
            Expected::Value(v) => (x - v).abs() <= tol + eps,
            Expected::Range([lo, hi]) => x >= lo - tol - eps && x <= hi + tol + eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReport {
    pub constants_version: u32,
    pub checks: Vec<ReferenceCheck>,
}

impl ReferenceReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&ReferenceCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn check(name: &str, computed: f64, expected: Expected, tolerance: f64) -> ReferenceCheck {
    ReferenceCheck { name: name.into(), computed, expected, tolerance, pass: expected.admits(computed, tolerance) }
}

/// Recomputes every derivable published number.
pub fn reference_check(c: &ReferenceConstants) -> Result<ReferenceReport> {
    let tol = c.tolerances.coefficient;
    let share_tol = c.tolerances.share_pp;
    let (beta_m, gamma_m) = (c.medium_regression.beta_m, c.medium_regression.gamma_m);
    let delta_m = c.balancing_regression.delta_m;
    let ratio = c.balancing_regression.variance_ratio;
    let pi = c.first_stage.pi;
    let theta1 = c.reduced_form.theta1;
    let eiv_range = Expected::Range([c.shares.eiv_low, c.shares.eiv_high]);

    let gamma_iv = theta1 / pi;
    let lambda_fs = adjusted_first_stage(pi, ratio, 1.0)?;
    let (beta_fs, gamma_fs) = eiv_correct(beta_m, gamma_m, delta_m, lambda_fs)?;
    let (beta_th, gamma_th) = eiv_correct(beta_m, gamma_m, delta_m, c.reliability.forecast)?;
    let reduction = 100.0 * (1.0 - c.diagnostics.alpha_ses / delta_m);

    let checks = vec![
        check("gamma_iv = theta1 / pi", gamma_iv, Expected::Value(c.iv.gamma), tol),
        check("lambda_fs = pi * variance_ratio", lambda_fs, Expected::Value(c.reliability.first_stage), tol),
        check("beta_eiv_fs", beta_fs, Expected::Value(c.eiv_fs.beta), tol),
        check("gamma_eiv_fs", gamma_fs, Expected::Value(c.eiv_fs.gamma), tol),
        check("beta_eiv_th", beta_th, Expected::Value(c.eiv_th.beta), tol),
        check("gamma_eiv_th", gamma_th, Expected::Value(c.eiv_th.gamma), tol),
        check("theta1 * variance_ratio", theta1 * ratio, Expected::Value(c.reduced_form.theta1_rescaled), tol),
        check("share_iv", share_explained(beta_m, c.iv.beta)?, Expected::Value(c.shares.iv), share_tol),
        check("share_eiv_fs", share_explained(beta_m, beta_fs)?, eiv_range, share_tol),
        check("share_eiv_th", share_explained(beta_m, beta_th)?, eiv_range, share_tol),
        check("delta_change_reduction_pct", reduction, Expected::Value(c.diagnostics.reduction_pct), c.tolerances.percent),
    ];
    Ok(ReferenceReport { constants_version: c.version, checks })
}
