//! Gaussian data-generating process for synthetic test-score panels.
//!
//! Ability is built backward from the current test: `s_t = δ·SES + u_t`, and
//! each earlier period subtracts one drift step
//! `Δ = c + a·SES + b·u + η`. Every test reports a shrunken score
//! `(1 - λ̃)·mean(signal) + λ̃·signal` of an unbiased noisy signal. Because all
//! draws are Gaussian, every moment the estimators converge to has a closed
//! form, returned by [`dgp_moments`].

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    format_cell, Column, Domain, ModelScaleParts, PanelDataset, RawTable, TestSlot, COHORT, OUTCOME, SCHOOL_ID,
    SES_RAW, STUDENT_ID,
};
use crate::error::{Error, Result};

/// One backward drift step `Δ = shift + ses_loading·SES + ability_loading·u + η`
/// with `η ~ N(0, noise_variance)` independent of everything else.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DriftStep {
    #[serde(default)]
    pub shift: f64,
    #[serde(default)]
    pub ses_loading: f64,
    #[serde(default)]
    pub ability_loading: f64,
    #[serde(default)]
    pub noise_variance: f64,
}

/// How ability changes between consecutive tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftLaw {
    /// Everyone gains the same amount.
    Constant { shift: f64 },
    /// Gains load on SES.
    SesLinked { loading: f64 },
    /// Gains load on the ability residual of the later period.
    AbilityLinked { loading: f64 },
    /// Gains are independent Gaussian noise.
    Noise { variance: f64 },
    Composite {
        #[serde(default)]
        shift: f64,
        #[serde(default)]
        ses_loading: f64,
        #[serde(default)]
        ability_loading: f64,
        #[serde(default)]
        noise_variance: f64,
    },
    /// One step per lag; `steps[0]` links the current test to the previous one.
    Schedule { steps: Vec<DriftStep> },
}

impl DriftLaw {
    /// Ability-linked schedule whose lag persistence `Cov[u_t, u_{t-τ}]/σ²_u`
    /// equals `1 - slope·τ` for `τ = 1..=steps`.
    pub fn linear_persistence_decay(slope: f64, steps: usize) -> Self {
        let steps = (1..=steps)
            .map(|j| {
                let j = j as f64;
                DriftStep {
                    ability_loading: 1.0 - (1.0 - slope * j) / (1.0 - slope * (j - 1.0)),
                    ..Default::default()
                }
            })
            .collect();
        DriftLaw::Schedule { steps }
    }

    /// Per-step parameters for `n` steps.
    pub fn steps(&self, n: usize) -> Result<Vec<DriftStep>> {
        let step = match *self {
            DriftLaw::Constant { shift } => DriftStep { shift, ..Default::default() },
            DriftLaw::SesLinked { loading } => DriftStep { ses_loading: loading, ..Default::default() },
            DriftLaw::AbilityLinked { loading } => DriftStep { ability_loading: loading, ..Default::default() },
            DriftLaw::Noise { variance } => DriftStep { noise_variance: variance, ..Default::default() },
            DriftLaw::Composite { shift, ses_loading, ability_loading, noise_variance } => {
                DriftStep { shift, ses_loading, ability_loading, noise_variance }
            }
            DriftLaw::Schedule { ref steps } => {
                if steps.len() != n {
                    return Err(Error::InvalidConfig(format!(
                        "drift schedule has {} steps, expected periods - 1 = {n}",
                        steps.len()
                    )));
                }
                return Ok(steps.clone());
            }
        };
        Ok(vec![step; n])
    }
}

/// How the binary outcome is produced from the linear index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OutcomeModel {
    /// `y` is the continuous index itself.
    Linear,
    /// `y ~ Bernoulli(clamp(intercept + index, 0, 1))`.
    LinearProbability { intercept: f64 },
}

impl Default for OutcomeModel {
    fn default() -> Self {
        OutcomeModel::LinearProbability { intercept: 0.5 }
    }
}

fn one() -> usize {
    1
}

/// True parameters of a synthetic population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub lambda_tilde: f64,
    pub sigma2_u: f64,
    /// Per period, index 0 = current test; a single value applies to all.
    pub sigma2_m: Vec<f64>,
    #[serde(default)]
    pub sigma2_e: f64,
    pub n_students: usize,
    pub n_clusters: usize,
    pub periods: usize,
    pub drift_law: DriftLaw,
    #[serde(default)]
    pub teacher_drift_weight: f64,
    /// Variance of a school-level shock added to the outcome noise.
    #[serde(default)]
    pub cluster_effect_var: f64,
    #[serde(default)]
    pub outcome_model: OutcomeModel,
    #[serde(default = "one")]
    pub n_cohorts: usize,
    pub seed: u64,
}

impl DgpConfig {
    /// A classical single-lag configuration with unit-variance noise-free
    /// drift; handy as a starting point.
    pub fn classical(n_students: usize, seed: u64) -> Self {
        Self {
            beta: 0.01,
            gamma: 0.4,
            delta: 0.25,
            lambda_tilde: 1.0,
            sigma2_u: 0.88,
            sigma2_m: vec![0.12],
            sigma2_e: 1.0,
            n_students,
            n_clusters: (n_students / 2).clamp(2, 200),
            periods: 2,
            drift_law: DriftLaw::Constant { shift: 0.0 },
            teacher_drift_weight: 0.0,
            cluster_effect_var: 0.0,
            outcome_model: OutcomeModel::Linear,
            n_cohorts: 1,
            seed,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let finite = [
            self.beta,
            self.gamma,
            self.delta,
            self.lambda_tilde,
            self.sigma2_u,
            self.sigma2_e,
            self.teacher_drift_weight,
            self.cluster_effect_var,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("parameters must be finite".into());
        }
        if !(self.lambda_tilde > 0.0 && self.lambda_tilde <= 1.0) {
            return bad(format!("lambda_tilde = {} must lie in (0, 1]", self.lambda_tilde));
        }
        if self.sigma2_u <= 0.0 {
            return bad("sigma2_u must be positive".into());
        }
        if self.sigma2_e < 0.0 || self.cluster_effect_var < 0.0 {
            return bad("sigma2_e and cluster_effect_var must be nonnegative".into());
        }
        if !(2..=TestSlot::MAX_LAG + 1).contains(&self.periods) {
            return bad(format!("periods = {} must lie in 2..=8", self.periods));
        }
        if self.sigma2_m.len() != 1 && self.sigma2_m.len() != self.periods {
            return bad(format!("sigma2_m needs 1 or {} entries, found {}", self.periods, self.sigma2_m.len()));
        }
        if self.sigma2_m.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("sigma2_m entries must be nonnegative".into());
        }
        if self.n_clusters < 2 || self.n_clusters > self.n_students {
            return bad(format!("n_clusters = {} must lie in 2..=n_students", self.n_clusters));
        }
        if self.n_cohorts == 0 || self.n_students < 2 * self.n_cohorts {
            return bad("every cohort needs at least two students".into());
        }
        if self.n_students < 10 {
            return bad("n_students must be at least 10".into());
        }
        for s in self.drift_law.steps(self.periods - 1)? {
            let vals = [s.shift, s.ses_loading, s.ability_loading, s.noise_variance];
            if vals.iter().any(|v| !v.is_finite()) || s.noise_variance < 0.0 {
                return bad("drift parameters must be finite with nonnegative noise variance".into());
            }
        }
        Ok(())
    }

    /// Measurement-error variance `lag` periods back.
    pub fn sigma2_m_at(&self, lag: usize) -> f64 {
        if self.sigma2_m.len() == 1 {
            self.sigma2_m[0]
        } else {
            self.sigma2_m[lag]
        }
    }

    /// Reliability of the current test after partialling SES.
    pub fn lambda(&self) -> f64 {
        self.sigma2_u / (self.sigma2_u + self.sigma2_m_at(0))
    }
}

/// `(1 - λ̃)·mean + λ̃·signal`.
pub fn kelley_score(signal: f64, population_mean: f64, lambda_tilde: f64) -> f64 {
    (1.0 - lambda_tilde) * population_mean + lambda_tilde * signal
}

/// Population moments at one lag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagMoments {
    pub tau: usize,
    /// SES loading of ability at this lag.
    pub delta: f64,
    /// `Var[u_{t-τ}]`.
    pub var_u: f64,
    /// `Cov[u_t, u_{t-τ}]`.
    pub cov_u_current: f64,
    pub sigma2_m: f64,
    /// `Cov[y_t, u_{t-τ}]`.
    pub cov_y_u: f64,
    /// `Cov[u_t, u_{t-τ}] / σ²_u`.
    pub b_pi: f64,
}

/// Closed-form population moments of a [`DgpConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpMoments {
    pub lambda: f64,
    pub lambda_tilde: f64,
    pub delta_m: f64,
    /// `Var[s^m_t]`.
    pub var_score_current: f64,
    /// `Var[Δ_t]` for the step into the current test.
    pub sigma2_drift: f64,
    /// `Var[u_{t-1}]`.
    pub var_u_lag1: f64,
    /// `Cov[e_t, Δ_t]`.
    pub cov_e_drift: f64,
    /// `Cov[y_t, u_t]`.
    pub cov_y_u_current: f64,
    /// `1 - Cov[e_t, Δ_t] / Cov[y_t, u_t]`; absent when `γ = 0`.
    pub b_gamma: Option<f64>,
    /// `τ = 1..periods-1`.
    pub lags: Vec<LagMoments>,
}

impl DgpMoments {
    pub fn lag(&self, tau: usize) -> Option<&LagMoments> {
        self.lags.iter().find(|l| l.tau == tau)
    }
}

/// Analytic moments of the generating process.
///
/// Every drift law here is linear-Gaussian, so all moments are available in
/// closed form; [`Error::UnsupportedDriftLaw`] only signals a degenerate
/// history where the current residual is uncorrelated with the previous one.
pub fn dgp_moments(config: &DgpConfig) -> Result<DgpMoments> {
    config.validate()?;
    let steps = config.drift_law.steps(config.periods - 1)?;
    let s2u = config.sigma2_u;
    let w = config.teacher_drift_weight;
    let eta1 = steps[0].noise_variance;

    let mut lags = Vec::with_capacity(steps.len());
    let (mut delta_k, mut v, mut rho, mut c) = (config.delta, s2u, s2u, 0.0);
    for (j, step) in steps.iter().enumerate() {
        let keep = 1.0 - step.ability_loading;
        delta_k -= step.ses_loading;
        v = keep * keep * v + step.noise_variance;
        rho *= keep;
        c = keep * c - if j == 0 { step.noise_variance } else { 0.0 };
        let tau = j + 1;
        lags.push(LagMoments {
            tau,
            delta: delta_k,
            var_u: v,
            cov_u_current: rho,
            sigma2_m: config.sigma2_m_at(tau),
            cov_y_u: config.gamma * rho + w * c,
            b_pi: rho / s2u,
        });
    }
    if lags[0].cov_u_current == 0.0 {
        return Err(Error::UnsupportedDriftLaw(
            "current ability residual is uncorrelated with the previous period".into(),
        ));
    }
    let s = steps[0];
    let cov_y_u_current = config.gamma * s2u;
    let cov_e_drift = w * eta1;
    let lt = config.lambda_tilde;
    Ok(DgpMoments {
        lambda: config.lambda(),
        lambda_tilde: lt,
        delta_m: config.delta * lt,
        var_score_current: lt * lt * (config.delta.powi(2) + s2u + config.sigma2_m_at(0)),
        sigma2_drift: s.ses_loading.powi(2) + s.ability_loading.powi(2) * s2u + s.noise_variance,
        var_u_lag1: lags[0].var_u,
        cov_e_drift,
        cov_y_u_current,
        b_gamma: (cov_y_u_current != 0.0).then(|| 1.0 - cov_e_drift / cov_y_u_current),
        lags,
    })
}

/// Hidden columns of a synthetic panel, all indexed `[lag][student]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTruth {
    pub ability: Vec<Vec<f64>>,
    pub signal: Vec<Vec<f64>>,
    pub error: Vec<Vec<f64>>,
    pub residual: Vec<Vec<f64>>,
    /// `drift[k] = ability[k] - ability[k + 1]`.
    pub drift: Vec<Vec<f64>>,
    /// Kelley score minus ability (the reported score's error).
    pub score_error: Vec<Vec<f64>>,
}

/// A generated panel with its hidden truth.
#[derive(Debug, Clone)]
pub struct SyntheticPanel {
    pub config: DgpConfig,
    pub dataset: PanelDataset,
    pub truth: Option<LatentTruth>,
}

pub const RAW_SES_MEAN: f64 = 6.439;
pub const RAW_SES_SD: f64 = 3.772;
pub const RAW_SCORE_SD: f64 = 27.0;
pub const RAW_READING_MEAN: f64 = 190.0;
pub const RAW_MATH_MEAN: f64 = 250.0;

/// Draws a panel. Deterministic in `config` (including its seed).
pub fn simulate_panel(config: &DgpConfig) -> Result<SyntheticPanel> {
    config.validate()?;
    let n = config.n_students;
    let periods = config.periods;
    let steps = config.drift_law.steps(periods - 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut z = move || -> f64 { rng.sample(StandardNormal) };

    let cluster_sd = config.cluster_effect_var.sqrt();
    let cluster_effect: Vec<f64> = (0..config.n_clusters).map(|_| cluster_sd * z()).collect();

    let mut ses = vec![0.0; n];
    let mut ability = vec![vec![0.0; n]; periods];
    let mut residual = vec![vec![0.0; n]; periods];
    let mut signal = vec![vec![0.0; n]; periods];
    let mut error = vec![vec![0.0; n]; periods];
    let mut drift = vec![vec![0.0; n]; periods - 1];
    let mut index = vec![0.0; n];
    let mut female = vec![None; n];
    let mut age = vec![None; n];
    let mut uniform = vec![0.0; n];
    let m_sd: Vec<f64> = (0..periods).map(|k| config.sigma2_m_at(k).sqrt()).collect();
    let u_sd = config.sigma2_u.sqrt();
    let e_sd = config.sigma2_e.sqrt();

    for i in 0..n {
        let x = z();
        ses[i] = x;
        let mut u = u_sd * z();
        let mut s = config.delta * x + u;
        residual[0][i] = u;
        ability[0][i] = s;
        let mut eta_current = 0.0;
        for (k, step) in steps.iter().enumerate() {
            let eta = step.noise_variance.sqrt() * z();
            if k == 0 {
                eta_current = eta;
            }
            let d = step.shift + step.ses_loading * x + step.ability_loading * u + eta;
            drift[k][i] = d;
            u = (1.0 - step.ability_loading) * u - eta;
            s -= d;
            residual[k + 1][i] = u;
            ability[k + 1][i] = s;
        }
        for k in 0..periods {
            let m = m_sd[k] * z();
            error[k][i] = m;
            signal[k][i] = ability[k][i] + m;
        }
        let e = config.teacher_drift_weight * eta_current + e_sd * z() + cluster_effect[i % config.n_clusters];
        index[i] = config.beta * x + config.gamma * ability[0][i] + e;
        female[i] = Some(if z() > 0.0 { 1.0 } else { 0.0 });
        age[i] = Some(11.6 + 0.65 * z());
        uniform[i] = rand_unit(z());
    }

    let outcome: Vec<f64> = match config.outcome_model {
        OutcomeModel::Linear => index,
        OutcomeModel::LinearProbability { intercept } => index
            .iter()
            .zip(&uniform)
            .map(|(p, u)| if *u < (intercept + p).clamp(0.0, 1.0) { 1.0 } else { 0.0 })
            .collect(),
    };

    let lt = config.lambda_tilde;
    let mut scores: Vec<Column> = Vec::with_capacity(periods);
    let mut score_error = Vec::with_capacity(periods);
    for k in 0..periods {
        let mean = signal[k].iter().sum::<f64>() / n as f64;
        let sm: Vec<f64> = signal[k].iter().map(|&v| kelley_score(v, mean, lt)).collect();
        score_error.push(sm.iter().zip(&ability[k]).map(|(a, b)| a - b).collect());
        scores.push(sm.into_iter().map(Some).collect());
    }

    let parts = ModelScaleParts {
        student_id: (0..n).map(|i| format!("s{i:07}")).collect(),
        school_id: (0..n).map(|i| format!("sch{:04}", i % config.n_clusters)).collect(),
        cohort: (0..n).map(|i| format!("{}", 2010 + i % config.n_cohorts)).collect(),
        ses_raw: ses.iter().map(|x| RAW_SES_MEAN + RAW_SES_SD * x).collect(),
        ses,
        outcome,
        scores,
        characteristics: vec![("female".into(), female), ("age".into(), age)],
    };
    Ok(SyntheticPanel {
        config: config.clone(),
        dataset: PanelDataset::from_model_scale(parts)?,
        truth: Some(LatentTruth { ability, signal, error, residual, drift, score_error }),
    })
}

// Probability-integral transform keeps a single Gaussian stream.
fn rand_unit(x: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().cdf(x)
}

impl SyntheticPanel {
    /// Panel in the ingestion schema, with scores mapped to raw test scales.
    pub fn to_raw_table(&self) -> Result<RawTable> {
        let d = &self.dataset;
        let mut headers = vec![
            STUDENT_ID.to_string(),
            SCHOOL_ID.to_string(),
            COHORT.to_string(),
            SES_RAW.to_string(),
            OUTCOME.to_string(),
        ];
        let slots: Vec<TestSlot> = TestSlot::ALL.to_vec();
        for domain in Domain::ALL {
            for slot in &slots {
                headers.push(slot.score_header(domain));
            }
        }
        headers.extend(d.characteristics().iter().cloned());

        let ses_raw = d.column(SES_RAW)?;
        let outcome = d.column(OUTCOME)?;
        let mut score_cols = Vec::new();
        for domain in Domain::ALL {
            let (mean, sd) = match domain {
                Domain::Reading => (RAW_READING_MEAN, RAW_SCORE_SD),
                Domain::Math => (RAW_MATH_MEAN, RAW_SCORE_SD),
            };
            for slot in &slots {
                let col = d.column(&slot.score_header(domain))?;
                score_cols.push(col.iter().map(|v| v.map(|x| mean + sd * x)).collect::<Column>());
            }
        }
        let chars = d
            .characteristics()
            .iter()
            .map(|c| d.column(c))
            .collect::<Result<Vec<_>>>()?;
        let rows = (0..d.n_rows())
            .map(|i| {
                let mut row = vec![
                    d.student_ids()[i].clone(),
                    d.school_ids()[i].clone(),
                    d.cohorts()[i].clone(),
                    format_cell(ses_raw[i]),
                    format_cell(outcome[i]),
                ];
                row.extend(score_cols.iter().map(|c| format_cell(c[i])));
                row.extend(chars.iter().map(|c| format_cell(c[i])));
                row
            })
            .collect();
        Ok(RawTable { headers, rows })
    }

    /// Hidden columns, one row per student.
    pub fn truth_table(&self) -> Result<RawTable> {
        let truth = self.truth.as_ref().ok_or(Error::NoTruthColumns)?;
        let periods = truth.ability.len();
        let mut headers = vec![STUDENT_ID.to_string()];
        let label = |k: usize| TestSlot::from_lag(k).expect("lag in range").label();
        for k in 0..periods {
            for prefix in ["ability", "signal", "error", "residual", "score_error"] {
                headers.push(format!("{prefix}_{}", label(k)));
            }
        }
        for k in 0..periods - 1 {
            headers.push(format!("drift_{}", label(k)));
        }
        let rows = (0..self.dataset.n_rows())
            .map(|i| {
                let mut row = vec![self.dataset.student_ids()[i].clone()];
                for k in 0..periods {
                    for col in [&truth.ability, &truth.signal, &truth.error, &truth.residual, &truth.score_error] {
                        row.push(format_cell(Some(col[k][i])));
                    }
                }
                for k in 0..periods - 1 {
                    row.push(format_cell(Some(truth.drift[k][i])));
                }
                row
            })
            .collect();
        Ok(RawTable { headers, rows })
    }

    /// Writes the panel CSV and a `<stem>_truth.csv` sidecar next to it.
    /// Returns both paths.
    pub fn export(&self, path: &Path) -> Result<(PathBuf, PathBuf)> {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "panel".into());
        let truth_path = path.with_file_name(format!("{stem}_truth.csv"));
        write_table(&self.to_raw_table()?, path)?;
        write_table(&self.truth_table()?, &truth_path)?;
        Ok((path.to_path_buf(), truth_path))
    }
}

fn write_table(table: &RawTable, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    table.write_csv(&mut file)?;
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{score_column, validate_dataset, SES};
    use crate::regress::{ols_fit, RegressOptions};
    use crate::data::VariableSpec;

    fn var(x: &[f64]) -> f64 {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
    }

    fn cov(x: &[f64], y: &[f64]) -> f64 {
        let mx = x.iter().sum::<f64>() / x.len() as f64;
        let my = y.iter().sum::<f64>() / y.len() as f64;
        x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.len() as f64
    }

    #[test]
    fn kelley_examples() {
        assert_eq!(kelley_score(2.5, 0.0, 1.0), 2.5);
        assert_eq!(kelley_score(2.5, 0.3, 0.0), 0.3);
        assert!((kelley_score(1.0, 0.0, 0.88) - 0.88).abs() < 1e-15);
    }

    #[test]
    fn lambda_definition() {
        let mut c = DgpConfig::classical(100, 1);
        assert!((c.lambda() - 0.88).abs() < 1e-15);
        c.sigma2_m = vec![0.88];
        assert_eq!(c.lambda(), 0.5);
    }

    #[test]
    fn noise_drift_lag_variance() {
        let mut c = DgpConfig::classical(100, 1);
        c.sigma2_u = 0.9;
        c.drift_law = DriftLaw::Noise { variance: 0.1 };
        let m = dgp_moments(&c).unwrap();
        assert!((m.var_u_lag1 - 1.0).abs() < 1e-15);
        assert!((m.sigma2_drift - 0.1).abs() < 1e-15);
    }

    #[test]
    fn linear_persistence_schedule() {
        let mut c = DgpConfig::classical(100, 1);
        c.periods = 8;
        c.drift_law = DriftLaw::linear_persistence_decay(0.02, 7);
        let m = dgp_moments(&c).unwrap();
        for l in &m.lags {
            assert!((l.b_pi - (1.0 - 0.02 * l.tau as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs() {
        let mut c = DgpConfig::classical(100, 1);
        c.lambda_tilde = 1.5;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = DgpConfig::classical(100, 1);
        c.periods = 1;
        assert!(c.validate().is_err());
        let mut c = DgpConfig::classical(100, 1);
        c.sigma2_m = vec![0.1, 0.1, 0.1];
        assert!(c.validate().is_err());
        let mut c = DgpConfig::classical(100, 1);
        c.drift_law = DriftLaw::Schedule { steps: vec![DriftStep::default(); 3] };
        assert!(c.validate().is_err());
        assert!(DgpConfig::from_json(r#"{"beta": 1}"#).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let mut c = DgpConfig::classical(500, 9);
        c.drift_law = DriftLaw::Composite { shift: 0.1, ses_loading: 0.0, ability_loading: 0.1, noise_variance: 0.2 };
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(DgpConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn same_seed_same_panel() {
        let mut c = DgpConfig::classical(300, 42);
        c.periods = 4;
        c.drift_law = DriftLaw::Noise { variance: 0.1 };
        let a = simulate_panel(&c).unwrap();
        let b = simulate_panel(&c).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.truth, b.truth);
        let mut bytes_a = Vec::new();
        let mut bytes_b = Vec::new();
        a.to_raw_table().unwrap().write_csv(&mut bytes_a).unwrap();
        b.to_raw_table().unwrap().write_csv(&mut bytes_b).unwrap();
        assert_eq!(bytes_a, bytes_b);
        c.seed = 43;
        assert_ne!(simulate_panel(&c).unwrap().dataset, a.dataset);
    }

    #[test]
    fn signal_and_score_identities() {
        let mut c = DgpConfig::classical(2_000, 3);
        c.lambda_tilde = 0.7;
        c.periods = 3;
        let p = simulate_panel(&c).unwrap();
        let t = p.truth.as_ref().unwrap();
        for k in 0..3 {
            let score = p.dataset.score(k).unwrap();
            let mean = t.signal[k].iter().sum::<f64>() / 2_000.0;
            for (i, sc) in score.iter().enumerate() {
                assert_eq!(t.signal[k][i], t.ability[k][i] + t.error[k][i]);
                assert_eq!(sc.unwrap(), (1.0 - 0.7) * mean + 0.7 * t.signal[k][i]);
            }
        }
    }

    #[test]
    fn no_measurement_error_recovers_structure() {
        let mut c = DgpConfig::classical(20_000, 8);
        c.sigma2_m = vec![0.0];
        let p = simulate_panel(&c).unwrap();
        let t = p.truth.as_ref().unwrap();
        let score = p.dataset.score(0).unwrap();
        for (sc, a) in score.iter().zip(&t.ability[0]).take(100) {
            assert!((sc.unwrap() - a).abs() < 1e-12);
        }
        let spec = VariableSpec::new("outcome", &[SES, &score_column(0)], "school_id");
        let fit = ols_fit(&p.dataset, &spec, &RegressOptions::default()).unwrap();
        assert!((fit.coef(SES).unwrap() - 0.01).abs() < 4.0 * fit.se(SES).unwrap());
        let g = fit.coef(&score_column(0)).unwrap();
        assert!((g - 0.4).abs() < 4.0 * fit.se(&score_column(0)).unwrap());
    }

    #[test]
    fn error_share_of_signal_variance() {
        let mut c = DgpConfig::classical(100_000, 17);
        c.delta = 0.0;
        let p = simulate_panel(&c).unwrap();
        let t = p.truth.as_ref().unwrap();
        let share = var(&t.error[0]) / var(&t.signal[0]);
        assert!((share - 0.12).abs() < 0.02 * 0.12, "share {share}");
    }

    #[test]
    fn classical_error_independence_and_shrinkage_signature() {
        let n = 40_000;
        let mut c = DgpConfig::classical(n, 21);
        c.lambda_tilde = 0.6;
        c.periods = 3;
        c.drift_law = DriftLaw::Noise { variance: 0.1 };
        let p = simulate_panel(&c).unwrap();
        let t = p.truth.as_ref().unwrap();
        let ses: Vec<f64> = p.dataset.column(SES).unwrap().iter().map(|v| v.unwrap()).collect();
        let band = 4.0 / (n as f64).sqrt();
        assert!(cov(&t.error[0], &ses).abs() < band);
        assert!(cov(&t.error[0], &t.ability[0]).abs() < band);
        assert!(cov(&t.error[0], &t.error[1]).abs() < band);
        let score: Vec<f64> = p.dataset.score(0).unwrap().iter().map(|v| v.unwrap()).collect();
        // posterior-mean error: negative with ability, orthogonal to the score at the
        // matching shrinkage; here λ̃ differs from the reliability so only the sign is checked
        assert!(cov(&t.score_error[0], &t.ability[0]) < 0.0);
        let expected = 0.36 * (0.25f64.powi(2) + 0.88 + 0.12);
        assert!((var(&score) - expected).abs() < 0.03 * expected);
    }

    #[test]
    fn score_uncorrelated_with_error_at_matching_shrinkage() {
        let n = 40_000;
        let mut c = DgpConfig::classical(n, 22);
        c.delta = 0.0;
        c.lambda_tilde = 0.88;
        let p = simulate_panel(&c).unwrap();
        let t = p.truth.as_ref().unwrap();
        let score: Vec<f64> = p.dataset.score(0).unwrap().iter().map(|v| v.unwrap()).collect();
        assert!(cov(&t.score_error[0], &score).abs() < 4.0 / (n as f64).sqrt());
        assert!(cov(&t.score_error[0], &t.ability[0]) < -0.05);
    }

    #[test]
    fn simulated_lag_variance_matches_moment() {
        let mut c = DgpConfig::classical(200_000, 5);
        c.sigma2_u = 0.9;
        c.drift_law = DriftLaw::Noise { variance: 0.1 };
        let p = simulate_panel(&c).unwrap();
        let v = var(&p.truth.as_ref().unwrap().residual[1]);
        assert!((v - 1.0).abs() < 0.015, "{v}");
    }

    #[test]
    fn lpm_outcome_is_binary_and_export_validates() {
        let mut c = DgpConfig::classical(400, 2);
        c.outcome_model = OutcomeModel::LinearProbability { intercept: 0.5 };
        c.gamma = 0.1;
        c.sigma2_e = 0.0;
        c.periods = 3;
        c.n_cohorts = 2;
        let p = simulate_panel(&c).unwrap();
        let raw = p.to_raw_table().unwrap();
        let data = validate_dataset(&raw).unwrap();
        assert_eq!(data.n_rows(), 400);
        assert_eq!(data.available_lags(), vec![1, 2]);
        assert_eq!(data.characteristics(), &["female".to_string(), "age".to_string()]);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = p.export(&dir.path().join("panel.csv")).unwrap();
        assert!(a.exists());
        assert_eq!(b.file_name().unwrap(), "panel_truth.csv");
        let truth = RawTable::read_csv(std::fs::File::open(b).unwrap()).unwrap();
        assert_eq!(truth.rows.len(), 400);
        assert!(truth.headers.contains(&"drift_g5_end".to_string()));
    }
}
