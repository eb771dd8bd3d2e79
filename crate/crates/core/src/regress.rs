//! Linear regression engine: QR least squares, cluster-robust (CR1) covariance,
//! just-identified 2SLS, stacked joint estimation and the delta method.
//!
//! Every fit includes an intercept (named [`INTERCEPT`]) as its first
//! coefficient. Covariances are always clustered; pass one cluster per row to
//! get the HC1 heteroskedasticity-robust matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{PanelDataset, VariableSpec};
use crate::error::{Error, Result};

pub const INTERCEPT: &str = "_cons";

/// Small-sample scaling of the cluster sandwich.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClusterCorrection {
    /// `G/(G-1) * (N-1)/(N-k)`.
    #[default]
    Cr1,
    /// Raw sandwich.
    None,
}

impl ClusterCorrection {
    fn factor(self, n: usize, k: usize, g: usize) -> f64 {
        match self {
            ClusterCorrection::Cr1 => {
                let (n, k, g) = (n as f64, k as f64, g as f64);
                g / (g - 1.0) * (n - 1.0) / (n - k)
            }
            ClusterCorrection::None => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressOptions {
    pub correction: ClusterCorrection,
    /// Singular values of R below this multiple of the largest count as zero.
    pub rank_tolerance: f64,
    /// |first-stage coefficient| below this aborts 2SLS.
    pub weak_instrument_threshold: f64,
    /// First-stage F below this only logs a warning.
    pub weak_instrument_f_warning: f64,
}

impl Default for RegressOptions {
    fn default() -> Self {
        Self {
            correction: ClusterCorrection::Cr1,
            rank_tolerance: 1e-10,
            weak_instrument_threshold: 1e-6,
            weak_instrument_f_warning: 10.0,
        }
    }
}

/// Coefficients with their cluster-robust covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub names: Vec<String>,
    pub coefficients: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// SSR / (N - k).
    pub residual_variance: f64,
    pub ssr: f64,
    pub r_squared: f64,
    pub n_obs: usize,
    pub n_clusters: usize,
}

impl RegressionFit {
    pub fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn coef(&self, name: &str) -> Result<f64> {
        Ok(self.coefficients[self.index(name)?])
    }

    pub fn se(&self, name: &str) -> Result<f64> {
        let i = self.index(name)?;
        Ok(self.covariance[(i, i)].max(0.0).sqrt())
    }

    pub fn cov(&self, a: &str, b: &str) -> Result<f64> {
        Ok(self.covariance[(self.index(a)?, self.index(b)?)])
    }
}

/// Unweighted least-squares solution of `y ~ x` (no implicit intercept).
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub coefficients: DVector<f64>,
    /// `(X'X)^-1`.
    pub bread: DMatrix<f64>,
    pub residuals: DVector<f64>,
}

/// Solves least squares through a Householder QR of `x`; the normal
/// equations are never formed.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>, rank_tolerance: f64) -> Result<LeastSquares> {
    let (n, k) = x.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!("y has {} rows, X has {n}", y.len())));
    }
    if n < k + 1 {
        return Err(Error::InsufficientData { needed: k + 1, found: n });
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let sv = r.singular_values();
    let largest = sv.max();
    let rank = sv.iter().filter(|&&s| s > rank_tolerance * largest).count();
    if rank < k || largest == 0.0 {
        return Err(Error::RankDeficient { rank, columns: k });
    }
    let mut qty = y.clone();
    qr.q_tr_mul(&mut qty);
    let head = qty.rows(0, k).into_owned();
    let coefficients = r
        .solve_upper_triangular(&head)
        .ok_or(Error::RankDeficient { rank, columns: k })?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or(Error::RankDeficient { rank, columns: k })?;
    let bread = &r_inv * r_inv.transpose();
    let residuals = y - x * &coefficients;
    Ok(LeastSquares { coefficients, bread, residuals })
}

/// CR1 sandwich `c * B [sum_g X_g'u_g u_g'X_g] B` with `B = (X'X)^-1`.
///
/// `clusters` holds arbitrary integer labels, one per row.
pub fn clustered_covariance(
    x: &DMatrix<f64>,
    residuals: &DVector<f64>,
    bread: &DMatrix<f64>,
    clusters: &[usize],
    correction: ClusterCorrection,
) -> Result<DMatrix<f64>> {
    let (n, k) = x.shape();
    if residuals.len() != n || clusters.len() != n {
        return Err(Error::DimensionMismatch("clusters/residuals vs design rows".into()));
    }
    let (dense, g) = densify(clusters);
    if g < 2 {
        return Err(Error::SingleCluster);
    }
    let mut scores = DMatrix::<f64>::zeros(g, k);
    for i in 0..n {
        let u = residuals[i];
        if u == 0.0 {
            continue;
        }
        let c = dense[i];
        for j in 0..k {
            scores[(c, j)] += x[(i, j)] * u;
        }
    }
    let meat = scores.transpose() * &scores;
    let mut v = bread * meat * bread * correction.factor(n, k, g);
    symmetrize(&mut v);
    Ok(v)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m = (&*m + t) * 0.5;
}

fn densify(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let dense = labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (dense, map.len())
}

fn design(n: usize, regressors: &[(&str, &[f64])]) -> Result<(DMatrix<f64>, Vec<String>)> {
    let k = regressors.len() + 1;
    let mut names = vec![INTERCEPT.to_string()];
    let mut x = DMatrix::<f64>::zeros(n, k);
    x.column_mut(0).fill(1.0);
    for (j, (name, values)) in regressors.iter().enumerate() {
        if values.len() != n {
            return Err(Error::DimensionMismatch(format!("regressor `{name}` length {}", values.len())));
        }
        names.push(name.to_string());
        x.column_mut(j + 1).copy_from_slice(values);
    }
    Ok((x, names))
}

fn r_squared(y: &DVector<f64>, ssr: f64) -> f64 {
    let mean = y.mean();
    let tss = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    if tss == 0.0 {
        return if ssr == 0.0 { 1.0 } else { 0.0 };
    }
    (1.0 - ssr / tss).clamp(0.0, 1.0)
}

fn finish_fit(
    names: Vec<String>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    ls: LeastSquares,
    clusters: &[usize],
    opts: &RegressOptions,
) -> Result<RegressionFit> {
    let (n, k) = x.shape();
    let covariance = clustered_covariance(x, &ls.residuals, &ls.bread, clusters, opts.correction)?;
    let ssr = ls.residuals.norm_squared();
    Ok(RegressionFit {
        names,
        coefficients: ls.coefficients,
        covariance,
        residual_variance: ssr / (n - k) as f64,
        ssr,
        r_squared: r_squared(y, ssr),
        n_obs: n,
        n_clusters: densify(clusters).1,
    })
}

/// OLS of `y` on an intercept plus `regressors`, clustered on `clusters`.
pub fn ols(
    y: &[f64],
    regressors: &[(&str, &[f64])],
    clusters: &[usize],
    opts: &RegressOptions,
) -> Result<RegressionFit> {
    let n = y.len();
    let (x, names) = design(n, regressors)?;
    let y = DVector::from_column_slice(y);
    let ls = least_squares(&x, &y, opts.rank_tolerance)?;
    finish_fit(names, &x, &y, ls, clusters, opts)
}

fn gather(data: &PanelDataset, name: &str, rows: &[usize]) -> Result<Vec<f64>> {
    let col = data.column(name)?;
    rows.iter()
        .map(|&i| col[i].ok_or_else(|| Error::InvalidRow { row: i + 1, message: format!("`{name}` missing") }))
        .collect()
}

fn gather_clusters(data: &PanelDataset, name: &str, rows: &[usize]) -> Result<Vec<usize>> {
    let (ids, _) = data.cluster_ids(name)?;
    Ok(rows.iter().map(|&i| ids[i]).collect())
}

/// Rows of `rows` that are complete for every column in `names`.
pub fn restrict_rows(data: &PanelDataset, names: &[&str], rows: &[usize]) -> Result<Vec<usize>> {
    let cols = names.iter().map(|n| data.column(n)).collect::<Result<Vec<_>>>()?;
    Ok(rows.iter().copied().filter(|&i| cols.iter().all(|c| c[i].is_some())).collect())
}

/// OLS on the complete cases of `spec`.
pub fn ols_fit(data: &PanelDataset, spec: &VariableSpec, opts: &RegressOptions) -> Result<RegressionFit> {
    let rows = data.complete_rows(&spec.columns())?;
    ols_fit_on(data, spec, &rows, opts)
}

/// OLS on `rows`, further restricted to complete cases of `spec`.
pub fn ols_fit_on(
    data: &PanelDataset,
    spec: &VariableSpec,
    rows: &[usize],
    opts: &RegressOptions,
) -> Result<RegressionFit> {
    spec.validate(data)?;
    let rows = restrict_rows(data, &spec.columns(), rows)?;
    let y = gather(data, &spec.outcome, &rows)?;
    let xs = spec
        .regressors
        .iter()
        .map(|r| gather(data, r, &rows))
        .collect::<Result<Vec<_>>>()?;
    let regs: Vec<(&str, &[f64])> = spec.regressors.iter().map(String::as_str).zip(xs.iter().map(Vec::as_slice)).collect();
    let clusters = gather_clusters(data, &spec.cluster, &rows)?;
    ols(&y, &regs, &clusters, opts)
}

/// Just-identified 2SLS with its first stage.
#[derive(Debug, Clone)]
pub struct TslsFit {
    /// Coefficients of `y` on intercept, exogenous regressors and the
    /// endogenous regressor; covariance is the clustered 2SLS sandwich.
    pub second_stage: RegressionFit,
    /// Endogenous regressor on intercept, exogenous regressors and instrument.
    pub first_stage: RegressionFit,
    /// Squared cluster-robust t statistic of the instrument in the first stage.
    pub first_stage_f: f64,
}

/// 2SLS with one endogenous regressor and one excluded instrument.
pub fn tsls(
    y: &[f64],
    endogenous: (&str, &[f64]),
    instrument: (&str, &[f64]),
    exogenous: &[(&str, &[f64])],
    clusters: &[usize],
    opts: &RegressOptions,
) -> Result<TslsFit> {
    let n = y.len();
    let mut z_regs = exogenous.to_vec();
    z_regs.push(instrument);
    let first_stage = ols(endogenous.1, &z_regs, clusters, opts)?;
    let pi = first_stage.coef(instrument.0)?;
    if pi.abs() < opts.weak_instrument_threshold {
        return Err(Error::WeakInstrument { coefficient: pi, threshold: opts.weak_instrument_threshold });
    }
    let se = first_stage.se(instrument.0)?;
    let first_stage_f = if se > 0.0 { (pi / se).powi(2) } else { f64::INFINITY };
    if first_stage_f < opts.weak_instrument_f_warning {
        log::warn!("first-stage F = {first_stage_f:.2} for instrument `{}`", instrument.0);
    }

    let mut x_regs = exogenous.to_vec();
    x_regs.push(endogenous);
    let (x, names) = design(n, &x_regs)?;
    let (z, _) = design(n, &z_regs)?;
    let k = x.ncols();
    let yv = DVector::from_column_slice(y);

    // X-hat = P_Z X via the thin Q of Z
    let q = z.qr().q();
    let x_hat = &q * (q.transpose() * &x);

    let ls = least_squares(&x_hat, &yv, opts.rank_tolerance)?;
    let residuals = &yv - &x * &ls.coefficients;
    let covariance = clustered_covariance(&x_hat, &residuals, &ls.bread, clusters, opts.correction)?;
    let ssr = residuals.norm_squared();
    let second_stage = RegressionFit {
        names,
        coefficients: ls.coefficients,
        covariance,
        residual_variance: ssr / (n - k) as f64,
        ssr,
        r_squared: r_squared(&yv, ssr),
        n_obs: n,
        n_clusters: densify(clusters).1,
    };
    Ok(TslsFit { second_stage, first_stage, first_stage_f })
}

/// 2SLS on the complete cases of all named columns.
#[allow(clippy::too_many_arguments)]
pub fn tsls_fit(
    data: &PanelDataset,
    outcome: &str,
    endogenous: &str,
    instrument: &str,
    exogenous: &[&str],
    cluster: &str,
    opts: &RegressOptions,
) -> Result<TslsFit> {
    let mut names = vec![outcome, endogenous, instrument];
    names.extend_from_slice(exogenous);
    let rows = data.complete_rows(&names)?;
    tsls_fit_on(data, outcome, endogenous, instrument, exogenous, cluster, &rows, opts)
}

#[allow(clippy::too_many_arguments)]
pub fn tsls_fit_on(
    data: &PanelDataset,
    outcome: &str,
    endogenous: &str,
    instrument: &str,
    exogenous: &[&str],
    cluster: &str,
    rows: &[usize],
    opts: &RegressOptions,
) -> Result<TslsFit> {
    let mut names = vec![outcome, endogenous, instrument];
    names.extend_from_slice(exogenous);
    let rows = restrict_rows(data, &names, rows)?;
    let y = gather(data, outcome, &rows)?;
    let d = gather(data, endogenous, &rows)?;
    let z = gather(data, instrument, &rows)?;
    let xs = exogenous.iter().map(|e| gather(data, e, &rows)).collect::<Result<Vec<_>>>()?;
    let exo: Vec<(&str, &[f64])> = exogenous.iter().copied().zip(xs.iter().map(Vec::as_slice)).collect();
    let clusters = gather_clusters(data, cluster, &rows)?;
    tsls(&y, (endogenous, &d), (instrument, &z), &exo, &clusters, opts)
}

/// Several equations estimated jointly on a replicated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedSystem {
    /// `(spec, tag)`; coefficient names become `tag:name`.
    pub equations: Vec<(VariableSpec, String)>,
}

impl StackedSystem {
    pub fn new(equations: Vec<(VariableSpec, String)>) -> Self {
        Self { equations }
    }

    /// One copy of the data per equation.
    pub fn replication_factor(&self) -> usize {
        self.equations.len()
    }

    pub fn columns(&self) -> Vec<&str> {
        let mut cols: Vec<&str> = Vec::new();
        for (spec, _) in &self.equations {
            for c in spec.columns() {
                if !cols.contains(&c) {
                    cols.push(c);
                }
            }
        }
        cols
    }
}

pub fn stacked_name(tag: &str, name: &str) -> String {
    format!("{tag}:{name}")
}

/// Joint fit on the rows complete for every equation.
pub fn stacked_fit(data: &PanelDataset, system: &StackedSystem, opts: &RegressOptions) -> Result<RegressionFit> {
    let rows = data.complete_rows(&system.columns())?;
    stacked_fit_on(data, system, &rows, opts)
}

/// Replicates `rows` once per equation, interacts every regressor (and the
/// intercept) with an equation dummy, and clusters on the replicated cluster
/// ids. Point estimates equal equation-by-equation OLS; the covariance adds
/// the cross-equation blocks.
pub fn stacked_fit_on(
    data: &PanelDataset,
    system: &StackedSystem,
    rows: &[usize],
    opts: &RegressOptions,
) -> Result<RegressionFit> {
    if system.equations.is_empty() {
        return Err(Error::InvalidConfig("stacked system has no equations".into()));
    }
    let cluster = &system.equations[0].0.cluster;
    if system.equations.iter().any(|(s, _)| &s.cluster != cluster) {
        return Err(Error::InvalidConfig("stacked equations must share one cluster variable".into()));
    }
    for (spec, _) in &system.equations {
        spec.validate(data)?;
    }
    let rows = restrict_rows(data, &system.columns(), rows)?;
    let n = rows.len();
    let e = system.replication_factor();
    let k_total: usize = system.equations.iter().map(|(s, _)| s.regressors.len() + 1).sum();
    let mut x = DMatrix::<f64>::zeros(n * e, k_total);
    let mut y = DVector::<f64>::zeros(n * e);
    let mut names = Vec::with_capacity(k_total);
    let base_clusters = gather_clusters(data, cluster, &rows)?;
    let mut clusters = Vec::with_capacity(n * e);
    let mut col = 0;
    for (eq, (spec, tag)) in system.equations.iter().enumerate() {
        let offset = eq * n;
        let yv = gather(data, &spec.outcome, &rows)?;
        y.rows_mut(offset, n).copy_from_slice(&yv);
        names.push(stacked_name(tag, INTERCEPT));
        x.view_mut((offset, col), (n, 1)).fill(1.0);
        col += 1;
        for r in &spec.regressors {
            let v = gather(data, r, &rows)?;
            x.view_mut((offset, col), (n, 1)).copy_from_slice(&v);
            names.push(stacked_name(tag, r));
            col += 1;
        }
        clusters.extend_from_slice(&base_clusters);
    }
    let ls = least_squares(&x, &y, opts.rank_tolerance)?;
    let mut fit = finish_fit(names, &x, &y, ls, &clusters, opts)?;
    fit.n_obs = n * e;
    Ok(fit)
}

/// Value and standard error of a smooth function of the coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaEstimate {
    pub value: f64,
    pub se: f64,
}

/// First-order delta method: `g(b)` with variance `grad' V grad`.
pub fn delta_method<G, D>(fit: &RegressionFit, g: G, gradient: D) -> Result<DeltaEstimate>
where
    G: Fn(&[f64]) -> f64,
    D: Fn(&[f64]) -> Vec<f64>,
{
    let b = fit.coefficients.as_slice();
    let grad = gradient(b);
    if grad.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "gradient has {} entries, fit has {} coefficients",
            grad.len(),
            b.len()
        )));
    }
    let gv = DVector::from_vec(grad);
    let var = (gv.transpose() * &fit.covariance * &gv)[(0, 0)];
    Ok(DeltaEstimate { value: g(b), se: var.max(0.0).sqrt() })
}
