use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use contamina_core::data::{read_dataset, PanelDataset, SES};
use contamina_core::diagnostics::{diagnose as run_diagnostics, write_path_csv, DiagnosticOptions};
use contamina_core::mc::{mc_run, write_draws_csv, Estimand, McConfig};
use contamina_core::reference::{reference_check, ReferenceConstants, EMBEDDED_CONSTANTS};
use contamina_core::regress::ClusterCorrection;
use contamina_core::simulate::{simulate_panel, DgpConfig, SyntheticPanel};
use contamina_core::strategies::{
    build_reliability_series, eiv_th_with, forecast_reliability, run_strategy, share_explained,
    write_estimates_csv, write_reliability_csv, ForecastOptions, Method, SampleMode, StrategyEstimate,
    StrategyOptions,
};
use contamina_core::Error;

use crate::{CheckArgs, DiagnoseArgs, FitArgs, McArgs, StrategyChoice};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_input_error() => 2,
            CliError::Core(_) => 3,
            CliError::Mismatch(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn metadata() -> Value {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    json!({ "generated_unix": secs, "tool_version": env!("CARGO_PKG_VERSION") })
}

/// Report envelope: stable fields first, timestamps confined to `metadata`.
fn envelope<T: Serialize>(command: &str, body: &T, metadata: Value) -> CliResult<Value> {
    let mut v = json!({ "schema_version": SCHEMA_VERSION, "command": command });
    let body = serde_json::to_value(body).map_err(Error::from)?;
    if let (Some(obj), Value::Object(fields)) = (v.as_object_mut(), body) {
        obj.extend(fields);
        obj.insert("metadata".into(), metadata);
    }
    Ok(v)
}

fn ensure_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> CliResult {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn load_panel(path: &Path) -> CliResult<PanelDataset> {
    let file = fs::File::open(path)?;
    Ok(read_dataset(std::io::BufReader::new(file))?)
}

pub fn simulate(config: &Path, out: &Path) -> CliResult {
    let cfg = DgpConfig::from_path(config)?;
    let panel = simulate_panel(&cfg)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let (panel_path, truth_path) = panel.export(out)?;
    let echo = serde_json::to_string_pretty(&cfg).map_err(Error::from)?;
    println!("{echo}");
    println!("implied reliability lambda = {:.6}", cfg.lambda());
    println!("wrote {} and {}", panel_path.display(), truth_path.display());
    Ok(())
}

#[derive(Serialize)]
struct Failure {
    method: Method,
    error: String,
}

#[derive(Serialize)]
struct Share {
    method: Method,
    share_pct: f64,
}

#[derive(Serialize)]
struct FitReport {
    input: String,
    n_rows: usize,
    outcome: String,
    ses: String,
    cluster: String,
    cluster_correction: ClusterCorrection,
    estimates: Vec<StrategyEstimate>,
    shares: Vec<Share>,
    failures: Vec<Failure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reliability_series: Option<contamina_core::strategies::ReliabilitySeries>,
    #[serde(skip_serializing_if = "Option::is_none")]
    forecast: Option<contamina_core::strategies::ReliabilityForecast>,
}

pub fn fit(args: &FitArgs) -> CliResult {
    let data = load_panel(&args.input)?;
    let opts = StrategyOptions {
        outcome: args.outcome.clone(),
        ses: args.ses.clone(),
        cluster: args.cluster.clone(),
        degree: args.degree,
        sample_mode: if args.common_sample { SampleMode::Common } else { SampleMode::PerLag },
        forecast: ForecastOptions { weighted: args.weighted, ..Default::default() },
        ..Default::default()
    };
    let methods: Vec<Method> = match args.strategy {
        StrategyChoice::Ols => vec![Method::Ols],
        StrategyChoice::Iv => vec![Method::Iv],
        StrategyChoice::EivFs => vec![Method::EivFs],
        StrategyChoice::EivTh => vec![Method::EivTh],
        StrategyChoice::All => Method::ALL.to_vec(),
    };
    let single = methods.len() == 1;

    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    let mut errors = Vec::new();
    let mut series = None;
    let mut forecast = None;
    for &method in &methods {
        let result = if method == Method::EivTh {
            build_reliability_series(&data, &opts).and_then(|s| {
                let f = forecast_reliability(&s, opts.degree, &opts.forecast)?;
                series = Some(s);
                forecast = Some(f.clone());
                eiv_th_with(&data, &opts, &f)
            })
        } else {
            run_strategy(method, &data, &opts)
        };
        match result {
            Ok(est) => estimates.push(est),
            Err(e) => {
                log::warn!("{method} failed: {e}");
                if args.strict || single {
                    return Err(e.into());
                }
                failures.push(Failure { method, error: e.to_string() });
                errors.push(e);
            }
        }
    }
    if estimates.is_empty() {
        return Err(errors.remove(0).into());
    }

    // shares are measured against the OLS gap, fitted here if it was not requested
    let baseline = match estimates.iter().find(|e| e.method == Method::Ols) {
        Some(e) => Some(e.beta_hat),
        None => run_strategy(Method::Ols, &data, &opts).ok().map(|e| e.beta_hat),
    };
    let shares = match baseline {
        Some(b) => estimates
            .iter()
            .filter(|e| e.method != Method::Ols)
            .map(|e| share_explained(b, e.beta_hat).map(|s| Share { method: e.method, share_pct: s }))
            .collect::<Result<Vec<_>, _>>()?,
        None => Vec::new(),
    };

    ensure_dir(&args.out.out)?;
    let report = FitReport {
        input: args.input.display().to_string(),
        n_rows: data.n_rows(),
        outcome: opts.outcome.clone(),
        ses: opts.ses.clone(),
        cluster: opts.cluster.clone(),
        cluster_correction: opts.regress.correction,
        estimates,
        shares,
        failures,
        reliability_series: series,
        forecast,
    };
    let value = envelope("fit", &report, metadata())?;
    write_json(&args.out.out.join("fit_report.json"), &value)?;
    write_estimates_csv(&report.estimates, create(&args.out.out.join("estimates.csv"))?)?;
    if let Some(s) = &report.reliability_series {
        write_reliability_csv(s, report.forecast.as_ref(), create(&args.out.out.join("reliability.csv"))?)?;
    }
    for e in &report.estimates {
        println!(
            "{:<7} beta = {:>9.5} (se {:.5})  gamma = {:>8.5} (se {:.5}){}",
            e.method.tag(),
            e.beta_hat,
            e.se_beta,
            e.gamma_hat,
            e.se_gamma,
            e.lambda_hat.map(|l| format!("  lambda = {l:.4}")).unwrap_or_default()
        );
    }
    for s in &report.shares {
        println!("share of gap attributed to measurement error ({}): {:.2}%", s.method.tag(), s.share_pct);
    }
    for f in &report.failures {
        println!("{} failed: {}", f.method.tag(), f.error);
    }
    Ok(())
}

pub fn diagnose(args: &DiagnoseArgs) -> CliResult {
    let (data, panel): (PanelDataset, Option<SyntheticPanel>) = match (&args.input, &args.config) {
        (_, Some(cfg)) => {
            let p = simulate_panel(&DgpConfig::from_path(cfg)?)?;
            (p.dataset.clone(), Some(p))
        }
        (Some(input), None) => (load_panel(input)?, None),
        (None, None) => unreachable!("clap requires one source"),
    };
    let characteristics = if args.characteristics.is_empty() {
        std::iter::once(SES.to_string()).chain(data.characteristics().iter().cloned()).collect()
    } else {
        args.characteristics.clone()
    };
    let opts = DiagnosticOptions {
        ses: args.ses.clone(),
        cluster: args.cluster.clone(),
        significance: args.significance,
        ..Default::default()
    };
    let report = run_diagnostics(&data, &characteristics, panel.as_ref(), &opts)?;
    ensure_dir(&args.out.out)?;
    write_json(&args.out.out.join("diagnostics.json"), &envelope("diagnose", &report, metadata())?)?;
    write_path_csv(&report.path, create(&args.out.out.join("delta_path.csv"))?)?;
    for c in &report.characteristics {
        let flag = match c.flag {
            contamina_core::diagnostics::Flag::Pass => "pass",
            contamina_core::diagnostics::Flag::Warn => "WARN",
        };
        println!("{:<12} alpha = {:>9.5} (se {:.5}, p = {:.4})  {flag}", c.name, c.alpha, c.se, c.p_value);
    }
    if let Some(v) = report.variance_check {
        println!("variance check: r1 = {:.5}, r2 = {:.5}, tolerance {:.5} -> {}", v.r1, v.r2, v.tolerance, v.pass);
    }
    Ok(())
}

pub fn mc(args: &McArgs) -> CliResult {
    let text = fs::read_to_string(&args.config)?;
    let mut cfg: McConfig =
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", args.config.display())))?;
    if let Some(r) = args.replications {
        cfg.replications = r;
    }
    if args.sequential {
        cfg.parallel = false;
    }
    if args.self_test {
        cfg.overrides.insert(Estimand::BetaM, cfg.dgp.beta);
        if !cfg.estimands.is_empty() && !cfg.estimands.contains(&Estimand::BetaM) {
            cfg.estimands.push(Estimand::BetaM);
        }
    }
    cfg.validate()?;
    let run = mc_run(&cfg)?;
    ensure_dir(&args.out.out)?;
    let mut meta = metadata();
    meta["runtime_seconds"] = json!(run.runtime_seconds);
    write_json(&args.out.out.join("mc_summary.json"), &envelope("mc", &run.summary, meta)?)?;
    write_draws_csv(&run, create(&args.out.out.join("mc_draws.csv"))?)?;
    for e in &run.summary.estimands {
        println!(
            "{:<14} mean = {:>10.6}  predicted = {:>10.6}  z = {:>7.2}{}",
            e.estimand.name(),
            e.mean,
            e.predicted,
            e.z,
            if e.flagged { "  OUTSIDE BAND" } else { "" }
        );
    }
    let flagged: Vec<&str> = run.summary.estimands.iter().filter(|e| e.flagged).map(|e| e.estimand.name()).collect();
    if !flagged.is_empty() {
        return Err(CliError::Mismatch(format!(
            "{} estimand(s) outside the {}-SE band: {}",
            flagged.len(),
            cfg.z_band,
            flagged.join(", ")
        )));
    }
    Ok(())
}

pub fn reference(args: &CheckArgs) -> CliResult {
    let text = match &args.constants {
        Some(p) => fs::read_to_string(p)?,
        None => EMBEDDED_CONSTANTS.to_string(),
    };
    let mut constants = ReferenceConstants::from_json(&text)?;
    if let Some(t) = args.tolerance {
        constants.tolerances.share_pp = t;
    }
    if let Some(t) = args.coef_tolerance {
        constants.tolerances.coefficient = t;
    }
    let report = reference_check(&constants)?;
    for c in &report.checks {
        let expected = match c.expected {
            contamina_core::reference::Expected::Value(v) => format!("{v}"),
            contamina_core::reference::Expected::Range([lo, hi]) => format!("[{lo}, {hi}]"),
        };
        println!(
            "{} {:<32} computed {:>10.5}  published {:<16} tol {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.computed,
            expected,
            c.tolerance
        );
    }
    if args.write {
        ensure_dir(&args.out.out)?;
        let path: PathBuf = args.out.out.join("paper_check.json");
        write_json(&path, &envelope("paper-check", &report, metadata())?)?;
    }
    if !report.all_pass() {
        let failed = report.checks.iter().filter(|c| !c.pass).count();
        return Err(CliError::Mismatch(format!("{failed} check(s) outside tolerance")));
    }
    Ok(())
}
