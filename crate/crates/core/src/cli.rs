//! Command-line front end: `simulate`, `estimate`, `montecarlo`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use crate::dgp::{simulate_contaminated, simulate_dgp, Contamination, DgpConfig, ErrorKind, FactorRegime, Truth};
use crate::gmm::{self, confidence_interval, j_test, Bandwidth, CovSpec, GmmError, GmmFit, SolveOptions, WeightScheme};
use crate::mc::{emit_table, run_mc_with_jobs, McConfig, Metric, TableFormat};
use crate::moments::{EstimatorKind, InstrumentSpec, MomentError, MomentSystem};
use crate::panel::{load_panel, save_panel, PanelSchema};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<GmmError> for CliError {
    fn from(e: GmmError) -> Self {
        match e {
            GmmError::Moment(m) => m.into(),
            GmmError::BadBandwidth { .. } | GmmError::WeightShape { .. } | GmmError::NonPsdWeight => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<MomentError> for CliError {
    fn from(e: MomentError) -> Self {
        match e {
            MomentError::EmptyWindow { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "proxsc", version, about = "Proximal synthetic control with surrogates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a panel and write it with a `<stem>.truth.json` sidecar.
    Simulate(SimulateArgs),
    /// Estimate one variant on a panel CSV.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo experiment and write its tables.
    Montecarlo(MonteCarloArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    Stationary,
    LogTrend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ErrorsArg {
    Iid,
    Ar1,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON simulation config; inline flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "F")]
    pub f: Option<usize>,
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long = "T")]
    pub t: Option<usize>,
    #[arg(long = "T0")]
    pub t0: Option<usize>,
    #[arg(long, value_enum)]
    pub regime: Option<RegimeArg>,
    #[arg(long, value_enum)]
    pub errors: Option<ErrorsArg>,
    /// AR(1) coefficient used with `--errors ar1`.
    #[arg(long)]
    pub phi: Option<f64>,
    #[arg(long)]
    pub covariates: bool,
    /// Contaminate the surrogates with donor-factor loadings of this size.
    #[arg(long)]
    pub contaminate: Option<f64>,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    /// Zero noise with pinned effect factors (exact-recovery design).
    #[arg(long)]
    pub noiseless: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SeArg {
    Robust,
    Hac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightsArg {
    Identity,
    Twostep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutArg {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Markdown,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub panel: PathBuf,
    /// Last pre-intervention period.
    #[arg(long)]
    pub t0: usize,
    #[arg(long, value_parser = parse_method)]
    pub method: EstimatorKind,
    #[arg(long, value_enum, default_value = "robust")]
    pub se: SeArg,
    /// `auto` or a lag count (HAC only).
    #[arg(long, default_value = "auto", value_parser = parse_bandwidth)]
    pub bandwidth: Bandwidth,
    /// Defaults to identity when exactly identified, two-step otherwise.
    #[arg(long, value_enum)]
    pub weights: Option<WeightsArg>,
    #[arg(long, num_args = 2, value_names = ["T1", "T2"])]
    pub window: Option<Vec<usize>>,
    #[arg(long, num_args = 2, value_names = ["T1", "T2"])]
    pub lift: Option<Vec<usize>>,
    /// Add a constant and squared proxies to the instruments.
    #[arg(long)]
    pub augment: bool,
    /// Use the donor proxies as post-period instruments too.
    #[arg(long)]
    pub g1_z0: bool,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, value_enum, default_value = "json")]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct MonteCarloArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

fn parse_method(s: &str) -> Result<EstimatorKind, String> {
    s.parse()
}

fn parse_bandwidth(s: &str) -> Result<Bandwidth, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Bandwidth::Auto);
    }
    s.parse().map(Bandwidth::Fixed).map_err(|_| format!("bandwidth must be `auto` or a non-negative integer, got `{s}`"))
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    let res = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a, out),
        Command::Estimate(a) => cmd_estimate(&a, out),
        Command::Montecarlo(a) => cmd_montecarlo(&a, out),
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_json(out: &mut dyn Write, v: &impl Serialize) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(v).map_err(|e| CliError::Data(e.to_string()))?;
    writeln!(out, "{s}").map_err(|e| CliError::Data(e.to_string()))
}

fn emit(out: &mut dyn Write, s: std::fmt::Arguments<'_>) -> Result<(), CliError> {
    out.write_fmt(s).map_err(|e| CliError::Data(e.to_string()))
}

/// Path of the truth sidecar next to a panel CSV: `p.csv` → `p.truth.json`.
pub fn truth_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}.truth.json"))
}

/// Resolves the simulation config from `--config` and inline overrides.
pub fn resolve_dgp(a: &SimulateArgs) -> Result<DgpConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str::<DgpConfig>(&text).map_err(|e| io_err(p, e))?
        }
        None => match (a.f, a.k, a.t) {
            (Some(f), Some(k), Some(t)) => DgpConfig::new(f, k, t),
            _ => return Err(CliError::Usage("simulate needs --config or all of --F, --K and --T".into())),
        },
    };
    if let Some(f) = a.f {
        cfg.f = f;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(t) = a.t {
        cfg.t = t;
    }
    if let Some(t0) = a.t0 {
        cfg.t0 = t0;
    }
    if let Some(r) = a.regime {
        cfg.factor_regime = match r {
            RegimeArg::Stationary => FactorRegime::Stationary,
            RegimeArg::LogTrend => FactorRegime::LogTrend,
        };
    }
    match (a.errors, a.phi) {
        (Some(ErrorsArg::Iid), Some(_)) => return Err(CliError::Usage("--phi needs --errors ar1".into())),
        (Some(ErrorsArg::Iid), None) => cfg.error_kind = ErrorKind::Iid,
        (Some(ErrorsArg::Ar1), phi) => cfg.error_kind = ErrorKind::Ar1 { phi: phi.unwrap_or(0.5) },
        (None, Some(phi)) => match cfg.error_kind {
            ErrorKind::Ar1 { .. } => cfg.error_kind = ErrorKind::Ar1 { phi },
            ErrorKind::Iid => return Err(CliError::Usage("--phi needs --errors ar1".into())),
        },
        (None, None) => {}
    }
    if a.covariates {
        cfg.with_covariates = true;
    }
    if let Some(s) = a.contaminate {
        cfg.contaminated = Some(Contamination { theta_loading_scale: s });
    }
    if let Some(s) = a.noise_scale {
        cfg.noise_scale = s;
    }
    if a.noiseless {
        cfg = cfg.noiseless();
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve_dgp(a)?;
    write_json(out, &json!({ "command": "simulate", "config": cfg, "out": a.out }))?;
    let (panel, psi) = if cfg.contaminated.is_some() {
        let (p, psi) = simulate_contaminated(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
        (p, Some(psi))
    } else {
        (simulate_dgp(&cfg).map_err(|e| CliError::Usage(e.to_string()))?, None)
    };
    let mut truth = Truth::for_config(&cfg);
    if let Some(psi) = psi {
        truth.psi = Some(psi.row_iter().map(|r| r.iter().copied().collect()).collect());
    }
    save_panel(&panel, &a.out).map_err(|e| io_err(&a.out, e))?;
    let tp = truth_path(&a.out);
    let text = serde_json::to_string_pretty(&truth).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(&tp, text + "\n").map_err(|e| io_err(&tp, e))?;
    emit(out, format_args!("wrote {} and {}\n", a.out.display(), tp.display()))
}

/// Resolved settings of an `estimate` run.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateConfig {
    pub panel: PathBuf,
    pub t0: usize,
    pub method: EstimatorKind,
    pub cov: CovSpec,
    pub weights: String,
    pub instruments: InstrumentSpec,
    pub window: Option<(usize, usize)>,
    pub lift: Option<(usize, usize)>,
    pub level: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamReport {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Interval {
    pub estimate: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct JReport {
    pub stat: f64,
    pub df: usize,
    /// Absent unless the weighting is efficient two-step.
    pub pvalue: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub config: EstimateConfig,
    pub params: Vec<ParamReport>,
    pub tau: Option<Interval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_window: Option<Interval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_lift: Option<Interval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub j: Option<JReport>,
    pub moments: usize,
    pub periods: usize,
    pub weighting: gmm::WeightKind,
    pub converged: bool,
    pub iterations: usize,
    pub s_hat_condition: f64,
    pub diagnostics: gmm::Diagnostics,
}

fn interval(fit: &GmmFit, idx: usize, level: f64) -> Interval {
    let (lo, hi) = confidence_interval(fit, idx, level);
    Interval { estimate: fit.theta[idx], se: fit.se[idx], ci_lower: lo, ci_upper: hi, level }
}

fn window_arg(v: &Option<Vec<usize>>) -> Option<(usize, usize)> {
    v.as_ref().map(|w| (w[0], w[1]))
}

/// Loads the panel, builds the system and fits it.
pub fn estimate(a: &EstimateArgs) -> Result<EstimateReport, CliError> {
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(CliError::Usage(format!("--level {} must lie in (0, 1)", a.level)));
    }
    let cov = match a.se {
        SeArg::Robust => CovSpec::Robust,
        SeArg::Hac => CovSpec::Hac { bandwidth: a.bandwidth },
    };
    let instruments = InstrumentSpec { augment: a.augment, g1_includes_z0: a.g1_z0 };
    let panel = load_panel(&a.panel, &PanelSchema::infer(a.t0)).map_err(|e| io_err(&a.panel, e))?;
    let mut sys = MomentSystem::build(a.method, &panel, instruments)?;
    let (window, lift) = (window_arg(&a.window), window_arg(&a.lift));
    if let Some((t1, t2)) = window {
        sys = sys.add_window_att(t1, t2)?;
    }
    if let Some((t1, t2)) = lift {
        sys = sys.add_lift(t1, t2)?;
    }
    let weights = match a.weights {
        Some(WeightsArg::Identity) => WeightScheme::Identity,
        Some(WeightsArg::Twostep) => WeightScheme::TwoStep,
        None => WeightScheme::default_for(&sys),
    };
    let config = EstimateConfig {
        panel: a.panel.clone(),
        t0: a.t0,
        method: a.method,
        cov,
        weights: format!("{weights:?}").to_ascii_lowercase(),
        instruments,
        window,
        lift,
        level: a.level,
    };
    let fit = gmm::solve_with(&sys, &panel, &SolveOptions::default().with_cov(cov).with_weights(weights))?;
    let params = fit
        .names
        .iter()
        .enumerate()
        .map(|(i, n)| ParamReport { name: n.clone(), estimate: fit.theta[i], se: fit.se[i] })
        .collect();
    let find = |prefix: &str| fit.names.iter().position(|n| n.starts_with(prefix)).map(|i| interval(&fit, i, a.level));
    let j = (fit.df > 0).then(|| JReport { stat: fit.j, df: fit.df, pvalue: j_test(&fit).ok().map(|t| t.pvalue) });
    Ok(EstimateReport {
        tau: fit.tau_index.map(|i| interval(&fit, i, a.level)),
        tau_window: find("tau_window"),
        tau_lift: find("tau_lift"),
        j,
        moments: sys.q(),
        periods: fit.periods,
        weighting: fit.weighting,
        converged: fit.converged,
        iterations: fit.iterations,
        s_hat_condition: crate::linalg::condition_number(&fit.s_hat),
        diagnostics: fit.diagnostics.clone(),
        params,
        config,
    })
}

fn write_interval(out: &mut dyn Write, name: &str, iv: &Interval) -> Result<(), CliError> {
    emit(
        out,
        format_args!(
            "{name:<12} {:>14.6} (se {:.6})  {:.0}% CI [{:.6}, {:.6}]\n",
            iv.estimate,
            iv.se,
            100.0 * iv.level,
            iv.ci_lower,
            iv.ci_upper
        ),
    )
}

fn write_text(out: &mut dyn Write, r: &EstimateReport) -> Result<(), CliError> {
    let c = &r.config;
    emit(
        out,
        format_args!(
            "panel: {}\nt0: {}\nmethod: {}\nse: {}\nweights: {}\ninstruments: {}\nlevel: {}\n",
            c.panel.display(),
            c.t0,
            c.method.slug(),
            c.cov,
            c.weights,
            c.instruments.describe(),
            c.level
        ),
    )?;
    if let Some((t1, t2)) = c.window {
        emit(out, format_args!("window: {t1} {t2}\n"))?;
    }
    if let Some((t1, t2)) = c.lift {
        emit(out, format_args!("lift: {t1} {t2}\n"))?;
    }
    emit(out, format_args!("\n{:<16} {:>14} {:>12}\n", "parameter", "estimate", "se"))?;
    for p in &r.params {
        emit(out, format_args!("{:<22} {:>14.6} {:>12.6}\n", p.name, p.estimate, p.se))?;
    }
    emit(out, format_args!("\n"))?;
    if let Some(t) = &r.tau {
        write_interval(out, "tau", t)?;
    }
    if let Some(t) = &r.tau_window {
        write_interval(out, "tau_window", t)?;
    }
    if let Some(t) = &r.tau_lift {
        write_interval(out, "tau_lift", t)?;
    }
    if let Some(j) = &r.j {
        match j.pvalue {
            Some(p) => emit(out, format_args!("J = {:.6} on {} df, p = {:.6}\n", j.stat, j.df, p))?,
            None => emit(out, format_args!("J = {:.6} on {} df (no p-value: weighting not efficient)\n", j.stat, j.df))?,
        }
    }
    emit(
        out,
        format_args!(
            "moments {}  periods {}  converged {}  iterations {}  cond(S) {:.3e}  cond(RG) {:.3e}  bandwidth {}  psd_clipped {}  weight_fallback {}\n",
            r.moments,
            r.periods,
            r.converged,
            r.iterations,
            r.s_hat_condition,
            r.diagnostics.condition,
            r.diagnostics.bandwidth,
            r.diagnostics.psd_clipped,
            r.diagnostics.weight_fallback
        ),
    )
}

fn cmd_estimate(a: &EstimateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let report = estimate(a)?;
    match a.out {
        OutArg::Json => write_json(out, &report),
        OutArg::Text => write_text(out, &report),
    }
}

/// Reads a Monte Carlo config and applies `--reps` / `--seed`.
pub fn resolve_mc(a: &MonteCarloArgs) -> Result<McConfig, CliError> {
    let text = std::fs::read_to_string(&a.config).map_err(|e| io_err(&a.config, e))?;
    let mut cfg: McConfig = serde_json::from_str(&text).map_err(|e| io_err(&a.config, e))?;
    if let Some(r) = a.reps {
        cfg.reps = r;
    }
    if let Some(s) = a.seed {
        cfg.base_seed = s;
    }
    if a.jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_montecarlo(a: &MonteCarloArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve_mc(a)?;
    let format = match a.format {
        FormatArg::Csv => TableFormat::Csv,
        FormatArg::Markdown => TableFormat::Markdown,
    };
    let jobs = a.jobs.unwrap_or_else(rayon::current_num_threads);
    write_json(
        out,
        &json!({ "command": "montecarlo", "config": cfg, "out_dir": a.out_dir, "format": format, "jobs": jobs }),
    )?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| io_err(&a.out_dir, e))?;
    let start = Instant::now();
    let report = run_mc_with_jobs(&cfg, jobs).map_err(|e| CliError::Usage(e.to_string()))?;
    let elapsed = start.elapsed().as_secs_f64();
    for m in Metric::ALL {
        let path = a.out_dir.join(format!("{}.{}", m.slug(), format.extension()));
        std::fs::write(&path, emit_table(&report, m, format)).map_err(|e| io_err(&path, e))?;
    }
    let path = a.out_dir.join("results.json");
    let body: Value = serde_json::to_value(&report).map_err(|e| CliError::Data(e.to_string()))?;
    let text = serde_json::to_string_pretty(&body).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    emit(
        out,
        format_args!(
            "elapsed {elapsed:.2}s; failures {}; flagged {}; tables in {}\n",
            report.total_failures(),
            report.total_flagged(),
            a.out_dir.display()
        ),
    )?;
    for g in &report.groups {
        for r in g.rows.iter().filter(|r| r.failures > 0) {
            emit(
                out,
                format_args!(
                    "  {:?} {} {} {}: {} failed\n",
                    g.regime,
                    g.scenario.label(),
                    g.cell.label(),
                    r.method.label(),
                    r.failures
                ),
            )?;
        }
    }
    Ok(())
}
