//! Monte Carlo experiments over simulated panels.
//!
//! Replication `r` of every group draws its panel from seed `base_seed ^ r`
//! and hands the same panel to every method, so method comparisons are
//! paired. Replications run in parallel; results are gathered in replication
//! order before aggregation, so reports do not depend on scheduling.

mod table;

pub use table::{emit_table, parse_markdown, Metric, TableFormat};

use crate::dgp::{simulate_dgp, DgpConfig, ErrorKind, FactorRegime};
use crate::gmm::{confidence_interval, solve_with, CovSpec, SolveOptions};
use crate::linalg::mean;
use crate::moments::{EstimatorKind, InstrumentSpec, MomentSystem};
use crate::rng::replication_seed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum McError {
    #[error("invalid Monte Carlo config: {0}")]
    BadConfig(String),
}

/// One `(K, T)` grid cell; the number of donor factors equals `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub t: usize,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("({},{})", self.k, self.t)
    }
}

/// Error process of the simulated data paired with the `Ŝ` estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub errors: ErrorKind,
    pub cov: CovSpec,
}

impl Scenario {
    pub fn label(&self) -> String {
        let e = match self.errors {
            ErrorKind::Iid => "iid".to_string(),
            ErrorKind::Ar1 { phi } => format!("ar1({phi})"),
        };
        format!("{}/{e}", self.cov)
    }
}

fn default_t0() -> usize {
    100
}
fn default_level() -> f64 {
    0.95
}
fn default_regimes() -> Vec<FactorRegime> {
    vec![FactorRegime::Stationary]
}
fn default_methods() -> Vec<EstimatorKind> {
    EstimatorKind::TABLE.to_vec()
}
/// Robust rows on independent errors, HAC rows on AR(1) errors.
pub fn default_scenarios() -> Vec<Scenario> {
    vec![
        Scenario { errors: ErrorKind::Iid, cov: CovSpec::Robust },
        Scenario { errors: ErrorKind::Ar1 { phi: 0.5 }, cov: CovSpec::hac_auto() },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub cells: Vec<Cell>,
    #[serde(rename = "T0", default = "default_t0")]
    pub t0: usize,
    #[serde(default = "default_regimes")]
    pub regimes: Vec<FactorRegime>,
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<Scenario>,
    #[serde(default = "default_methods")]
    pub methods: Vec<EstimatorKind>,
    #[serde(default)]
    pub with_covariates: bool,
    #[serde(default)]
    pub instruments: InstrumentSpec,
    pub reps: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub base_seed: u64,
}

impl McConfig {
    pub fn new(cells: Vec<Cell>, reps: usize) -> Self {
        Self {
            cells,
            t0: default_t0(),
            regimes: default_regimes(),
            scenarios: default_scenarios(),
            methods: default_methods(),
            with_covariates: false,
            instruments: InstrumentSpec::default(),
            reps,
            level: default_level(),
            base_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), McError> {
        let bad = |m: String| Err(McError::BadConfig(m));
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if self.cells.is_empty() || self.methods.is_empty() || self.scenarios.is_empty() || self.regimes.is_empty() {
            return bad("cells, methods, scenarios and regimes must be non-empty".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level {} must lie in (0, 1)", self.level));
        }
        for m in &self.methods {
            if *m == EstimatorKind::PiSCov && !self.with_covariates {
                return bad("pi-s-cov needs with_covariates".into());
            }
            if *m == EstimatorKind::PiSContam {
                return bad("pi-s-contam is not part of the table designs".into());
            }
        }
        for s in &self.scenarios {
            for c in &self.cells {
                self.dgp(FactorRegime::Stationary, s, c, 0).validate().map_err(|e| McError::BadConfig(e.to_string()))?;
                s.cov.lags(c.t).map_err(|e| McError::BadConfig(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Simulation settings of one group and replication seed.
    pub fn dgp(&self, regime: FactorRegime, s: &Scenario, c: &Cell, seed: u64) -> DgpConfig {
        let mut d = DgpConfig::new(c.k, c.k, c.t).with_seed(seed);
        d.t0 = self.t0;
        d.factor_regime = regime;
        d.error_kind = s.errors;
        d.with_covariates = self.with_covariates;
        d
    }
}

/// Aggregates for one method in one group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    pub method: EstimatorKind,
    pub mse: f64,
    pub mse_mcse: f64,
    pub bias: f64,
    pub coverage: f64,
    pub coverage_mcse: f64,
    pub mean_se: f64,
    /// MSE after dropping the largest 5% of squared errors.
    pub trimmed_mse: f64,
    /// Replications whose fit failed; excluded from every statistic.
    pub failures: usize,
    /// Replications that finished with a non-convergence, weight-fallback or
    /// PSD-clipping flag; included in the statistics.
    pub flagged: usize,
    pub reps: usize,
    /// Per-replication `τ̂` (NaN for failures), in replication order.
    #[serde(skip)]
    pub estimates: Vec<f64>,
    #[serde(skip)]
    pub std_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McGroup {
    pub regime: FactorRegime,
    pub scenario: Scenario,
    pub cell: Cell,
    pub rows: Vec<McRow>,
}

impl McGroup {
    pub fn row(&self, method: EstimatorKind) -> Option<&McRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub config: McConfig,
    pub groups: Vec<McGroup>,
}

impl McReport {
    pub fn group(&self, regime: FactorRegime, cell: Cell, cov: CovSpec) -> Option<&McGroup> {
        self.groups.iter().find(|g| g.regime == regime && g.cell == cell && g.scenario.cov == cov)
    }
    pub fn total_failures(&self) -> usize {
        self.groups.iter().flat_map(|g| &g.rows).map(|r| r.failures).sum()
    }
    pub fn total_flagged(&self) -> usize {
        self.groups.iter().flat_map(|g| &g.rows).map(|r| r.flagged).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Draw {
    tau: f64,
    se: f64,
    covered: bool,
    flagged: bool,
}

/// Fits `method` on one simulated panel; `None` when the fit fails.
fn fit_one(panel: &crate::panel::Panel, method: EstimatorKind, cfg: &McConfig, cov: CovSpec) -> Option<Draw> {
    let sys = MomentSystem::build(method, panel, cfg.instruments).ok()?;
    let opts = SolveOptions::default().with_cov(cov);
    let fit = solve_with(&sys, panel, &opts).ok()?;
    let k = fit.tau_index?;
    let (lo, hi) = confidence_interval(&fit, k, cfg.level);
    let tau = fit.theta[k];
    let d = &fit.diagnostics;
    Some(Draw {
        tau,
        se: fit.se[k],
        covered: lo <= 1.0 && 1.0 <= hi,
        flagged: !fit.converged || d.weight_fallback || d.psd_clipped,
    })
}

/// Jackknife standard error of a sample mean, `sd / √n`.
fn mean_mcse(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let ss: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    (mean(&ss) * n as f64 / (n - 1) as f64 / n as f64).sqrt()
}

fn aggregate(method: EstimatorKind, draws: &[Option<Draw>]) -> McRow {
    let ok: Vec<Draw> = draws.iter().flatten().copied().collect();
    let sq: Vec<f64> = ok.iter().map(|d| (d.tau - 1.0).powi(2)).collect();
    let err: Vec<f64> = ok.iter().map(|d| d.tau - 1.0).collect();
    let cov: Vec<f64> = ok.iter().map(|d| d.covered as u8 as f64).collect();
    let se: Vec<f64> = ok.iter().map(|d| d.se).collect();
    let mut sorted = sq.clone();
    sorted.sort_by(f64::total_cmp);
    let keep = sorted.len() - sorted.len() / 20;
    McRow {
        method,
        mse: mean(&sq),
        mse_mcse: mean_mcse(&sq),
        bias: mean(&err),
        coverage: mean(&cov),
        coverage_mcse: mean_mcse(&cov),
        mean_se: mean(&se),
        trimmed_mse: mean(&sorted[..keep]),
        failures: draws.len() - ok.len(),
        flagged: ok.iter().filter(|d| d.flagged).count(),
        reps: draws.len(),
        estimates: draws.iter().map(|d| d.map_or(f64::NAN, |d| d.tau)).collect(),
        std_errors: draws.iter().map(|d| d.map_or(f64::NAN, |d| d.se)).collect(),
    }
}

/// Runs every (regime, scenario, cell) group of `cfg`.
pub fn run_mc(cfg: &McConfig) -> Result<McReport, McError> {
    cfg.validate()?;
    let mut groups = Vec::new();
    for &regime in &cfg.regimes {
        for scenario in &cfg.scenarios {
            for cell in &cfg.cells {
                let per_rep: Vec<Vec<Option<Draw>>> = (0..cfg.reps as u64)
                    .into_par_iter()
                    .map(|r| {
                        let dgp = cfg.dgp(regime, scenario, cell, replication_seed(cfg.base_seed, r));
                        match simulate_dgp(&dgp) {
                            Ok(panel) => cfg.methods.iter().map(|&m| fit_one(&panel, m, cfg, scenario.cov)).collect(),
                            Err(_) => vec![None; cfg.methods.len()],
                        }
                    })
                    .collect();
                let rows = cfg
                    .methods
                    .iter()
                    .enumerate()
                    .map(|(j, &m)| {
                        let draws: Vec<Option<Draw>> = per_rep.iter().map(|r| r[j]).collect();
                        aggregate(m, &draws)
                    })
                    .collect();
                groups.push(McGroup { regime, scenario: *scenario, cell: *cell, rows });
            }
        }
    }
    Ok(McReport { config: cfg.clone(), groups })
}

/// Runs `run_mc` on a dedicated pool of `jobs` worker threads.
pub fn run_mc_with_jobs(cfg: &McConfig, jobs: usize) -> Result<McReport, McError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| McError::BadConfig(e.to_string()))?;
    pool.install(|| run_mc(cfg))
}
