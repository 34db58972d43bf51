//! Generalised method of moments on a [`MomentSystem`].
//!
//! Affine systems are solved in closed form (one least-squares step through
//! the weight root `R`, `RᵀR = Ω`). Bilinear systems — covariate loadings,
//! contamination matrices and lift parameters — get a staged linear
//! initialisation followed by damped Gauss–Newton.

mod cov;

pub use cov::{auto_bandwidth, estimate_s, long_run_variance, sandwich, Bandwidth, CovSpec, SEstimate};

use crate::linalg::{self, column_means, condition_number, least_squares, pairwise_sum, weight_root};
use crate::moments::{ExtraKind, MomentError, MomentSystem, ParamVector};
use crate::panel::Panel;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GmmError {
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error("singular system ({what}): condition number {condition:.3e}")]
    SingularSystem { what: &'static str, condition: f64 },
    #[error("Gauss-Newton did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },
    #[error("weight matrix is not symmetric positive semi-definite")]
    NonPsdWeight,
    #[error("weight matrix is {found}x{found}, expected {expected}x{expected}")]
    WeightShape { expected: usize, found: usize },
    #[error("non-finite sample moments")]
    NonFiniteMoments,
    #[error("HAC bandwidth {bandwidth} must be below the number of periods {periods}")]
    BadBandwidth { bandwidth: usize, periods: usize },
    #[error("lift window ({t1}, {t2}) has a near-zero synthetic-control mean ({mean:.3e})")]
    DegenerateBaseline { t1: usize, t2: usize, mean: f64 },
    #[error("J-test needs over-identification (q - p = 0)")]
    NotOveridentified,
    #[error("J-test needs efficient (two-step) weighting")]
    InvalidWeighting,
}

/// Weighting matrix choice.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightScheme {
    Identity,
    /// `Ŝ⁻¹` evaluated at a first-stage identity-weighted fit.
    TwoStep,
    /// A user-supplied symmetric PSD `q × q` matrix.
    Fixed(DMatrix<f64>),
}

impl WeightScheme {
    /// Identity for exactly identified systems, two-step otherwise.
    pub fn default_for(sys: &MomentSystem) -> Self {
        if sys.df() == 0 {
            WeightScheme::Identity
        } else {
            WeightScheme::TwoStep
        }
    }
}

/// Which weighting was actually used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightKind {
    Identity,
    TwoStep,
    Fixed,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// `None` picks [`WeightScheme::default_for`].
    pub weights: Option<WeightScheme>,
    pub cov: CovSpec,
    /// Demean moment contributions before forming `Ŝ`.
    pub center: bool,
    pub init: Option<DVector<f64>>,
    pub max_iter: usize,
    /// Gradient-norm tolerance `‖Ĝ′Ωm̄‖`.
    pub tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { weights: None, cov: CovSpec::Robust, center: true, init: None, max_iter: 200, tol: 1e-10 }
    }
}

impl SolveOptions {
    pub fn with_cov(mut self, cov: CovSpec) -> Self {
        self.cov = cov;
        self
    }
    pub fn with_weights(mut self, w: WeightScheme) -> Self {
        self.weights = Some(w);
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    /// Condition number of `RĜ` at the solution.
    pub condition: f64,
    pub psd_clipped: bool,
    /// Two-step weighting fell back to identity because `Ŝ` was singular.
    pub weight_fallback: bool,
    pub bandwidth: usize,
    pub grad_norm: f64,
    pub objective: f64,
}

/// Result of a GMM fit.
#[derive(Debug, Clone, Serialize)]
pub struct GmmFit {
    pub names: Vec<String>,
    pub theta: DVector<f64>,
    pub params: ParamVector,
    /// Covariance of `θ̂` (already divided by `T`).
    pub vcov: DMatrix<f64>,
    pub se: DVector<f64>,
    pub s_hat: DMatrix<f64>,
    pub g_hat: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub m_bar: DVector<f64>,
    /// `T·m̄′Ωm̄`; a valid J statistic only under two-step weighting.
    pub j: f64,
    pub df: usize,
    pub j_pvalue: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub periods: usize,
    pub weighting: WeightKind,
    pub tau_index: Option<usize>,
    pub diagnostics: Diagnostics,
}

impl GmmFit {
    pub fn tau(&self) -> Option<f64> {
        self.tau_index.map(|i| self.theta[i])
    }
    pub fn tau_se(&self) -> Option<f64> {
        self.tau_index.map(|i| self.se[i])
    }
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JTest {
    pub j: f64,
    pub df: usize,
    pub pvalue: f64,
}

/// Sample moments `m̄(θ)` and Jacobian `Ĝ(θ)`.
pub fn moments_and_jacobian(sys: &MomentSystem, panel: &Panel, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (q, p, n) = (sys.q(), sys.p(), panel.periods());
    let m = column_means(&sys.moment_matrix(panel, theta));
    let g = pairwise_sum(0..n, q, p, &|t, out: &mut DMatrix<f64>| {
        let mut u = vec![0.0; q];
        sys.fill(panel, t, theta, &mut u, Some(out));
    }) / n as f64;
    (m, g)
}

fn sample_moments(sys: &MomentSystem, panel: &Panel, theta: &DVector<f64>) -> DVector<f64> {
    column_means(&sys.moment_matrix(panel, theta))
}

fn objective(m: &DVector<f64>, root: &DMatrix<f64>) -> f64 {
    (root * m).norm_squared()
}

/// Solves with the given weights and an optional structured start.
pub fn solve(sys: &MomentSystem, panel: &Panel, w: WeightScheme, init: Option<&ParamVector>) -> Result<GmmFit, GmmError> {
    let init = init.map(|v| sys.layout().flatten(v)).transpose().map_err(MomentError::from)?;
    solve_with(sys, panel, &SolveOptions { weights: Some(w), init, ..SolveOptions::default() })
}

pub fn solve_with(sys: &MomentSystem, panel: &Panel, opts: &SolveOptions) -> Result<GmmFit, GmmError> {
    sys.check_panel(panel)?;
    let q = sys.q();
    let n = panel.periods();
    let scheme = opts.weights.clone().unwrap_or_else(|| WeightScheme::default_for(sys));
    let start = match &opts.init {
        Some(v) if v.len() == sys.p() => v.clone(),
        Some(v) => {
            return Err(MomentError::Layout(crate::moments::LayoutMismatch(format!("init length {} != {}", v.len(), sys.p())))
                .into())
        }
        None => DVector::zeros(sys.p()),
    };
    opts.cov.lags(n)?;

    let identity = DMatrix::identity(q, q);
    let (omega, kind, fallback, first) = match scheme {
        WeightScheme::Identity => (identity, WeightKind::Identity, false, None),
        WeightScheme::Fixed(w) => {
            if w.shape() != (q, q) {
                return Err(GmmError::WeightShape { expected: q, found: w.nrows() });
            }
            let asym = (&w - w.transpose()).amax();
            if asym > 1e-10 * w.amax().max(1.0) {
                return Err(GmmError::NonPsdWeight);
            }
            (w, WeightKind::Fixed, false, None)
        }
        WeightScheme::TwoStep => {
            let stage1 = minimize(sys, panel, &identity, start.clone(), opts)?;
            let s1 = estimate_s(sys, panel, &stage1.theta, opts.cov, opts.center)?;
            let cond = condition_number(&s1.s);
            match linalg::inverse(&s1.s) {
                Ok(inv) if cond <= linalg::COND_LIMIT => (linalg::symmetrize(&inv), WeightKind::TwoStep, false, Some(stage1)),
                _ => (identity, WeightKind::TwoStep, true, Some(stage1)),
            }
        }
    };
    let root = weight_root(&omega).ok_or(GmmError::NonPsdWeight)?;
    let result = match first {
        Some(stage1) if fallback => stage1,
        Some(stage1) => minimize(sys, panel, &omega, stage1.theta, opts)?,
        None => minimize(sys, panel, &omega, start, opts)?,
    };
    let theta = result.theta;
    check_lift_baselines(sys, panel, &theta)?;

    let (m_bar, g_hat) = moments_and_jacobian(sys, panel, &theta);
    let s_est = estimate_s(sys, panel, &theta, opts.cov, opts.center)?;
    let vcov = sandwich(&g_hat, &s_est.s, &omega, n)?;
    let se = DVector::from_iterator(vcov.nrows(), vcov.diagonal().iter().map(|v| v.max(0.0).sqrt()));
    let j = n as f64 * m_bar.dot(&(&omega * &m_bar));
    let df = sys.df();
    let efficient = kind == WeightKind::TwoStep && !fallback;
    let j_pvalue = (df > 0 && efficient).then(|| chi2_sf(j, df));
    let grad_norm = (g_hat.transpose() * (&omega * &m_bar)).norm();
    Ok(GmmFit {
        names: sys.param_names(),
        params: sys.layout().unflatten(&theta).map_err(MomentError::from)?,
        theta,
        se,
        vcov,
        diagnostics: Diagnostics {
            condition: condition_number(&(&root * &g_hat)),
            psd_clipped: s_est.clipped,
            weight_fallback: fallback,
            bandwidth: s_est.bandwidth,
            grad_norm,
            objective: objective(&m_bar, &root),
        },
        s_hat: s_est.s,
        g_hat,
        omega,
        m_bar,
        j: j.max(0.0),
        df,
        j_pvalue,
        converged: result.converged,
        iterations: result.iterations,
        periods: n,
        weighting: kind,
        tau_index: sys.layout().tau_at(),
    })
}

struct Minimum {
    theta: DVector<f64>,
    iterations: usize,
    converged: bool,
}

/// Least-squares step on the coordinates in `cols` only, others held fixed.
fn partial_step(
    sys: &MomentSystem,
    panel: &Panel,
    root: &DMatrix<f64>,
    theta: &DVector<f64>,
    cols: &[usize],
) -> Result<DVector<f64>, linalg::Singular> {
    let (m, g) = moments_and_jacobian(sys, panel, theta);
    let sub = DMatrix::from_fn(g.nrows(), cols.len(), |r, c| g[(r, cols[c])]);
    let (delta, _) = least_squares(&(root * sub), &(root * m))?;
    let mut next = theta.clone();
    for (k, &c) in cols.iter().enumerate() {
        next[c] -= delta[k];
    }
    Ok(next)
}

/// Coordinates that enter the moments multiplied by other parameters.
fn bilinear_coords(sys: &MomentSystem) -> Vec<usize> {
    let l = sys.layout();
    let mut out: Vec<usize> = (l.xi_w_start()..l.psi_start() + l.psi_rows * l.psi_cols).collect();
    let start = l.extra_start();
    out.extend(l.extra.iter().enumerate().filter(|(_, e)| e.kind == ExtraKind::Lift).map(|(k, _)| start + k));
    out
}

fn singular(e: linalg::Singular) -> GmmError {
    GmmError::SingularSystem { what: "weighted Jacobian", condition: e.condition }
}

fn minimize(
    sys: &MomentSystem,
    panel: &Panel,
    omega: &DMatrix<f64>,
    start: DVector<f64>,
    opts: &SolveOptions,
) -> Result<Minimum, GmmError> {
    let root = weight_root(omega).ok_or(GmmError::NonPsdWeight)?;
    let mut theta = start;
    if !sys.is_affine() {
        // Staged start: bilinear block given the rest (skipped while its
        // Jacobian is degenerate), then the linear block, then the bilinear
        // block again.
        let nonlin = bilinear_coords(sys);
        let lin: Vec<usize> = (0..sys.p()).filter(|c| !nonlin.contains(c)).collect();
        if let Ok(next) = partial_step(sys, panel, &root, &theta, &nonlin) {
            theta = next;
        }
        theta = partial_step(sys, panel, &root, &theta, &lin).map_err(singular)?;
        check_lift_baselines(sys, panel, &theta)?;
        if let Ok(next) = partial_step(sys, panel, &root, &theta, &nonlin) {
            theta = next;
        }
    }
    let mut m = sample_moments(sys, panel, &theta);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(GmmError::NonFiniteMoments);
    }
    let mut obj = objective(&m, &root);
    let mut grad_norm = f64::INFINITY;
    for it in 0..opts.max_iter {
        let (_, g) = moments_and_jacobian(sys, panel, &theta);
        grad_norm = (g.transpose() * (omega * &m)).norm();
        if grad_norm < opts.tol {
            return Ok(Minimum { theta, iterations: it, converged: true });
        }
        let (delta, _) = least_squares(&(&root * &g), &(&root * &m)).map_err(singular)?;
        if sys.is_affine() {
            // The full step is the closed-form linear GMM solution.
            theta -= &delta;
            return Ok(Minimum { theta, iterations: it + 1, converged: true });
        }
        let tiny = delta.norm() <= 1e-10 * (1.0 + theta.norm());
        // Reduction promised by the linearised model; once it is lost in
        // rounding the iterate is stationary to working precision.
        let predicted = obj - objective(&(&m - &g * &delta), &root);
        let flat = predicted <= 1e-10 * obj;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=30 {
            let cand = &theta - &delta * step;
            let mc = sample_moments(sys, panel, &cand);
            let oc = objective(&mc, &root);
            if oc.is_finite() && oc < obj {
                theta = cand;
                m = mc;
                obj = oc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if tiny {
            return Ok(Minimum { theta, iterations: it + 1, converged: true });
        }
        if !accepted && flat {
            // The objective no longer resolves the remaining decrease: take
            // the full step while it still shrinks the gradient.
            let cand = &theta - &delta;
            let mc = sample_moments(sys, panel, &cand);
            let (_, gc) = moments_and_jacobian(sys, panel, &cand);
            if (gc.transpose() * (omega * &mc)).norm() < grad_norm {
                theta = cand;
                obj = objective(&mc, &root);
                m = mc;
                continue;
            }
            return Ok(Minimum { theta, iterations: it + 1, converged: true });
        }
        if !accepted {
            return Err(GmmError::NoConvergence { iterations: it + 1, grad_norm });
        }
    }
    Err(GmmError::NoConvergence { iterations: opts.max_iter, grad_norm })
}

/// Every lift window needs a synthetic-control mean away from zero.
fn check_lift_baselines(sys: &MomentSystem, panel: &Panel, theta: &DVector<f64>) -> Result<(), GmmError> {
    for e in sys.layout().extra.iter().filter(|e| e.kind == ExtraKind::Lift) {
        let rows: Vec<usize> = (0..panel.periods()).filter(|t| e.t1 < t + 1 && t + 1 < e.t2).collect();
        let base: Vec<f64> = rows.iter().map(|&t| sys.baseline(panel, t, theta)).collect();
        let scale: Vec<f64> = rows.iter().map(|&t| panel.y()[t].abs()).collect();
        let mean = linalg::mean(&base);
        if !(mean.abs() > 1e-8 * (1.0 + linalg::mean(&scale))) {
            return Err(GmmError::DegenerateBaseline { t1: e.t1, t2: e.t2, mean });
        }
    }
    Ok(())
}

fn chi2_sf(j: f64, df: usize) -> f64 {
    let dist = ChiSquared::new(df as f64).expect("df >= 1");
    (1.0 - dist.cdf(j.max(0.0))).clamp(0.0, 1.0)
}

/// Hansen's over-identification test.
pub fn j_test(fit: &GmmFit) -> Result<JTest, GmmError> {
    if fit.df == 0 {
        return Err(GmmError::NotOveridentified);
    }
    if fit.weighting != WeightKind::TwoStep || fit.diagnostics.weight_fallback {
        return Err(GmmError::InvalidWeighting);
    }
    Ok(JTest { j: fit.j, df: fit.df, pvalue: chi2_sf(fit.j, fit.df) })
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(p)
}

/// Wald interval `θ̂_i ± z·se_i` at confidence `level`.
pub fn confidence_interval(fit: &GmmFit, index: usize, level: f64) -> (f64, f64) {
    let z = normal_quantile(1.0 - (1.0 - level) / 2.0);
    let (c, se) = (fit.theta[index], fit.se[index]);
    (c - z * se, c + z * se)
}
