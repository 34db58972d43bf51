//! Per-period moment vectors for the seven estimators, with analytic Jacobians.
//!
//! A [`MomentSystem`] maps `(panel, t, θ)` to the moment contribution `U_t(θ)`
//! of one period and to its derivative `∂U_t/∂θ′`. The GMM engine only ever
//! sees this interface. Every row is a product of an instrument, a residual and
//! a regime indicator: pre-period rows vanish for `t > T0`, post-period rows
//! vanish for `t ≤ T0`.

mod params;
mod systems;

pub use params::{ExtraKind, ExtraParam, LayoutMismatch, ParamLayout, ParamVector, Xi};

use crate::panel::{Panel, PanelDims};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MomentError {
    #[error("{0} needs at least one surrogate proxy (z1 column)")]
    MissingProxies(EstimatorKind),
    #[error("{0} needs covariates cy, cw and cx")]
    MissingCovariates(EstimatorKind),
    #[error("under-identified: {what} has {q} moment rows for {p} parameters")]
    UnderIdentified { what: String, q: usize, p: usize },
    #[error("window ({t1}, {t2}) must satisfy T0={t0} <= t1 < t2 <= T+1={end} and contain a period")]
    EmptyWindow { t1: usize, t2: usize, t0: usize, end: usize },
    #[error("{0} has no parameters to form an effect series")]
    NoEffectSeries(EstimatorKind),
    #[error("panel shape {found:?} differs from the shape the system was built for {expected:?}")]
    PanelMismatch { expected: Box<(PanelDims, usize)>, found: Box<(PanelDims, usize)> },
    #[error(transparent)]
    Layout(#[from] LayoutMismatch),
}

/// Which estimator a moment system implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "sc")]
    Sc,
    #[serde(rename = "sc-s")]
    ScS,
    #[serde(rename = "pi")]
    Pi,
    #[serde(rename = "pi-p")]
    PiP,
    #[serde(rename = "pi-s")]
    PiS,
    #[serde(rename = "pi-s-cov")]
    PiSCov,
    #[serde(rename = "pi-s-contam")]
    PiSContam,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 7] = [
        EstimatorKind::Sc,
        EstimatorKind::ScS,
        EstimatorKind::Pi,
        EstimatorKind::PiP,
        EstimatorKind::PiS,
        EstimatorKind::PiSCov,
        EstimatorKind::PiSContam,
    ];

    /// The five estimators compared in the simulation tables.
    pub const TABLE: [EstimatorKind; 5] =
        [EstimatorKind::Sc, EstimatorKind::ScS, EstimatorKind::Pi, EstimatorKind::PiP, EstimatorKind::PiS];

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Sc => "SC",
            EstimatorKind::ScS => "SC-S",
            EstimatorKind::Pi => "PI",
            EstimatorKind::PiP => "PI-P",
            EstimatorKind::PiS => "PI-S",
            EstimatorKind::PiSCov => "PI-S-COV",
            EstimatorKind::PiSContam => "PI-S-CONTAM",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            EstimatorKind::Sc => "sc",
            EstimatorKind::ScS => "sc-s",
            EstimatorKind::Pi => "pi",
            EstimatorKind::PiP => "pi-p",
            EstimatorKind::PiS => "pi-s",
            EstimatorKind::PiSCov => "pi-s-cov",
            EstimatorKind::PiSContam => "pi-s-contam",
        }
    }

    pub fn uses_surrogate_proxies(self) -> bool {
        matches!(self, EstimatorKind::PiP | EstimatorKind::PiS | EstimatorKind::PiSCov | EstimatorKind::PiSContam)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.slug() == norm)
            .ok_or_else(|| format!("unknown estimator `{s}` (expected one of sc, sc-s, pi, pi-p, pi-s, pi-s-cov, pi-s-contam)"))
    }
}

/// Choice of the instrument functions `g0`, `g1` applied to the proxies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentSpec {
    /// Append a constant and the elementwise squares of the proxies.
    #[serde(default)]
    pub augment: bool,
    /// Also use the donor proxies `Z0` as post-period instruments (PI-S and
    /// the contaminated variant only).
    #[serde(default)]
    pub g1_includes_z0: bool,
}

impl InstrumentSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn augmented() -> Self {
        Self { augment: true, g1_includes_z0: false }
    }

    pub fn describe(&self) -> String {
        let base = if self.augment { "proxies, constant, squared proxies" } else { "proxies" };
        if self.g1_includes_z0 {
            format!("{base}; post rows also use z0")
        } else {
            base.to_string()
        }
    }
}

/// A parameter-indexed family of per-period moment vectors.
#[derive(Debug, Clone)]
pub struct MomentSystem {
    kind: EstimatorKind,
    layout: ParamLayout,
    instruments: InstrumentSpec,
    dims: PanelDims,
    t0: usize,
    periods: usize,
    g0_len: usize,
    g1_len: usize,
    base_rows: usize,
    labels: Vec<String>,
}

impl MomentSystem {
    /// Builds the moment system of `kind` for panels shaped like `panel`.
    pub fn build(kind: EstimatorKind, panel: &Panel, instruments: InstrumentSpec) -> Result<Self, MomentError> {
        systems::build(kind, panel, instruments)
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }
    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }
    pub fn instruments(&self) -> &InstrumentSpec {
        &self.instruments
    }
    /// Moment dimension `q`.
    pub fn q(&self) -> usize {
        self.labels.len()
    }
    /// Parameter dimension `p`.
    pub fn p(&self) -> usize {
        self.layout.len()
    }
    /// Over-identification degrees of freedom `q − p`.
    pub fn df(&self) -> usize {
        self.q() - self.p()
    }
    pub fn row_labels(&self) -> &[String] {
        &self.labels
    }
    pub fn param_names(&self) -> Vec<String> {
        self.layout.names()
    }
    pub fn t0(&self) -> usize {
        self.t0
    }

    /// Whether `U_t(θ)` is affine in `θ`. The covariate-adjusted and
    /// contaminated systems, and any system carrying a lift row, are bilinear.
    pub fn is_affine(&self) -> bool {
        !matches!(self.kind, EstimatorKind::PiSCov | EstimatorKind::PiSContam)
            && self.layout.extra.iter().all(|e| e.kind == ExtraKind::Window)
    }

    /// Rejects panels whose shape or treatment date differ from the build panel.
    pub fn check_panel(&self, panel: &Panel) -> Result<(), MomentError> {
        if panel.dims() != self.dims || panel.t0() != self.t0 || panel.periods() != self.periods {
            return Err(MomentError::PanelMismatch {
                expected: Box::new((self.dims, self.t0)),
                found: Box::new((panel.dims(), panel.t0())),
            });
        }
        Ok(())
    }

    /// One period's moment contribution `U_t(θ)`; `t` is a 0-based row.
    pub fn eval(&self, panel: &Panel, t: usize, theta: &DVector<f64>) -> DVector<f64> {
        let mut u = DVector::zeros(self.q());
        self.eval_into(panel, t, theta, u.as_mut_slice());
        u
    }

    /// `∂U_t/∂θ′`, a `q × p` matrix.
    pub fn jac(&self, panel: &Panel, t: usize, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.q(), self.p());
        let mut scratch = vec![0.0; self.q()];
        self.fill(panel, t, theta, &mut scratch, Some(&mut j));
        j
    }

    pub fn eval_into(&self, panel: &Panel, t: usize, theta: &DVector<f64>, out: &mut [f64]) {
        self.fill(panel, t, theta, out, None);
    }

    /// Writes `U_t(θ)` into `u` and, if given, `∂U_t/∂θ′` into `jac`.
    pub fn fill(&self, panel: &Panel, t: usize, theta: &DVector<f64>, u: &mut [f64], jac: Option<&mut DMatrix<f64>>) {
        debug_assert_eq!(theta.len(), self.p());
        debug_assert_eq!(u.len(), self.q());
        systems::fill(self, panel, t, theta.as_slice(), u, jac);
    }

    /// Sample moments for all periods as a `T × q` matrix.
    pub fn moment_matrix(&self, panel: &Panel, theta: &DVector<f64>) -> DMatrix<f64> {
        let (periods, q) = (panel.periods(), self.q());
        let mut u = DMatrix::zeros(periods, q);
        let mut row = vec![0.0; q];
        for t in 0..periods {
            row.iter_mut().for_each(|v| *v = 0.0);
            self.eval_into(panel, t, theta, &mut row);
            for (j, v) in row.iter().enumerate() {
                u[(t, j)] = *v;
            }
        }
        u
    }

    /// Appends a window-ATT row `(effect_t − τ_w)·1{t1 < t < t2}` and its
    /// parameter `τ_w`.
    pub fn add_window_att(&self, t1: usize, t2: usize) -> Result<Self, MomentError> {
        self.add_extra(ExtraKind::Window, t1, t2)
    }

    /// Appends a percentage-lift row `(effect_t − baseline_t·τ_lift)·1{t1 < t < t2}`
    /// and its parameter `τ_lift`.
    pub fn add_lift(&self, t1: usize, t2: usize) -> Result<Self, MomentError> {
        self.add_extra(ExtraKind::Lift, t1, t2)
    }

    fn add_extra(&self, kind: ExtraKind, t1: usize, t2: usize) -> Result<Self, MomentError> {
        let end = self.periods + 1;
        if !(self.t0 <= t1 && t1 < t2 && t2 <= end) || t2 - t1 < 2 {
            return Err(MomentError::EmptyWindow { t1, t2, t0: self.t0, end });
        }
        let mut next = self.clone();
        next.layout.extra.push(ExtraParam { kind, t1, t2 });
        let tag = match kind {
            ExtraKind::Window => "window",
            ExtraKind::Lift => "lift",
        };
        next.labels.push(format!("{tag}({t1},{t2})"));
        Ok(next)
    }

    /// Per-period treatment-effect series implied by `θ` (the quantity the
    /// window rows average), for 0-based row `t`.
    pub fn effect(&self, panel: &Panel, t: usize, theta: &DVector<f64>) -> f64 {
        systems::effect(self, panel, t, theta.as_slice(), None)
    }

    /// Synthetic-control level implied by `θ` (the lift denominator).
    pub fn baseline(&self, panel: &Panel, t: usize, theta: &DVector<f64>) -> f64 {
        systems::baseline(self, panel, t, theta.as_slice(), None)
    }

    /// Parameter vector at which the noiseless simulation design satisfies
    /// every moment: unit weights, unit effect, `Ψ` as supplied.
    pub fn truth(&self, psi: Option<&DMatrix<f64>>) -> DVector<f64> {
        let l = &self.layout;
        let mut th = DVector::zeros(l.len());
        for i in 0..l.alpha {
            th[l.alpha_start() + i] = 1.0;
        }
        for j in 0..l.gamma {
            th[l.gamma_start() + j] = 1.0;
        }
        for k in l.xi_y_start()..l.psi_start() {
            th[k] = 1.0;
        }
        if let Some(psi) = psi {
            for j in 0..l.psi_cols {
                for i in 0..l.psi_rows {
                    th[l.psi_at(i, j)] = psi[(i, j)];
                }
            }
        }
        if let Some(k) = l.tau_at() {
            th[k] = 1.0;
        }
        th
    }
}

/// PI-S: pre-period donor rows, post-period surrogate rows, surrogate ATT row.
pub fn build_pi_s(panel: &Panel, g: InstrumentSpec) -> Result<MomentSystem, MomentError> {
    MomentSystem::build(EstimatorKind::PiS, panel, g)
}

/// PI: pre-period donor rows and the synthetic-control ATT row.
pub fn build_pi(panel: &Panel) -> Result<MomentSystem, MomentError> {
    MomentSystem::build(EstimatorKind::Pi, panel, InstrumentSpec::identity())
}

/// PI-P: post-period rows only.
pub fn build_pi_p(panel: &Panel) -> Result<MomentSystem, MomentError> {
    MomentSystem::build(EstimatorKind::PiP, panel, InstrumentSpec::identity())
}

/// SC: OLS of `Y` on an intercept, a post dummy and the donors.
pub fn build_sc(panel: &Panel) -> Result<MomentSystem, MomentError> {
    MomentSystem::build(EstimatorKind::Sc, panel, InstrumentSpec::identity())
}

/// SC-S: OLS with post-period surrogates plus the surrogate ATT row.
pub fn build_sc_s(panel: &Panel) -> Result<MomentSystem, MomentError> {
    MomentSystem::build(EstimatorKind::ScS, panel, InstrumentSpec::identity())
}

/// PI-S with covariate adjustment.
pub fn build_pi_s_cov(panel: &Panel) -> Result<MomentSystem, MomentError> {
    MomentSystem::build(EstimatorKind::PiSCov, panel, InstrumentSpec::identity())
}

/// PI-S with contaminated surrogates.
pub fn build_pi_s_contam(panel: &Panel) -> Result<MomentSystem, MomentError> {
    MomentSystem::build(EstimatorKind::PiSContam, panel, InstrumentSpec::identity())
}

#[cfg(test)]
mod tests;
