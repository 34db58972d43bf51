//! Long-run variance of the moment contributions and the sandwich formula.

use super::GmmError;
use crate::linalg::{self, clip_psd, pairwise_sum, symmetrize};
use crate::moments::MomentSystem;
use crate::panel::Panel;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;

/// HAC truncation lag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// `floor(4·(T/100)^{2/9})`.
    Auto,
    Fixed(usize),
}

/// How `Ŝ` is estimated: i.i.d.-robust outer products, or Bartlett-kernel HAC.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovSpec {
    #[default]
    Robust,
    Hac { bandwidth: Bandwidth },
}

impl fmt::Display for CovSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovSpec::Robust => f.write_str("Robust"),
            CovSpec::Hac { bandwidth: Bandwidth::Auto } => f.write_str("HAC(auto)"),
            CovSpec::Hac { bandwidth: Bandwidth::Fixed(b) } => write!(f, "HAC({b})"),
        }
    }
}

/// Newey–West rule of thumb `floor(4·(T/100)^{2/9})`, kept below `T`.
pub fn auto_bandwidth(periods: usize) -> usize {
    let b = (4.0 * (periods as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize;
    b.min(periods.saturating_sub(1))
}

impl CovSpec {
    pub fn hac_auto() -> Self {
        CovSpec::Hac { bandwidth: Bandwidth::Auto }
    }

    /// Lag count for a sample of `periods` observations (0 for Robust).
    pub fn lags(&self, periods: usize) -> Result<usize, GmmError> {
        match *self {
            CovSpec::Robust => Ok(0),
            CovSpec::Hac { bandwidth: Bandwidth::Auto } => Ok(auto_bandwidth(periods)),
            CovSpec::Hac { bandwidth: Bandwidth::Fixed(b) } if b < periods => Ok(b),
            CovSpec::Hac { bandwidth: Bandwidth::Fixed(b) } => Err(GmmError::BadBandwidth { bandwidth: b, periods }),
        }
    }
}

/// An estimate of `S` with its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SEstimate {
    pub s: DMatrix<f64>,
    pub bandwidth: usize,
    /// Negative eigenvalues were clipped to restore positive semi-definiteness.
    pub clipped: bool,
}

/// Bartlett-weighted long-run covariance of the rows of `u` (a `T × q`
/// series): `Γ̂0 + Σ_{j≤b} (1 − j/(b+1))(Γ̂_j + Γ̂_j′)`, each `Γ̂_j` divided by `T`.
///
/// With `center` the series is demeaned first. `bandwidth = 0` gives the
/// plain outer-product estimator.
pub fn long_run_variance(u: &DMatrix<f64>, bandwidth: usize, center: bool) -> SEstimate {
    let (n, q) = u.shape();
    let uc = if center {
        let mu = linalg::column_means(u);
        DMatrix::from_fn(n, q, |t, j| u[(t, j)] - mu[j])
    } else {
        u.clone()
    };
    let gamma = |lag: usize| {
        pairwise_sum(lag..n, q, q, &|t, out: &mut DMatrix<f64>| {
            for a in 0..q {
                let ua = uc[(t, a)];
                if ua == 0.0 {
                    continue;
                }
                for b in 0..q {
                    out[(a, b)] = ua * uc[(t - lag, b)];
                }
            }
        }) / n as f64
    };
    let mut s = gamma(0);
    for lag in 1..=bandwidth {
        let w = 1.0 - lag as f64 / (bandwidth as f64 + 1.0);
        let g = gamma(lag);
        s += (&g + g.transpose()) * w;
    }
    let (s, clipped) = clip_psd(&symmetrize(&s));
    SEstimate { s, bandwidth, clipped }
}

/// `Ŝ` for the moment contributions of `sys` at `theta`.
pub fn estimate_s(
    sys: &MomentSystem,
    panel: &Panel,
    theta: &DVector<f64>,
    cov: CovSpec,
    center: bool,
) -> Result<SEstimate, GmmError> {
    let b = cov.lags(panel.periods())?;
    Ok(long_run_variance(&sys.moment_matrix(panel, theta), b, center))
}

/// `(G′ΩG)⁻¹ G′ΩSΩG (G′ΩG)⁻¹ / T`, symmetrised and clipped to PSD.
pub fn sandwich(g: &DMatrix<f64>, s: &DMatrix<f64>, omega: &DMatrix<f64>, periods: usize) -> Result<DMatrix<f64>, GmmError> {
    let og = omega * g;
    let bread = g.transpose() * &og;
    let inv = linalg::inverse(&bread).map_err(|e| GmmError::SingularSystem { what: "G'WG", condition: e.condition })?;
    let meat = og.transpose() * s * &og;
    let v = &inv * meat * &inv / periods as f64;
    Ok(clip_psd(&v).0)
}
