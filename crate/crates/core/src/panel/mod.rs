//! The observed panel: one treated unit, its donors, surrogates and proxies.
//!
//! Rows are time periods. Periods are numbered `1..=T` in files and in every
//! user-facing message; internally row `t` (0-based) is period `t + 1`. A row
//! belongs to the post-intervention regime when its period is strictly greater
//! than `T0`.

mod csv;

pub use self::csv::{load_panel, read_panel, save_panel, write_panel, PanelSchema};

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unrecognised column `{0}`")]
    UnknownColumn(String),
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("non-finite value in column `{col}` at period {row}")]
    NonFiniteValue { row: usize, col: String },
    #[error("cannot parse `{value}` in column `{col}` at line {line}")]
    Parse { line: usize, col: String, value: String },
    #[error("treatment date T0={t0} must satisfy 1 < T0 < T={periods}")]
    BadT0 { t0: usize, periods: usize },
    #[error("`{name}` has {found} rows, expected {expected}")]
    RowCountMismatch { name: String, expected: usize, found: usize },
    #[error("period column out of sequence at line {line}: expected {expected}, found {found}")]
    BadTimeIndex { line: usize, expected: usize, found: String },
    #[error("panel needs at least one {0}")]
    Empty(&'static str),
    #[error("covariate tensor `{name}` has {found} units, expected {expected}")]
    CovariateUnits { name: &'static str, expected: usize, found: usize },
    #[error(transparent)]
    Csv(#[from] ::csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-unit covariates: a `T × units × dims` tensor stored row-major in time.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitCovariates {
    periods: usize,
    units: usize,
    dims: usize,
    data: Vec<f64>,
}

impl UnitCovariates {
    pub fn zeros(periods: usize, units: usize, dims: usize) -> Self {
        Self { periods, units, dims, data: vec![0.0; periods * units * dims] }
    }

    /// Builds the tensor from a closure `(t, unit, k) -> value` (all 0-based).
    pub fn from_fn(periods: usize, units: usize, dims: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(periods, units, dims);
        for t in 0..periods {
            for i in 0..units {
                for k in 0..dims {
                    out.data[(t * units + i) * dims + k] = f(t, i, k);
                }
            }
        }
        out
    }

    pub fn periods(&self) -> usize {
        self.periods
    }
    pub fn units(&self) -> usize {
        self.units
    }
    pub fn dims(&self) -> usize {
        self.dims
    }

    #[inline]
    pub fn get(&self, t: usize, unit: usize, k: usize) -> f64 {
        self.data[(t * self.units + unit) * self.dims + k]
    }

    #[inline]
    pub fn set(&mut self, t: usize, unit: usize, k: usize, v: f64) {
        self.data[(t * self.units + unit) * self.dims + k] = v;
    }

    /// Covariates of all units at period `t`, unit-major.
    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        let w = self.units * self.dims;
        &self.data[t * w..(t + 1) * w]
    }
}

/// Column counts of each block of a panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelDims {
    pub donors: usize,
    pub surrogates: usize,
    pub donor_proxies: usize,
    pub surrogate_proxies: usize,
    #[serde(default)]
    pub cy: usize,
    #[serde(default)]
    pub cw: usize,
    #[serde(default)]
    pub cx: usize,
}

/// A validated, immutable panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    t0: usize,
    y: DVector<f64>,
    w: DMatrix<f64>,
    x: DMatrix<f64>,
    z0: DMatrix<f64>,
    z1: DMatrix<f64>,
    cy: Option<DMatrix<f64>>,
    cw: Option<UnitCovariates>,
    cx: Option<UnitCovariates>,
}

/// Optional covariate blocks attached to a panel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Covariates {
    pub cy: Option<DMatrix<f64>>,
    pub cw: Option<UnitCovariates>,
    pub cx: Option<UnitCovariates>,
}

fn check_rows(name: &str, found: usize, expected: usize) -> Result<(), PanelError> {
    if found == expected {
        Ok(())
    } else {
        Err(PanelError::RowCountMismatch { name: name.to_string(), expected, found })
    }
}

fn check_finite(prefix: &str, m: &DMatrix<f64>) -> Result<(), PanelError> {
    for j in 0..m.ncols() {
        for t in 0..m.nrows() {
            if !m[(t, j)].is_finite() {
                return Err(PanelError::NonFiniteValue { row: t + 1, col: format!("{prefix}{}", j + 1) });
            }
        }
    }
    Ok(())
}

impl Panel {
    /// Validates and assembles a panel without covariates.
    pub fn new(
        t0: usize,
        y: DVector<f64>,
        w: DMatrix<f64>,
        x: DMatrix<f64>,
        z0: DMatrix<f64>,
        z1: DMatrix<f64>,
    ) -> Result<Self, PanelError> {
        Self::with_covariates(t0, y, w, x, z0, z1, Covariates::default())
    }

    pub fn with_covariates(
        t0: usize,
        y: DVector<f64>,
        w: DMatrix<f64>,
        x: DMatrix<f64>,
        z0: DMatrix<f64>,
        z1: DMatrix<f64>,
        covariates: Covariates,
    ) -> Result<Self, PanelError> {
        let periods = y.len();
        if !(t0 > 1 && t0 < periods) {
            return Err(PanelError::BadT0 { t0, periods });
        }
        check_rows("w", w.nrows(), periods)?;
        check_rows("x", x.nrows(), periods)?;
        check_rows("z0", z0.nrows(), periods)?;
        check_rows("z1", z1.nrows(), periods)?;
        if w.ncols() == 0 {
            return Err(PanelError::Empty("donor"));
        }
        if x.ncols() == 0 {
            return Err(PanelError::Empty("surrogate"));
        }
        if z0.ncols() == 0 {
            return Err(PanelError::Empty("donor proxy"));
        }
        for t in 0..periods {
            if !y[t].is_finite() {
                return Err(PanelError::NonFiniteValue { row: t + 1, col: "y".into() });
            }
        }
        check_finite("w", &w)?;
        check_finite("x", &x)?;
        check_finite("z0_", &z0)?;
        check_finite("z1_", &z1)?;
        let Covariates { cy, cw, cx } = covariates;
        if let Some(cy) = &cy {
            check_rows("cy", cy.nrows(), periods)?;
            check_finite("cy_", cy)?;
        }
        for (name, tensor, units) in [("cw", &cw, w.ncols()), ("cx", &cx, x.ncols())] {
            if let Some(c) = tensor {
                check_rows(name, c.periods(), periods)?;
                if c.units() != units {
                    return Err(PanelError::CovariateUnits { name, expected: units, found: c.units() });
                }
                for t in 0..periods {
                    for i in 0..c.units() {
                        for k in 0..c.dims() {
                            if !c.get(t, i, k).is_finite() {
                                return Err(PanelError::NonFiniteValue {
                                    row: t + 1,
                                    col: format!("{name}_{}_{}", i + 1, k + 1),
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(Self { t0, y, w, x, z0, z1, cy, cw, cx })
    }

    /// Total number of periods `T`.
    pub fn periods(&self) -> usize {
        self.y.len()
    }
    /// Last pre-intervention period `T0`.
    pub fn t0(&self) -> usize {
        self.t0
    }
    pub fn donors(&self) -> usize {
        self.w.ncols()
    }
    pub fn surrogates(&self) -> usize {
        self.x.ncols()
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn z0(&self) -> &DMatrix<f64> {
        &self.z0
    }
    pub fn z1(&self) -> &DMatrix<f64> {
        &self.z1
    }
    pub fn cy(&self) -> Option<&DMatrix<f64>> {
        self.cy.as_ref()
    }
    pub fn cw(&self) -> Option<&UnitCovariates> {
        self.cw.as_ref()
    }
    pub fn cx(&self) -> Option<&UnitCovariates> {
        self.cx.as_ref()
    }

    pub fn has_covariates(&self) -> bool {
        self.cy.is_some() && self.cw.is_some() && self.cx.is_some()
    }

    pub fn dims(&self) -> PanelDims {
        PanelDims {
            donors: self.w.ncols(),
            surrogates: self.x.ncols(),
            donor_proxies: self.z0.ncols(),
            surrogate_proxies: self.z1.ncols(),
            cy: self.cy.as_ref().map_or(0, |c| c.ncols()),
            cw: self.cw.as_ref().map_or(0, |c| c.dims()),
            cx: self.cx.as_ref().map_or(0, |c| c.dims()),
        }
    }

    /// Whether 0-based row `t` lies after the intervention.
    #[inline]
    pub fn is_post(&self, t: usize) -> bool {
        t + 1 > self.t0
    }

    /// Number of post-intervention periods `T − T0`.
    pub fn post_len(&self) -> usize {
        self.periods() - self.t0
    }

    /// Same data with a different treatment date.
    pub fn with_t0(&self, t0: usize) -> Result<Self, PanelError> {
        let periods = self.periods();
        if !(t0 > 1 && t0 < periods) {
            return Err(PanelError::BadT0 { t0, periods });
        }
        Ok(Self { t0, ..self.clone() })
    }

    /// Copy with the listed surrogate-proxy matrix replaced.
    pub fn with_surrogate_proxies(&self, z1: DMatrix<f64>) -> Result<Self, PanelError> {
        check_rows("z1", z1.nrows(), self.periods())?;
        check_finite("z1_", &z1)?;
        Ok(Self { z1, ..self.clone() })
    }

    /// Copy with the donor-proxy matrix replaced.
    pub fn with_donor_proxies(&self, z0: DMatrix<f64>) -> Result<Self, PanelError> {
        check_rows("z0", z0.nrows(), self.periods())?;
        if z0.ncols() == 0 {
            return Err(PanelError::Empty("donor proxy"));
        }
        check_finite("z0_", &z0)?;
        Ok(Self { z0, ..self.clone() })
    }
}

/// A borrowed, contiguous range of periods of a [`Panel`].
#[derive(Debug, Clone, Copy)]
pub struct PanelView<'a> {
    panel: &'a Panel,
    rows: (usize, usize),
}

impl<'a> PanelView<'a> {
    pub fn panel(&self) -> &'a Panel {
        self.panel
    }
    pub fn len(&self) -> usize {
        self.rows.1 - self.rows.0
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// 0-based row indices covered by the view.
    pub fn rows(&self) -> Range<usize> {
        self.rows.0..self.rows.1
    }
    /// 1-based periods covered by the view.
    pub fn periods(&self) -> Range<usize> {
        self.rows.0 + 1..self.rows.1 + 1
    }
    pub fn y(&self) -> DVectorView<'a, f64> {
        self.panel.y.rows(self.rows.0, self.len())
    }
    pub fn w(&self) -> DMatrixView<'a, f64> {
        self.panel.w.rows(self.rows.0, self.len())
    }
    pub fn x(&self) -> DMatrixView<'a, f64> {
        self.panel.x.rows(self.rows.0, self.len())
    }
    pub fn z0(&self) -> DMatrixView<'a, f64> {
        self.panel.z0.rows(self.rows.0, self.len())
    }
    pub fn z1(&self) -> DMatrixView<'a, f64> {
        self.panel.z1.rows(self.rows.0, self.len())
    }
}

/// Splits a panel into its pre-intervention (`1..=T0`) and post-intervention
/// (`T0+1..=T`) periods. The views borrow the panel.
pub fn split_pre_post(panel: &Panel) -> (PanelView<'_>, PanelView<'_>) {
    let t0 = panel.t0;
    (
        PanelView { panel, rows: (0, t0) },
        PanelView { panel, rows: (t0, panel.periods()) },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(periods: usize, t0: usize) -> Result<Panel, PanelError> {
        let col = |off: f64| DMatrix::from_fn(periods, 1, |t, _| t as f64 + off);
        Panel::new(t0, DVector::from_fn(periods, |t, _| t as f64), col(0.1), col(0.2), col(0.3), col(0.4))
    }

    #[test]
    fn split_lengths() {
        let p = toy(200, 100).unwrap();
        let (pre, post) = split_pre_post(&p);
        assert_eq!((pre.len(), post.len()), (100, 100));
        let p = toy(3, 2).unwrap();
        let (pre, post) = split_pre_post(&p);
        assert_eq!((pre.len(), post.len()), (2, 1));
        assert_eq!(post.periods(), 3..4);
        assert_eq!(post.y()[0], 2.0);
    }

    #[test]
    fn split_partitions_periods() {
        for (periods, t0) in [(6, 3), (10, 2), (10, 9)] {
            let p = toy(periods, t0).unwrap();
            let (pre, post) = split_pre_post(&p);
            let mut all: Vec<usize> = pre.periods().chain(post.periods()).collect();
            all.dedup();
            assert_eq!(all, (1..=periods).collect::<Vec<_>>());
            assert!(post.periods().all(|s| s > t0));
            assert!(pre.periods().all(|s| s <= t0));
        }
    }

    #[test]
    fn t0_bounds() {
        assert!(matches!(toy(6, 1), Err(PanelError::BadT0 { t0: 1, periods: 6 })));
        assert!(matches!(toy(6, 6), Err(PanelError::BadT0 { .. })));
        assert!(toy(6, 5).is_ok());
    }

    #[test]
    fn row_count_mismatch_rejected() {
        let y = DVector::zeros(5);
        let ok = DMatrix::zeros(5, 1);
        let short = DMatrix::zeros(4, 1);
        let err = Panel::new(2, y, ok.clone(), short, ok.clone(), ok).unwrap_err();
        assert!(matches!(err, PanelError::RowCountMismatch { ref name, expected: 5, found: 4 } if name == "x"));
    }

    #[test]
    fn non_finite_rejected() {
        let mut w = DMatrix::zeros(5, 2);
        w[(3, 1)] = f64::NAN;
        let z = DMatrix::zeros(5, 1);
        let err = Panel::new(2, DVector::zeros(5), w, z.clone(), z.clone(), z).unwrap_err();
        assert!(matches!(err, PanelError::NonFiniteValue { row: 4, ref col } if col == "w2"));
    }

    #[test]
    fn post_indicator_is_strict() {
        let p = toy(6, 3).unwrap();
        let post: Vec<bool> = (0..6).map(|t| p.is_post(t)).collect();
        assert_eq!(post, [false, false, false, true, true, true]);
    }
}
