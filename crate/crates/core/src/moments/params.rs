use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// Covariate loadings `(ξ_Y, ξ_W, ξ_X)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Xi {
    pub y: DVector<f64>,
    pub w: DVector<f64>,
    pub x: DVector<f64>,
}

/// Structured view of a parameter vector.
///
/// Absent blocks are `None` (or empty). The flat layout used by the solver is
/// `alpha0 | shift | alpha | gamma | xi | vec(psi) | tau | extra`, with `psi`
/// vectorised column by column.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamVector {
    pub alpha0: Option<f64>,
    /// Post-period level shift of the surrogate regression.
    pub shift: Option<f64>,
    pub alpha: DVector<f64>,
    pub gamma: Option<DVector<f64>>,
    pub xi: Option<Xi>,
    pub psi: Option<DMatrix<f64>>,
    pub tau: Option<f64>,
    /// Window ATTs and lifts, in the order they were appended.
    pub extra: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExtraKind {
    Window,
    Lift,
}

/// An appended scalar parameter and its averaging window `t1 < t < t2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ExtraParam {
    pub kind: ExtraKind,
    pub t1: usize,
    pub t2: usize,
}

/// Block sizes of a parameter vector, which fix the flat layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamLayout {
    pub alpha0: bool,
    pub shift: bool,
    pub alpha: usize,
    pub gamma: usize,
    pub xi_y: usize,
    pub xi_w: usize,
    pub xi_x: usize,
    pub psi_rows: usize,
    pub psi_cols: usize,
    pub tau: bool,
    pub extra: Vec<ExtraParam>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("parameter vector does not match layout: {0}")]
pub struct LayoutMismatch(pub String);

impl ParamLayout {
    pub(crate) fn base(alpha: usize) -> Self {
        Self {
            alpha0: false,
            shift: false,
            alpha,
            gamma: 0,
            xi_y: 0,
            xi_w: 0,
            xi_x: 0,
            psi_rows: 0,
            psi_cols: 0,
            tau: true,
            extra: Vec::new(),
        }
    }

    pub fn has_xi(&self) -> bool {
        self.xi_y + self.xi_w + self.xi_x > 0
    }

    pub fn alpha0_at(&self) -> Option<usize> {
        self.alpha0.then_some(0)
    }
    pub fn shift_at(&self) -> Option<usize> {
        self.shift.then_some(self.alpha0 as usize)
    }
    pub fn alpha_start(&self) -> usize {
        self.alpha0 as usize + self.shift as usize
    }
    pub fn gamma_start(&self) -> usize {
        self.alpha_start() + self.alpha
    }
    pub fn xi_y_start(&self) -> usize {
        self.gamma_start() + self.gamma
    }
    pub fn xi_w_start(&self) -> usize {
        self.xi_y_start() + self.xi_y
    }
    pub fn xi_x_start(&self) -> usize {
        self.xi_w_start() + self.xi_w
    }
    pub fn psi_start(&self) -> usize {
        self.xi_x_start() + self.xi_x
    }
    /// Flat index of `Ψ[i, j]`.
    pub fn psi_at(&self, i: usize, j: usize) -> usize {
        self.psi_start() + j * self.psi_rows + i
    }
    pub fn tau_at(&self) -> Option<usize> {
        self.tau.then_some(self.psi_start() + self.psi_rows * self.psi_cols)
    }
    pub fn extra_start(&self) -> usize {
        self.psi_start() + self.psi_rows * self.psi_cols + self.tau as usize
    }

    /// Total parameter count `p`.
    pub fn len(&self) -> usize {
        self.extra_start() + self.extra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Human-readable name of every flat coordinate (1-based unit indices).
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.len());
        if self.alpha0 {
            out.push("alpha0".to_string());
        }
        if self.shift {
            out.push("shift".to_string());
        }
        out.extend((1..=self.alpha).map(|i| format!("alpha[{i}]")));
        out.extend((1..=self.gamma).map(|i| format!("gamma[{i}]")));
        out.extend((1..=self.xi_y).map(|i| format!("xi_y[{i}]")));
        out.extend((1..=self.xi_w).map(|i| format!("xi_w[{i}]")));
        out.extend((1..=self.xi_x).map(|i| format!("xi_x[{i}]")));
        for j in 1..=self.psi_cols {
            out.extend((1..=self.psi_rows).map(|i| format!("psi[{i},{j}]")));
        }
        if self.tau {
            out.push("tau".to_string());
        }
        for e in &self.extra {
            out.push(match e.kind {
                ExtraKind::Window => format!("tau_window[{},{}]", e.t1, e.t2),
                ExtraKind::Lift => format!("tau_lift[{},{}]", e.t1, e.t2),
            });
        }
        out
    }

    pub fn flatten(&self, v: &ParamVector) -> Result<DVector<f64>, LayoutMismatch> {
        let mismatch = |what: &str| LayoutMismatch(what.to_string());
        let mut out = Vec::with_capacity(self.len());
        match (self.alpha0, v.alpha0) {
            (true, Some(a)) => out.push(a),
            (false, None) => {}
            _ => return Err(mismatch("alpha0")),
        }
        match (self.shift, v.shift) {
            (true, Some(a)) => out.push(a),
            (false, None) => {}
            _ => return Err(mismatch("shift")),
        }
        if v.alpha.len() != self.alpha {
            return Err(mismatch("alpha"));
        }
        out.extend(v.alpha.iter());
        match &v.gamma {
            Some(g) if g.len() == self.gamma && self.gamma > 0 => out.extend(g.iter()),
            None if self.gamma == 0 => {}
            _ => return Err(mismatch("gamma")),
        }
        match &v.xi {
            Some(xi) if self.has_xi() => {
                if xi.y.len() != self.xi_y || xi.w.len() != self.xi_w || xi.x.len() != self.xi_x {
                    return Err(mismatch("xi"));
                }
                out.extend(xi.y.iter().chain(xi.w.iter()).chain(xi.x.iter()));
            }
            None if !self.has_xi() => {}
            _ => return Err(mismatch("xi")),
        }
        match &v.psi {
            Some(psi) if psi.shape() == (self.psi_rows, self.psi_cols) && self.psi_rows * self.psi_cols > 0 => {
                out.extend(psi.iter())
            }
            None if self.psi_rows * self.psi_cols == 0 => {}
            _ => return Err(mismatch("psi")),
        }
        match (self.tau, v.tau) {
            (true, Some(t)) => out.push(t),
            (false, None) => {}
            _ => return Err(mismatch("tau")),
        }
        if v.extra.len() != self.extra.len() {
            return Err(mismatch("extra"));
        }
        out.extend(v.extra.iter());
        Ok(DVector::from_vec(out))
    }

    pub fn unflatten(&self, flat: &DVector<f64>) -> Result<ParamVector, LayoutMismatch> {
        if flat.len() != self.len() {
            return Err(LayoutMismatch(format!("length {} != {}", flat.len(), self.len())));
        }
        let seg = |start: usize, n: usize| DVector::from_iterator(n, flat.rows(start, n).iter().copied());
        Ok(ParamVector {
            alpha0: self.alpha0_at().map(|i| flat[i]),
            shift: self.shift_at().map(|i| flat[i]),
            alpha: seg(self.alpha_start(), self.alpha),
            gamma: (self.gamma > 0).then(|| seg(self.gamma_start(), self.gamma)),
            xi: self.has_xi().then(|| Xi {
                y: seg(self.xi_y_start(), self.xi_y),
                w: seg(self.xi_w_start(), self.xi_w),
                x: seg(self.xi_x_start(), self.xi_x),
            }),
            psi: (self.psi_rows * self.psi_cols > 0).then(|| {
                DMatrix::from_column_slice(
                    self.psi_rows,
                    self.psi_cols,
                    flat.rows(self.psi_start(), self.psi_rows * self.psi_cols).as_slice(),
                )
            }),
            tau: self.tau_at().map(|i| flat[i]),
            extra: flat.rows(self.extra_start(), self.extra.len()).iter().copied().collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout_strategy() -> impl Strategy<Value = ParamLayout> {
        (any::<bool>(), any::<bool>(), 1usize..4, 0usize..4, 0usize..3, 0usize..3, 0usize..3, 0usize..3, any::<bool>(), 0usize..3)
            .prop_map(|(a0, sh, alpha, gamma, xy, xw, xx, pc, tau, ne)| ParamLayout {
                alpha0: a0,
                shift: sh,
                alpha,
                gamma,
                xi_y: xy,
                xi_w: xw,
                xi_x: xx,
                psi_rows: if pc > 0 { alpha } else { 0 },
                psi_cols: pc,
                tau,
                extra: (0..ne).map(|i| ExtraParam { kind: ExtraKind::Window, t1: i, t2: i + 2 }).collect(),
            })
    }

    proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(layout in layout_strategy(), seed in any::<u64>()) {
            let p = layout.len();
            let flat = DVector::from_fn(p, |i, _| ((seed >> (i % 60)) as f64 * 1e-3).sin() + i as f64);
            let structured = layout.unflatten(&flat).unwrap();
            let back = layout.flatten(&structured).unwrap();
            prop_assert_eq!(back, flat);
            prop_assert_eq!(layout.names().len(), p);
        }
    }

    #[test]
    fn layout_order() {
        let mut l = ParamLayout::base(2);
        l.alpha0 = true;
        l.gamma = 1;
        l.psi_rows = 2;
        l.psi_cols = 1;
        assert_eq!(l.names(), ["alpha0", "alpha[1]", "alpha[2]", "gamma[1]", "psi[1,1]", "psi[2,1]", "tau"]);
        assert_eq!(l.psi_at(1, 0), 5);
        assert_eq!(l.tau_at(), Some(6));
    }

    #[test]
    fn flatten_rejects_wrong_shape() {
        let l = ParamLayout::base(2);
        let v = ParamVector {
            alpha0: None,
            shift: None,
            alpha: DVector::zeros(3),
            gamma: None,
            xi: None,
            psi: None,
            tau: Some(1.0),
            extra: vec![],
        };
        assert!(l.flatten(&v).is_err());
    }
}
