use super::{EstimatorKind, ExtraKind, InstrumentSpec, MomentError, MomentSystem, ParamLayout};
use crate::panel::Panel;
use nalgebra::DMatrix;

#[derive(Debug, Clone, Copy)]
enum Part {
    Z0,
    Z1,
    Cy,
    Cw,
    Cx,
}

fn part_names(panel: &Panel, part: Part) -> Vec<String> {
    let d = panel.dims();
    match part {
        Part::Z0 => (1..=d.donor_proxies).map(|i| format!("z0_{i}")).collect(),
        Part::Z1 => (1..=d.surrogate_proxies).map(|i| format!("z1_{i}")).collect(),
        Part::Cy => (1..=d.cy).map(|k| format!("cy_{k}")).collect(),
        Part::Cw => (1..=d.donors).flat_map(|i| (1..=d.cw).map(move |k| format!("cw_{i}_{k}"))).collect(),
        Part::Cx => (1..=d.surrogates).flat_map(|i| (1..=d.cx).map(move |k| format!("cx_{i}_{k}"))).collect(),
    }
}

/// Instrument vector `g(parts)` at row `t`: the raw values, optionally
/// followed by a constant and their squares.
fn instruments(panel: &Panel, t: usize, parts: &[Part], augment: bool, out: &mut Vec<f64>) {
    out.clear();
    for part in parts {
        match part {
            Part::Z0 => out.extend(panel.z0().row(t).iter()),
            Part::Z1 => out.extend(panel.z1().row(t).iter()),
            Part::Cy => {
                if let Some(c) = panel.cy() {
                    out.extend(c.row(t).iter())
                }
            }
            Part::Cw => {
                if let Some(c) = panel.cw() {
                    out.extend_from_slice(c.row(t))
                }
            }
            Part::Cx => {
                if let Some(c) = panel.cx() {
                    out.extend_from_slice(c.row(t))
                }
            }
        }
    }
    if augment && !out.is_empty() {
        let n = out.len();
        out.push(1.0);
        for k in 0..n {
            let v = out[k];
            out.push(v * v);
        }
    }
}

fn instrument_names(panel: &Panel, parts: &[Part], augment: bool) -> Vec<String> {
    let mut names: Vec<String> = parts.iter().flat_map(|p| part_names(panel, *p)).collect();
    if augment && !names.is_empty() {
        let squares: Vec<String> = names.iter().map(|n| format!("{n}^2")).collect();
        names.push("1".into());
        names.extend(squares);
    }
    names
}

fn g0_parts(kind: EstimatorKind) -> &'static [Part] {
    match kind {
        EstimatorKind::PiSCov => &[Part::Z0, Part::Cy, Part::Cw],
        EstimatorKind::Pi | EstimatorKind::PiS | EstimatorKind::PiSContam => &[Part::Z0],
        _ => &[],
    }
}

fn g1_parts(kind: EstimatorKind, spec: &InstrumentSpec) -> &'static [Part] {
    match kind {
        EstimatorKind::PiP => &[Part::Z0, Part::Z1],
        EstimatorKind::PiSCov => &[Part::Z0, Part::Cy, Part::Cw, Part::Z1, Part::Cx],
        EstimatorKind::PiS | EstimatorKind::PiSContam if spec.g1_includes_z0 => &[Part::Z1, Part::Z0],
        EstimatorKind::PiS | EstimatorKind::PiSContam => &[Part::Z1],
        _ => &[],
    }
}

fn under(what: &str, q: usize, p: usize) -> Result<(), MomentError> {
    if q < p {
        Err(MomentError::UnderIdentified { what: what.to_string(), q, p })
    } else {
        Ok(())
    }
}

pub(super) fn build(kind: EstimatorKind, panel: &Panel, spec: InstrumentSpec) -> Result<MomentSystem, MomentError> {
    use EstimatorKind::*;
    let d = panel.dims();
    let (n, h) = (d.donors, d.surrogates);
    if matches!(kind, PiS | PiSCov | PiSContam) && d.surrogate_proxies == 0 {
        return Err(MomentError::MissingProxies(kind));
    }
    if kind == PiSCov && !panel.has_covariates() {
        return Err(MomentError::MissingCovariates(kind));
    }
    // SC-type systems are OLS: their instruments are the regressors.
    let spec = if matches!(kind, Sc | ScS) { InstrumentSpec::identity() } else { spec };
    let g0 = g0_parts(kind);
    let g1 = g1_parts(kind, &spec);
    let g0_names = instrument_names(panel, g0, spec.augment);
    let g1_names = instrument_names(panel, g1, spec.augment);
    let (g0_len, g1_len) = (g0_names.len(), g1_names.len());

    let mut layout = ParamLayout::base(n);
    let mut labels: Vec<String> = Vec::new();
    let pre = |names: &[String], what: &str| names.iter().map(|g| format!("{g}*{what}*pre")).collect::<Vec<_>>();
    let post = |names: &[String], what: &str| names.iter().map(|g| format!("{g}*{what}*post")).collect::<Vec<_>>();
    match kind {
        Sc => {
            layout.alpha0 = true;
            labels.push("1*e".into());
            labels.push("post*e".into());
            labels.extend((1..=n).map(|i| format!("w{i}*e")));
        }
        ScS => {
            layout.alpha0 = true;
            layout.shift = true;
            layout.gamma = h;
            layout.xi_y = d.cy;
            labels.push("1*e".into());
            labels.push("post*e".into());
            labels.extend((1..=h).map(|j| format!("post*x{j}*e")));
            labels.extend((1..=n).map(|i| format!("w{i}*e")));
            labels.extend((1..=d.cy).map(|k| format!("cy_{k}*e")));
            labels.push("att(shift+x'g)".into());
        }
        Pi => {
            under("pre-period donor block", g0_len, n)?;
            labels.extend(pre(&g0_names, "(y-w'a)"));
            labels.push("att(y-w'a)".into());
        }
        PiP => {
            layout.gamma = h;
            under("post-period block", g1_len, n + h)?;
            labels.extend(post(&g1_names, "(y-w'a-x'g)"));
            labels.push("att(x'g)".into());
        }
        PiS => {
            layout.gamma = h;
            under("pre-period donor block", g0_len, n)?;
            under("post-period surrogate block", g1_len, h)?;
            labels.extend(pre(&g0_names, "(y-w'a)"));
            labels.extend(post(&g1_names, "(y-w'a-x'g)"));
            labels.push("att(x'g)".into());
        }
        PiSCov => {
            layout.gamma = h;
            layout.xi_y = d.cy;
            layout.xi_w = d.cw;
            layout.xi_x = d.cx;
            under("pre-period donor block", g0_len, n + d.cy + d.cw)?;
            labels.extend(pre(&g0_names, "e0"));
            labels.extend(post(&g1_names, "e1"));
            labels.push("att(x~'g)".into());
        }
        PiSContam => {
            layout.gamma = h;
            layout.psi_rows = n;
            layout.psi_cols = h;
            under("pre-period donor block", g0_len, n)?;
            under("post-period surrogate block", g1_len, h)?;
            labels.extend(pre(&g0_names, "(y-w'a)"));
            for j in 1..=h {
                labels.extend(pre(&g0_names, &format!("(x{j}-w'psi{j})")));
            }
            labels.extend(post(&g1_names, "(y-w'a-(x-psi'w)'g)"));
            labels.push("att(y-w'a)".into());
            labels.push("att((x-psi'w)'g)".into());
        }
    }
    under(kind.label(), labels.len(), layout.len())?;
    Ok(MomentSystem {
        kind,
        base_rows: labels.len(),
        layout,
        instruments: spec,
        dims: d,
        t0: panel.t0(),
        periods: panel.periods(),
        g0_len,
        g1_len,
        labels,
    })
}

/// Writes consecutive row blocks of `U_t` and `∂U_t/∂θ′`.
struct Rows<'a> {
    u: &'a mut [f64],
    jac: Option<&'a mut DMatrix<f64>>,
    at: usize,
}

impl Rows<'_> {
    /// Rows `g_k · r · 1{on}` with derivatives `g_k · ∂r · 1{on}`.
    fn block(&mut self, g: &[f64], on: bool, r: f64, dr: &[f64]) {
        for (k, &gk) in g.iter().enumerate() {
            let row = self.at + k;
            if on {
                self.u[row] = gk * r;
                if let Some(j) = self.jac.as_deref_mut() {
                    for (c, &d) in dr.iter().enumerate() {
                        if d != 0.0 {
                            j[(row, c)] = gk * d;
                        }
                    }
                }
            } else {
                self.u[row] = 0.0;
            }
        }
        self.at += g.len();
    }

    fn scalar(&mut self, on: bool, r: f64, dr: &[f64]) {
        self.block(&[1.0], on, r, dr);
    }
}

/// `W_t′α` and its gradient (added into `grad` with sign `s`).
fn donor_fit(panel: &Panel, l: &ParamLayout, t: usize, th: &[f64], s: f64, grad: &mut [f64]) -> f64 {
    let a0 = l.alpha_start();
    let mut acc = 0.0;
    for i in 0..l.alpha {
        let w = panel.w()[(t, i)];
        acc += w * th[a0 + i];
        grad[a0 + i] += s * w;
    }
    acc
}

/// `X_t′γ` and its gradient.
fn surrogate_fit(panel: &Panel, l: &ParamLayout, t: usize, th: &[f64], s: f64, grad: &mut [f64]) -> f64 {
    let g0 = l.gamma_start();
    let mut acc = 0.0;
    for j in 0..l.gamma {
        let x = panel.x()[(t, j)];
        acc += x * th[g0 + j];
        grad[g0 + j] += s * x;
    }
    acc
}

/// `C_Y′ξ_Y` and its gradient.
fn cy_fit(panel: &Panel, l: &ParamLayout, t: usize, th: &[f64], s: f64, grad: &mut [f64]) -> f64 {
    let Some(cy) = panel.cy() else { return 0.0 };
    let k0 = l.xi_y_start();
    let mut acc = 0.0;
    for k in 0..l.xi_y {
        let c = cy[(t, k)];
        acc += c * th[k0 + k];
        grad[k0 + k] += s * c;
    }
    acc
}

/// Covariate-adjusted donor fit `W̃_t′α` with `W̃_i = W_i − C_{W,i}′ξ_W`.
fn adjusted_donor_fit(panel: &Panel, l: &ParamLayout, t: usize, th: &[f64], s: f64, grad: &mut [f64]) -> f64 {
    let cw = panel.cw().expect("covariates checked at build");
    let (a0, k0) = (l.alpha_start(), l.xi_w_start());
    let mut acc = 0.0;
    for i in 0..l.alpha {
        let mut wt = panel.w()[(t, i)];
        for k in 0..l.xi_w {
            wt -= cw.get(t, i, k) * th[k0 + k];
        }
        acc += wt * th[a0 + i];
        grad[a0 + i] += s * wt;
        for k in 0..l.xi_w {
            grad[k0 + k] -= s * th[a0 + i] * cw.get(t, i, k);
        }
    }
    acc
}

/// Covariate-adjusted surrogate fit `X̃_t′γ` with `X̃_j = X_j − C_{X,j}′ξ_X`.
fn adjusted_surrogate_fit(panel: &Panel, l: &ParamLayout, t: usize, th: &[f64], s: f64, grad: &mut [f64]) -> f64 {
    let cx = panel.cx().expect("covariates checked at build");
    let (g0, k0) = (l.gamma_start(), l.xi_x_start());
    let mut acc = 0.0;
    for j in 0..l.gamma {
        let mut xt = panel.x()[(t, j)];
        for k in 0..l.xi_x {
            xt -= cx.get(t, j, k) * th[k0 + k];
        }
        acc += xt * th[g0 + j];
        grad[g0 + j] += s * xt;
        for k in 0..l.xi_x {
            grad[k0 + k] -= s * th[g0 + j] * cx.get(t, j, k);
        }
    }
    acc
}

/// Decontaminated surrogate `X_j − Ψ_{·j}′W` and its gradient in `Ψ`.
fn decontaminated(panel: &Panel, l: &ParamLayout, t: usize, j: usize, th: &[f64], s: f64, grad: &mut [f64]) -> f64 {
    let mut v = panel.x()[(t, j)];
    for i in 0..l.psi_rows {
        let w = panel.w()[(t, i)];
        v -= th[l.psi_at(i, j)] * w;
        grad[l.psi_at(i, j)] -= s * w;
    }
    v
}

/// `(X − Ψ′W)′γ` and its gradient.
fn decontaminated_fit(panel: &Panel, l: &ParamLayout, t: usize, th: &[f64], s: f64, grad: &mut [f64]) -> f64 {
    let g0 = l.gamma_start();
    let mut acc = 0.0;
    let mut scratch = vec![0.0; grad.len()];
    for j in 0..l.gamma {
        scratch.iter_mut().for_each(|v| *v = 0.0);
        let xd = decontaminated(panel, l, t, j, th, 1.0, &mut scratch);
        let gj = th[g0 + j];
        acc += xd * gj;
        grad[g0 + j] += s * xd;
        for i in 0..l.psi_rows {
            let k = l.psi_at(i, j);
            grad[k] += s * gj * scratch[k];
        }
    }
    acc
}

fn zeroed(v: &mut [f64]) -> &mut [f64] {
    v.iter_mut().for_each(|x| *x = 0.0);
    v
}

/// Per-period effect implied by `θ`; its gradient is accumulated into `grad`.
pub(super) fn effect(sys: &MomentSystem, panel: &Panel, t: usize, th: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let l = &sys.layout;
    let mut local = vec![0.0; l.len()];
    let g = match grad {
        Some(g) => g,
        None => &mut local,
    };
    match sys.kind {
        EstimatorKind::Sc => {
            let a0 = th[0];
            g[0] -= 1.0;
            panel.y()[t] - a0 - donor_fit(panel, l, t, th, -1.0, g)
        }
        EstimatorKind::ScS => {
            let k = l.shift_at().expect("sc-s has a shift");
            g[k] += 1.0;
            th[k] + surrogate_fit(panel, l, t, th, 1.0, g)
        }
        EstimatorKind::Pi => panel.y()[t] - donor_fit(panel, l, t, th, -1.0, g),
        EstimatorKind::PiP | EstimatorKind::PiS => surrogate_fit(panel, l, t, th, 1.0, g),
        EstimatorKind::PiSCov => adjusted_surrogate_fit(panel, l, t, th, 1.0, g),
        EstimatorKind::PiSContam => decontaminated_fit(panel, l, t, th, 1.0, g),
    }
}

/// Synthetic-control level implied by `θ`; gradient accumulated into `grad`.
pub(super) fn baseline(sys: &MomentSystem, panel: &Panel, t: usize, th: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let l = &sys.layout;
    let mut local = vec![0.0; l.len()];
    let g = match grad {
        Some(g) => g,
        None => &mut local,
    };
    match sys.kind {
        EstimatorKind::Sc => {
            g[0] += 1.0;
            th[0] + donor_fit(panel, l, t, th, 1.0, g)
        }
        EstimatorKind::ScS => {
            g[0] += 1.0;
            th[0] + donor_fit(panel, l, t, th, 1.0, g) + cy_fit(panel, l, t, th, 1.0, g)
        }
        EstimatorKind::PiSCov => cy_fit(panel, l, t, th, 1.0, g) + adjusted_donor_fit(panel, l, t, th, 1.0, g),
        _ => donor_fit(panel, l, t, th, 1.0, g),
    }
}

pub(super) fn fill(
    sys: &MomentSystem,
    panel: &Panel,
    t: usize,
    th: &[f64],
    u: &mut [f64],
    mut jac: Option<&mut DMatrix<f64>>,
) {
    use EstimatorKind::*;
    let l = &sys.layout;
    let p = l.len();
    if let Some(j) = jac.as_deref_mut() {
        j.fill(0.0);
    }
    let post = panel.is_post(t);
    let pre = !post;
    let d = if post { 1.0 } else { 0.0 };
    let y = panel.y()[t];
    let mut rows = Rows { u, jac, at: 0 };
    let mut dr = vec![0.0; p];
    let mut g0 = Vec::with_capacity(sys.g0_len);
    let mut g1 = Vec::with_capacity(sys.g1_len);
    instruments(panel, t, g0_parts(sys.kind), sys.instruments.augment, &mut g0);
    instruments(panel, t, g1_parts(sys.kind, &sys.instruments), sys.instruments.augment, &mut g1);

    match sys.kind {
        Sc => {
            let tau = l.tau_at().unwrap();
            let dr = zeroed(&mut dr);
            dr[0] = -1.0;
            dr[tau] = -d;
            let e = y - th[0] - d * th[tau] - donor_fit(panel, l, t, th, -1.0, dr);
            let mut inst = vec![1.0, d];
            inst.extend(panel.w().row(t).iter());
            rows.block(&inst, true, e, dr);
        }
        ScS => {
            let shift = l.shift_at().unwrap();
            let tau = l.tau_at().unwrap();
            let dr = zeroed(&mut dr);
            dr[0] = -1.0;
            dr[shift] = -d;
            let mut xg_grad = vec![0.0; p];
            let xg = surrogate_fit(panel, l, t, th, 1.0, &mut xg_grad);
            for (a, b) in dr.iter_mut().zip(&xg_grad) {
                *a -= d * b;
            }
            let e = y - th[0] - d * th[shift] - d * xg
                - donor_fit(panel, l, t, th, -1.0, dr)
                - cy_fit(panel, l, t, th, -1.0, dr);
            let mut inst = vec![1.0, d];
            inst.extend(panel.x().row(t).iter().map(|x| d * x));
            inst.extend(panel.w().row(t).iter());
            if let Some(cy) = panel.cy() {
                inst.extend(cy.row(t).iter().take(l.xi_y));
            }
            rows.block(&inst, true, e, dr);
            let mut da = xg_grad;
            da[shift] += 1.0;
            da[tau] -= 1.0;
            rows.scalar(post, th[shift] + xg - th[tau], &da);
        }
        Pi => {
            let tau = l.tau_at().unwrap();
            let dr = zeroed(&mut dr);
            let e = y - donor_fit(panel, l, t, th, -1.0, dr);
            rows.block(&g0, pre, e, dr);
            dr[tau] = -1.0;
            rows.scalar(post, e - th[tau], dr);
        }
        PiP | PiS => {
            let tau = l.tau_at().unwrap();
            let dr = zeroed(&mut dr);
            let e0 = y - donor_fit(panel, l, t, th, -1.0, dr);
            if sys.kind == PiS {
                rows.block(&g0, pre, e0, dr);
            }
            let mut dx = vec![0.0; p];
            let xg = surrogate_fit(panel, l, t, th, 1.0, &mut dx);
            for (a, b) in dr.iter_mut().zip(&dx) {
                *a -= b;
            }
            rows.block(&g1, post, e0 - xg, dr);
            dx[tau] = -1.0;
            rows.scalar(post, xg - th[tau], &dx);
        }
        PiSCov => {
            let tau = l.tau_at().unwrap();
            let dr = zeroed(&mut dr);
            let e0 = y - cy_fit(panel, l, t, th, -1.0, dr) - adjusted_donor_fit(panel, l, t, th, -1.0, dr);
            rows.block(&g0, pre, e0, dr);
            let mut dx = vec![0.0; p];
            let xg = adjusted_surrogate_fit(panel, l, t, th, 1.0, &mut dx);
            for (a, b) in dr.iter_mut().zip(&dx) {
                *a -= b;
            }
            rows.block(&g1, post, e0 - xg, dr);
            dx[tau] = -1.0;
            rows.scalar(post, xg - th[tau], &dx);
        }
        PiSContam => {
            let tau = l.tau_at().unwrap();
            let dr = zeroed(&mut dr);
            let e0 = y - donor_fit(panel, l, t, th, -1.0, dr);
            rows.block(&g0, pre, e0, dr);
            let mut dj = vec![0.0; p];
            for j in 0..l.gamma {
                let dj = zeroed(&mut dj);
                let xd = decontaminated(panel, l, t, j, th, 1.0, dj);
                rows.block(&g0, pre, xd, dj);
            }
            let mut dx = vec![0.0; p];
            let xg = decontaminated_fit(panel, l, t, th, 1.0, &mut dx);
            let mut d1: Vec<f64> = dr.iter().zip(&dx).map(|(a, b)| a - b).collect();
            rows.block(&g1, post, e0 - xg, &d1);
            dr[tau] = -1.0;
            rows.scalar(post, e0 - th[tau], dr);
            d1.copy_from_slice(&dx);
            d1[tau] = -1.0;
            rows.scalar(post, xg - th[tau], &d1);
        }
    }
    debug_assert_eq!(rows.at, sys.base_rows);

    let start = l.extra_start();
    for (k, extra) in l.extra.iter().enumerate() {
        let period = t + 1;
        let on = extra.t1 < period && period < extra.t2;
        let idx = start + k;
        let dr = zeroed(&mut dr);
        let eff = effect(sys, panel, t, th, Some(dr));
        match extra.kind {
            ExtraKind::Window => {
                dr[idx] = -1.0;
                rows.scalar(on, eff - th[idx], dr);
            }
            ExtraKind::Lift => {
                let mut db = vec![0.0; p];
                let base = baseline(sys, panel, t, th, Some(&mut db));
                for (a, b) in dr.iter_mut().zip(&db) {
                    *a -= th[idx] * b;
                }
                dr[idx] = -base;
                rows.scalar(on, eff - base * th[idx], dr);
            }
        }
    }
}
