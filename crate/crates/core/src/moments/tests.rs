use super::*;
use crate::panel::Panel;
use crate::test_panels::{noiseless_panel, noisy_panel, normal};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mean_moments(sys: &MomentSystem, panel: &Panel, theta: &DVector<f64>) -> DVector<f64> {
    let u = sys.moment_matrix(panel, theta);
    DVector::from_iterator(u.ncols(), u.column_iter().map(|c| c.sum() / u.nrows() as f64))
}

fn all_systems(panel: &Panel, spec: InstrumentSpec) -> Vec<MomentSystem> {
    EstimatorKind::ALL.iter().map(|k| MomentSystem::build(*k, panel, spec).unwrap()).collect()
}

#[test]
fn jacobian_matches_central_differences() {
    let panel = noisy_panel(11, 2, 2, 24, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for spec in [InstrumentSpec::identity(), InstrumentSpec { augment: true, g1_includes_z0: true }] {
        for base in all_systems(&panel, spec) {
            let sys = base.add_window_att(16, 22).unwrap().add_lift(14, 25).unwrap();
            for _ in 0..5 {
                let theta = DVector::from_fn(sys.p(), |_, _| normal(&mut rng));
                for t in [3, 13, 14, 20] {
                    let j = sys.jac(&panel, t, &theta);
                    for c in 0..sys.p() {
                        let h = 1e-6 * (1.0 + theta[c].abs());
                        let mut up = theta.clone();
                        let mut dn = theta.clone();
                        up[c] += h;
                        dn[c] -= h;
                        let fd = (sys.eval(&panel, t, &up) - sys.eval(&panel, t, &dn)) / (2.0 * h);
                        for r in 0..sys.q() {
                            let err = (fd[r] - j[(r, c)]).abs();
                            assert!(err < 1e-6 * (1.0 + j[(r, c)].abs()), "{} row {r} col {c} t {t}: {} vs {}", sys.kind(), fd[r], j[(r, c)]);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn pre_and_post_rows_respect_indicators() {
    let panel = noisy_panel(3, 2, 1, 20, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for sys in all_systems(&panel, InstrumentSpec::augmented()) {
        let theta = DVector::from_fn(sys.p(), |_, _| normal(&mut rng));
        for t in 0..panel.periods() {
            let u = sys.eval(&panel, t, &theta);
            for (r, label) in sys.row_labels().iter().enumerate() {
                let pre_row = label.ends_with("*pre");
                let post_row = label.ends_with("*post") || label.starts_with("att");
                if (pre_row && panel.is_post(t)) || (post_row && !panel.is_post(t)) {
                    assert_eq!(u[r], 0.0, "{} row {label} at t={t}", sys.kind());
                }
            }
        }
    }
}

#[test]
fn noiseless_moments_vanish_at_truth() {
    let cases = [
        (EstimatorKind::Pi, false, false),
        (EstimatorKind::PiP, false, false),
        (EstimatorKind::PiS, false, false),
        (EstimatorKind::PiSCov, false, true),
        (EstimatorKind::PiSContam, true, false),
    ];
    for (kind, contam, cov) in cases {
        let (panel, psi) = noiseless_panel(21, 2, 2, 40, 25, contam, cov);
        let sys = MomentSystem::build(kind, &panel, InstrumentSpec::augmented()).unwrap();
        let theta = sys.truth(Some(&psi));
        let m = mean_moments(&sys, &panel, &theta);
        assert!(m.amax() < 1e-12, "{kind}: {m}");
    }
}

#[test]
fn affine_systems_have_constant_jacobian() {
    let panel = noisy_panel(8, 2, 2, 20, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for base in all_systems(&panel, InstrumentSpec::identity()) {
        let sys = base.add_window_att(10, 16).unwrap();
        let a = DVector::from_fn(sys.p(), |_, _| normal(&mut rng));
        let b = DVector::from_fn(sys.p(), |_, _| normal(&mut rng));
        let diff = (sys.jac(&panel, 15, &a) - sys.jac(&panel, 15, &b)).amax();
        assert_eq!(sys.is_affine(), diff == 0.0, "{}", sys.kind());
    }
}

#[test]
fn contaminated_with_zero_psi_reduces_to_pi_s() {
    let panel = noisy_panel(4, 3, 2, 30, 18);
    let pis = build_pi_s(&panel, InstrumentSpec::identity()).unwrap();
    let con = build_pi_s_contam(&panel).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = DVector::from_fn(pis.p(), |_, _| normal(&mut rng));
    let (lp, lc) = (pis.layout(), con.layout());
    let mut b = DVector::zeros(con.p());
    b.rows_mut(lc.alpha_start(), lp.alpha).copy_from(&a.rows(lp.alpha_start(), lp.alpha));
    b.rows_mut(lc.gamma_start(), lp.gamma).copy_from(&a.rows(lp.gamma_start(), lp.gamma));
    b[lc.tau_at().unwrap()] = a[lp.tau_at().unwrap()];
    let (g0, g1) = (pis.g0_len, pis.g1_len);
    for t in 0..panel.periods() {
        let (u, v) = (pis.eval(&panel, t, &a), con.eval(&panel, t, &b));
        // donor rows, surrogate rows and the surrogate ATT row coincide
        assert_eq!(u.rows(0, g0), v.rows(0, g0));
        let post_at = g0 * (1 + lc.gamma);
        assert_eq!(u.rows(g0, g1), v.rows(post_at, g1));
        assert_eq!(u[pis.q() - 1], v[con.q() - 1]);
        assert_eq!(pis.effect(&panel, t, &a), con.effect(&panel, t, &b));
    }
}

#[test]
fn covariates_at_zero_loading_reduce_to_plain_residuals() {
    let panel = noisy_panel(6, 2, 1, 16, 9);
    let cov = build_pi_s_cov(&panel).unwrap();
    let pis = build_pi_s(&panel, InstrumentSpec::identity()).unwrap();
    let l = cov.layout();
    let mut theta = DVector::zeros(cov.p());
    let mut plain = DVector::zeros(pis.p());
    for i in 0..l.alpha {
        theta[l.alpha_start() + i] = 0.5 + i as f64;
        plain[pis.layout().alpha_start() + i] = 0.5 + i as f64;
    }
    theta[l.gamma_start()] = -0.7;
    plain[pis.layout().gamma_start()] = -0.7;
    for t in 0..panel.periods() {
        assert_eq!(cov.effect(&panel, t, &theta), pis.effect(&panel, t, &plain));
        assert_eq!(cov.baseline(&panel, t, &theta), pis.baseline(&panel, t, &plain));
        // first donor-proxy row: z0_1 · (y − w′α) · pre
        assert_eq!(cov.eval(&panel, t, &theta)[0], pis.eval(&panel, t, &plain)[0]);
    }
}

#[test]
fn window_and_lift_rows_average_to_their_oracles() {
    let panel = noisy_panel(12, 2, 2, 30, 15);
    let (t1, t2) = (17, 26);
    for base in all_systems(&panel, InstrumentSpec::identity()) {
        let sys = base.add_window_att(t1, t2).unwrap().add_lift(t1, t2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut theta = DVector::from_fn(sys.p(), |_, _| normal(&mut rng));
        let inside: Vec<usize> = (0..panel.periods()).filter(|t| t1 < t + 1 && t + 1 < t2).collect();
        assert_eq!(inside.len(), t2 - t1 - 1);
        let eff: f64 = inside.iter().map(|&t| sys.effect(&panel, t, &theta)).sum();
        let base_sum: f64 = inside.iter().map(|&t| sys.baseline(&panel, t, &theta)).sum();
        let k = sys.layout().extra_start();
        theta[k] = eff / inside.len() as f64;
        theta[k + 1] = eff / base_sum;
        let m = mean_moments(&sys, &panel, &theta);
        assert!(m[sys.q() - 2].abs() < 1e-12, "{}", sys.kind());
        assert!(m[sys.q() - 1].abs() < 1e-12, "{}", sys.kind());
    }
}

#[test]
fn sc_moments_are_ols_normal_equations() {
    let panel = noisy_panel(15, 3, 1, 40, 25);
    let sys = build_sc(&panel).unwrap();
    // independent OLS on the design [1, D, W]
    let t = panel.periods();
    let design = DMatrix::from_fn(t, 5, |s, c| match c {
        0 => 1.0,
        1 => panel.is_post(s) as u8 as f64,
        _ => panel.w()[(s, c - 2)],
    });
    let beta = (design.transpose() * &design).lu().solve(&(design.transpose() * panel.y())).unwrap();
    let mut theta = DVector::zeros(sys.p());
    theta[0] = beta[0];
    for i in 0..3 {
        theta[1 + i] = beta[2 + i];
    }
    theta[sys.layout().tau_at().unwrap()] = beta[1];
    assert!(mean_moments(&sys, &panel, &theta).amax() < 1e-12);
}

#[test]
fn pi_p_two_by_two_hand_solution() {
    // One donor, one surrogate, two post periods: the post block is a 2x2
    // linear system in (α, γ) when instruments are (z0, z1).
    let y = DVector::from_vec(vec![0.0, 0.0, 5.0, 4.0]);
    let w = DMatrix::from_vec(4, 1, vec![0.0, 0.0, 1.0, 2.0]);
    let x = DMatrix::from_vec(4, 1, vec![0.0, 0.0, 3.0, 1.0]);
    let z0 = DMatrix::from_vec(4, 1, vec![0.0, 0.0, 1.0, 0.0]);
    let z1 = DMatrix::from_vec(4, 1, vec![0.0, 0.0, 0.0, 1.0]);
    let panel = Panel::new(2, y, w, x, z0, z1).unwrap();
    let sys = build_pi_p(&panel).unwrap();
    // rows: z0: 5 − α − 3γ = 0, z1: 4 − 2α − γ = 0  ⇒  α = 7/5, γ = 6/5
    let theta = DVector::from_vec(vec![1.4, 1.2, (3.0 * 1.2 + 1.2) / 2.0]);
    assert!(mean_moments(&sys, &panel, &theta).amax() < 1e-12);
}

#[test]
fn sc_s_moments_match_regression_with_shift() {
    let panel = noisy_panel(31, 2, 2, 40, 20);
    let sys = build_sc_s(&panel).unwrap();
    // regressors 1, D, D·X, W, C_Y; the instrument set equals the regressors
    let t = panel.periods();
    let cy = panel.cy().unwrap();
    let cols = 2 + 2 + 2 + 2;
    let design = DMatrix::from_fn(t, cols, |s, c| {
        let d = panel.is_post(s) as u8 as f64;
        match c {
            0 => 1.0,
            1 => d,
            2 | 3 => d * panel.x()[(s, c - 2)],
            4 | 5 => panel.w()[(s, c - 4)],
            _ => cy[(s, c - 6)],
        }
    });
    let beta = (design.transpose() * &design).lu().solve(&(design.transpose() * panel.y())).unwrap();
    let l = sys.layout();
    let mut theta = DVector::zeros(sys.p());
    theta[0] = beta[0];
    theta[l.shift_at().unwrap()] = beta[1];
    for j in 0..2 {
        theta[l.gamma_start() + j] = beta[2 + j];
        theta[l.alpha_start() + j] = beta[4 + j];
        theta[l.xi_y_start() + j] = beta[6 + j];
    }
    let post: Vec<usize> = (0..t).filter(|&s| panel.is_post(s)).collect();
    let tau = post.iter().map(|&s| beta[1] + beta[2] * panel.x()[(s, 0)] + beta[3] * panel.x()[(s, 1)]).sum::<f64>()
        / post.len() as f64;
    theta[l.tau_at().unwrap()] = tau;
    assert_eq!(sys.q(), sys.p());
    assert!(mean_moments(&sys, &panel, &theta).amax() < 1e-11);
}

#[test]
fn build_rejects_missing_blocks_and_bad_windows() {
    let (panel, _) = noiseless_panel(1, 2, 1, 20, 10, false, false);
    assert_eq!(
        build_pi_s_cov(&panel).unwrap_err(),
        MomentError::MissingCovariates(EstimatorKind::PiSCov)
    );
    // two donors, one donor proxy: the pre block cannot identify α
    let narrow = panel.with_donor_proxies(panel.z0().columns(0, 1).into_owned()).unwrap();
    assert!(matches!(build_pi(&narrow), Err(MomentError::UnderIdentified { .. })));
    let sys = build_pi_s(&panel, InstrumentSpec::identity()).unwrap();
    assert!(matches!(sys.add_window_att(5, 15), Err(MomentError::EmptyWindow { .. })));
    assert!(matches!(sys.add_window_att(12, 13), Err(MomentError::EmptyWindow { .. })));
    assert!(matches!(sys.add_window_att(12, 22), Err(MomentError::EmptyWindow { .. })));
    assert!(sys.add_window_att(10, 21).is_ok());
    assert_eq!(sys.df(), 0);
    assert_eq!(MomentSystem::build(EstimatorKind::PiS, &panel, InstrumentSpec::augmented()).unwrap().df(), 5);
}

#[test]
fn estimator_names_parse() {
    for k in EstimatorKind::ALL {
        assert_eq!(k.slug().parse::<EstimatorKind>().unwrap(), k);
        assert_eq!(k.label().parse::<EstimatorKind>().unwrap(), k);
    }
    assert!("foo".parse::<EstimatorKind>().is_err());
}
