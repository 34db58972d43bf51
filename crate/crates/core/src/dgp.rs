//! Simulation design: a treated unit, donors and surrogates driven by latent
//! factors, with proxies for both.
//!
//! With `F` donor factors and `K` effect factors there are `2F` untreated
//! units and `2K` surrogates. The first half of each block is the donor
//! (surrogate) pool and the second half serves as the donor (surrogate)
//! proxies:
//!
//! ```text
//! Y_t = 1{t > T0}(ρ_t′θ + δ_t) + λ_t′β + C_{Y,t}′ξ + ε_{Y,t}
//! W_t = Γ′λ_t + C_{W,t}ξ + ε_{W,t}          Γ = (I_F, I_F)
//! X_t = Φ′ρ_t + C_{X,t}ξ + ε_{X,t}          Φ = (I_K, I_K)
//! ```
//!
//! with `β = θ = 1`, `ρ_{k,t} ~ N(μ_k, 1)`, `μ = (1, 0, …, 0)`, so the ATT is
//! one. The contaminated variant replaces the surrogate equation by
//! `X_t = Θ′λ_t + 1{t > T0}(Φ′ρ_t + δ_{X,t}) + ε_{X,t}`.

use crate::linalg::least_squares;
use crate::panel::{Covariates, Panel, UnitCovariates};
use crate::rng::{std_normal, stream, Rng, Stream};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DgpError {
    #[error("invalid simulation config: {0}")]
    BadConfig(String),
    #[error("AR(1) coefficient {0} must lie strictly inside (-1, 1)")]
    BadPhi(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FactorRegime {
    /// `λ_{k,t} ~ N(1, 1)`.
    #[default]
    Stationary,
    /// `λ_{k,t} ~ N(log t, 1)`, `t = 1, …, T`.
    LogTrend,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum ErrorKind {
    #[default]
    Iid,
    /// Stationary AR(1) with unit marginal variance.
    Ar1 { phi: f64 },
}

impl ErrorKind {
    pub fn phi(&self) -> f64 {
        match self {
            ErrorKind::Iid => 0.0,
            ErrorKind::Ar1 { phi } => *phi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contamination {
    /// Every entry of the donor-factor loading `Θ` of the surrogates.
    pub theta_loading_scale: f64,
}

fn default_t0() -> usize {
    100
}
fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    #[serde(rename = "F")]
    pub f: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "T0", default = "default_t0")]
    pub t0: usize,
    #[serde(default)]
    pub factor_regime: FactorRegime,
    #[serde(default)]
    pub error_kind: ErrorKind,
    #[serde(default)]
    pub with_covariates: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub contaminated: Option<Contamination>,
    /// Multiplies every error series (0 gives the noiseless design).
    #[serde(default = "one")]
    pub noise_scale: f64,
    /// Recentre the post-period effect factors at `μ` and orthogonalise them
    /// against the post-period donor factors, so the in-sample ATT is exactly
    /// one and noiseless fits recover the truth for every estimator.
    #[serde(default)]
    pub pin_effect: bool,
}

impl DgpConfig {
    pub fn new(f: usize, k: usize, t: usize) -> Self {
        Self {
            f,
            k,
            t,
            t0: default_t0(),
            factor_regime: FactorRegime::Stationary,
            error_kind: ErrorKind::Iid,
            with_covariates: false,
            seed: 0,
            contaminated: None,
            noise_scale: 1.0,
            pin_effect: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// The noiseless, pinned design used for exact-recovery checks.
    pub fn noiseless(mut self) -> Self {
        self.noise_scale = 0.0;
        self.pin_effect = true;
        self
    }

    pub fn validate(&self) -> Result<(), DgpError> {
        let bad = |m: String| Err(DgpError::BadConfig(m));
        if self.f == 0 || self.k == 0 {
            return bad(format!("F={} and K={} must be at least 1", self.f, self.k));
        }
        if self.t0 < 2 || self.t0 + 2 > self.t {
            return bad(format!("need 2 <= T0 <= T-2, got T0={} T={}", self.t0, self.t));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return bad(format!("noise_scale {} must be finite and non-negative", self.noise_scale));
        }
        if self.pin_effect && self.t - self.t0 <= self.f + 1 {
            return bad(format!("pin_effect needs more than F+1={} post periods", self.f + 1));
        }
        if let Some(c) = &self.contaminated {
            if self.with_covariates {
                return bad("contaminated surrogates cannot be combined with covariates".into());
            }
            if !c.theta_loading_scale.is_finite() {
                return bad("theta_loading_scale must be finite".into());
            }
        }
        let phi = self.error_kind.phi();
        if !(phi.abs() < 1.0) {
            return Err(DgpError::BadPhi(phi));
        }
        Ok(())
    }
}

/// Everything drawn for one simulated panel.
#[derive(Debug, Clone)]
pub struct DgpLatents {
    /// `T × F`.
    pub lambda: DMatrix<f64>,
    /// `T × K`.
    pub rho: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub theta: DVector<f64>,
    /// `F × 2F`.
    pub gamma: DMatrix<f64>,
    /// `K × 2K`.
    pub phi: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub eps_y: DVector<f64>,
    /// `T × 2F`, donors then donor proxies.
    pub eps_w: DMatrix<f64>,
    /// `T × 2K`, surrogates then surrogate proxies.
    pub eps_x: DMatrix<f64>,
    pub delta: DVector<f64>,
    /// `T × 2K`; zero unless contaminated.
    pub delta_x: DMatrix<f64>,
    /// Covariates for the outcome, all `2F` units and all `2K` surrogates.
    pub c_y: DVector<f64>,
    pub c_w: DMatrix<f64>,
    pub c_x: DMatrix<f64>,
    /// `Θ` (`F × 2K`) for the contaminated variant.
    pub theta_loading: Option<DMatrix<f64>>,
}

/// Stationary AR(1): `x_1 ~ N(0,1)`, `x_t = φ x_{t−1} + √(1−φ²) e_t`.
pub fn ar1_series(len: usize, phi: f64, rng: &mut Rng) -> Result<Vec<f64>, DgpError> {
    if !(phi.abs() < 1.0) {
        return Err(DgpError::BadPhi(phi));
    }
    let innov = (1.0 - phi * phi).sqrt();
    let mut out = Vec::with_capacity(len);
    let mut prev = 0.0;
    for t in 0..len {
        let e = std_normal(rng);
        let x = if t == 0 { e } else { phi * prev + innov * e };
        out.push(x);
        prev = x;
    }
    Ok(out)
}

/// `cols` independent error series of length `len`, stored as columns.
fn error_block(len: usize, cols: usize, phi: f64, scale: f64, rng: &mut Rng) -> Result<DMatrix<f64>, DgpError> {
    let mut m = DMatrix::zeros(len, cols);
    for c in 0..cols {
        let s = ar1_series(len, phi, rng)?;
        for (t, v) in s.into_iter().enumerate() {
            m[(t, c)] = scale * v;
        }
    }
    Ok(m)
}

fn pin_effect_factors(rho: &mut DMatrix<f64>, lambda: &DMatrix<f64>, t0: usize, mu: &DVector<f64>) {
    let (t, f) = lambda.shape();
    let post = t - t0;
    let mut lc = lambda.rows(t0, post).into_owned();
    for i in 0..f {
        let m = lc.column(i).mean();
        lc.column_mut(i).add_scalar_mut(-m);
    }
    for k in 0..rho.ncols() {
        let mut r = rho.view((t0, k), (post, 1)).column(0).into_owned();
        let m = r.mean();
        r.add_scalar_mut(-m);
        if let Ok((coef, _)) = least_squares(&lc, &r) {
            r -= &lc * coef;
        }
        let m = r.mean();
        for s in 0..post {
            rho[(t0 + s, k)] = r[s] - m + mu[k];
        }
    }
}

/// Simulates a panel and returns the draws behind it.
pub fn simulate_with_latents(cfg: &DgpConfig) -> Result<(Panel, DgpLatents), DgpError> {
    cfg.validate()?;
    let (f, k, t, t0) = (cfg.f, cfg.k, cfg.t, cfg.t0);
    let (n, h) = (2 * f, 2 * k);
    let phi_ar = cfg.error_kind.phi();
    let scale = cfg.noise_scale;

    let mut rl = stream(cfg.seed, Stream::DonorFactors);
    let mut lambda = DMatrix::zeros(t, f);
    for s in 0..t {
        let centre = match cfg.factor_regime {
            FactorRegime::Stationary => 1.0,
            FactorRegime::LogTrend => ((s + 1) as f64).ln(),
        };
        for i in 0..f {
            lambda[(s, i)] = centre + std_normal(&mut rl);
        }
    }
    let mu = DVector::from_fn(k, |i, _| if i == 0 { 1.0 } else { 0.0 });
    let mut rr = stream(cfg.seed, Stream::SurrogateFactors);
    let mut rho = DMatrix::zeros(t, k);
    for s in 0..t {
        for j in 0..k {
            rho[(s, j)] = mu[j] + std_normal(&mut rr);
        }
    }
    if cfg.pin_effect {
        pin_effect_factors(&mut rho, &lambda, t0, &mu);
    }

    let eps_y = error_block(t, 1, phi_ar, scale, &mut stream(cfg.seed, Stream::OutcomeError))?.column(0).into_owned();
    let eps_w = error_block(t, n, phi_ar, scale, &mut stream(cfg.seed, Stream::DonorError))?;
    let eps_x = error_block(t, h, phi_ar, scale, &mut stream(cfg.seed, Stream::SurrogateError))?;
    let delta = error_block(t, 1, phi_ar, scale, &mut stream(cfg.seed, Stream::EffectError))?.column(0).into_owned();
    let delta_x = if cfg.contaminated.is_some() {
        error_block(t, h, phi_ar, scale, &mut stream(cfg.seed, Stream::SurrogateEffectError))?
    } else {
        DMatrix::zeros(t, h)
    };
    let (c_y, c_w, c_x) = if cfg.with_covariates {
        let mut rc = stream(cfg.seed, Stream::Covariates);
        let mut draw = |rows: usize, cols: usize| {
            let mut m = DMatrix::zeros(rows, cols);
            for s in 0..rows {
                for c in 0..cols {
                    m[(s, c)] = std_normal(&mut rc);
                }
            }
            m
        };
        let cy = draw(t, 1).column(0).into_owned();
        let cw = draw(t, n);
        let cx = draw(t, h);
        (cy, cw, cx)
    } else {
        (DVector::zeros(t), DMatrix::zeros(t, n), DMatrix::zeros(t, h))
    };
    let theta_loading = cfg.contaminated.map(|c| DMatrix::from_element(f, h, c.theta_loading_scale));

    let beta = DVector::from_element(f, 1.0);
    let theta = DVector::from_element(k, 1.0);
    let stack = |d: usize| {
        let mut m = DMatrix::zeros(d, 2 * d);
        for i in 0..d {
            m[(i, i)] = 1.0;
            m[(i, d + i)] = 1.0;
        }
        m
    };
    let gamma = stack(f);
    let phi = stack(k);

    let mut y = DVector::zeros(t);
    let mut w_all = DMatrix::zeros(t, n);
    let mut x_all = DMatrix::zeros(t, h);
    for s in 0..t {
        let d = if s >= t0 { 1.0 } else { 0.0 };
        let lam = lambda.row(s);
        let rh = rho.row(s);
        y[s] = d * (rh.dot(&theta.transpose()) + delta[s]) + lam.dot(&beta.transpose()) + c_y[s] + eps_y[s];
        for i in 0..n {
            w_all[(s, i)] = lam[i % f] + c_w[(s, i)] + eps_w[(s, i)];
        }
        for j in 0..h {
            x_all[(s, j)] = match &theta_loading {
                None => rh[j % k] + c_x[(s, j)] + eps_x[(s, j)],
                Some(big) => {
                    let load: f64 = (0..f).map(|i| lam[i] * big[(i, j)]).sum();
                    load + d * (rh[j % k] + delta_x[(s, j)]) + eps_x[(s, j)]
                }
            };
        }
    }
    let covariates = if cfg.with_covariates {
        Covariates {
            cy: Some(DMatrix::from_column_slice(t, 1, c_y.as_slice())),
            cw: Some(UnitCovariates::from_fn(t, f, 1, |s, i, _| c_w[(s, i)])),
            cx: Some(UnitCovariates::from_fn(t, k, 1, |s, j, _| c_x[(s, j)])),
        }
    } else {
        Covariates::default()
    };
    let panel = Panel::with_covariates(
        t0,
        y,
        w_all.columns(0, f).into_owned(),
        x_all.columns(0, k).into_owned(),
        w_all.columns(f, f).into_owned(),
        x_all.columns(k, k).into_owned(),
        covariates,
    )
    .map_err(|e| DgpError::BadConfig(e.to_string()))?;
    let latents = DgpLatents {
        lambda,
        rho,
        beta,
        theta,
        gamma,
        phi,
        mu,
        eps_y,
        eps_w,
        eps_x,
        delta,
        delta_x,
        c_y,
        c_w,
        c_x,
        theta_loading,
    };
    Ok((panel, latents))
}

pub fn simulate_dgp(cfg: &DgpConfig) -> Result<Panel, DgpError> {
    simulate_with_latents(cfg).map(|(p, _)| p)
}

/// Contaminated variant; also returns `Ψ*` (`F × K`), the synthetic control
/// of each surrogate's untreated component on the donors.
pub fn simulate_contaminated(cfg: &DgpConfig) -> Result<(Panel, DMatrix<f64>), DgpError> {
    if cfg.contaminated.is_none() {
        return Err(DgpError::BadConfig("contaminated settings missing".into()));
    }
    let (panel, lat) = simulate_with_latents(cfg)?;
    let big = lat.theta_loading.expect("contaminated");
    Ok((panel, big.columns(0, cfg.k).into_owned()))
}

/// True parameter values of a simulated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub tau: f64,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Row-major `F × K` when contaminated.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psi: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub xi: Option<f64>,
    pub config: DgpConfig,
}

impl Truth {
    pub fn for_config(cfg: &DgpConfig) -> Self {
        Self {
            tau: 1.0,
            alpha: vec![1.0; cfg.f],
            gamma: vec![1.0; cfg.k],
            psi: cfg.contaminated.map(|c| vec![vec![c.theta_loading_scale; cfg.k]; cfg.f]),
            xi: cfg.with_covariates.then_some(1.0),
            config: cfg.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{read_panel, write_panel, PanelSchema};

    #[test]
    fn same_seed_same_panel() {
        let cfg = DgpConfig::new(2, 1, 200).with_seed(7);
        assert_eq!(simulate_dgp(&cfg).unwrap(), simulate_dgp(&cfg).unwrap());
        assert_ne!(simulate_dgp(&cfg).unwrap(), simulate_dgp(&cfg.clone().with_seed(8)).unwrap());
    }

    #[test]
    fn shapes_follow_factor_counts() {
        let mut cfg = DgpConfig::new(3, 2, 150);
        cfg.with_covariates = true;
        let p = simulate_dgp(&cfg).unwrap();
        let d = p.dims();
        assert_eq!((d.donors, d.donor_proxies, d.surrogates, d.surrogate_proxies), (3, 3, 2, 2));
        assert_eq!((d.cy, d.cw, d.cx), (1, 1, 1));
        assert_eq!(p.t0(), 100);
    }

    #[test]
    fn surrogate_mean_matches_effect() {
        let cfg = DgpConfig::new(1, 2, 100_000).with_seed(3);
        let p = simulate_dgp(&cfg).unwrap();
        let post: Vec<f64> = (cfg.t0..cfg.t).map(|s| p.x().row(s).sum()).collect();
        let mean = post.iter().sum::<f64>() / post.len() as f64;
        assert!((mean - 1.0).abs() < 3.0 / ((cfg.t - cfg.t0) as f64).sqrt(), "{mean}");
    }

    #[test]
    fn ar1_moments() {
        let mut rng = stream(1, Stream::OutcomeError);
        let x = ar1_series(100_000, 0.5, &mut rng).unwrap();
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let cov1 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.02, "{var}");
        assert!((cov1 / var - 0.5).abs() < 0.01, "{}", cov1 / var);

        let mut a = stream(2, Stream::OutcomeError);
        let mut b = stream(2, Stream::OutcomeError);
        let iid = ar1_series(50, 0.0, &mut a).unwrap();
        let raw: Vec<f64> = (0..50).map(|_| std_normal(&mut b)).collect();
        assert_eq!(iid, raw);
        assert_eq!(ar1_series(5, 1.0, &mut a), Err(DgpError::BadPhi(1.0)));
    }

    #[test]
    fn noiseless_structure() {
        let cfg = DgpConfig::new(2, 2, 300).noiseless();
        let (p, lat) = simulate_with_latents(&cfg).unwrap();
        for s in 0..p.periods() {
            let base = p.w().row(s).sum();
            let d = if p.is_post(s) { 1.0 } else { 0.0 };
            // pre outcome lies in the donor span; post effect equals X′1
            assert!((p.y()[s] - base - d * p.x().row(s).sum()).abs() < 1e-12);
            assert!((p.x().row(s).sum() - lat.rho.row(s).sum()).abs() < 1e-12);
        }
        let post: f64 = (cfg.t0..cfg.t).map(|s| p.x().row(s).sum()).sum::<f64>() / (cfg.t - cfg.t0) as f64;
        assert!((post - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contaminated_pre_period_surrogates_are_donor_combinations() {
        let mut cfg = DgpConfig::new(2, 1, 200).noiseless();
        cfg.contaminated = Some(Contamination { theta_loading_scale: 0.4 });
        let (p, psi) = simulate_contaminated(&cfg).unwrap();
        assert_eq!(psi.shape(), (2, 1));
        let pre = p.w().rows(0, cfg.t0).into_owned();
        let xs = p.x().rows(0, cfg.t0).column(0).into_owned();
        let (coef, _) = least_squares(&pre, &xs).unwrap();
        assert!((&pre * &coef - &xs).amax() < 1e-12);
        assert!((coef - psi.column(0)).amax() < 1e-10);
    }

    #[test]
    fn zero_contamination_keeps_surrogate_draws() {
        let plain = DgpConfig::new(1, 1, 150).with_seed(4);
        let mut cfg = plain.clone();
        cfg.contaminated = Some(Contamination { theta_loading_scale: 0.0 });
        let (pc, lc) = simulate_with_latents(&cfg).unwrap();
        let (pp, lp) = simulate_with_latents(&plain).unwrap();
        assert_eq!(pc.y(), pp.y());
        assert_eq!(pc.w(), pp.w());
        for s in 0..150 {
            let d = if s >= 100 { 1.0 } else { 0.0 };
            // the untreated surrogate carries no donor factor; treated periods
            // add the effect factor and its own shock
            let expect = pp.x()[(s, 0)] - (1.0 - d) * lp.rho[(s, 0)] + d * lc.delta_x[(s, 0)];
            assert!((pc.x()[(s, 0)] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = DgpConfig::new(1, 1, 200);
        cfg.t0 = 199;
        assert!(matches!(simulate_dgp(&cfg), Err(DgpError::BadConfig(_))));
        let mut cfg = DgpConfig::new(1, 1, 200);
        cfg.with_covariates = true;
        cfg.contaminated = Some(Contamination { theta_loading_scale: 1.0 });
        assert!(matches!(simulate_dgp(&cfg), Err(DgpError::BadConfig(_))));
        let mut cfg = DgpConfig::new(1, 1, 200);
        cfg.error_kind = ErrorKind::Ar1 { phi: -1.5 };
        assert_eq!(simulate_dgp(&cfg), Err(DgpError::BadPhi(-1.5)));
        assert!(simulate_contaminated(&DgpConfig::new(1, 1, 200)).is_err());
    }

    #[test]
    fn config_json_uses_documented_names() {
        let cfg: DgpConfig = serde_json::from_str(
            r#"{"F": 1, "K": 5, "T": 400, "factor_regime": "LogTrend", "error_kind": {"Ar1": {"phi": 0.3}}, "seed": 9}"#,
        )
        .unwrap();
        assert_eq!((cfg.f, cfg.k, cfg.t, cfg.t0), (1, 5, 400, 100));
        assert_eq!(cfg.error_kind, ErrorKind::Ar1 { phi: 0.3 });
        assert_eq!(cfg.noise_scale, 1.0);
        let back: DgpConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn csv_roundtrip_of_simulated_panel() {
        let mut cfg = DgpConfig::new(2, 1, 130);
        cfg.with_covariates = true;
        let p = simulate_dgp(&cfg).unwrap();
        let mut buf = Vec::new();
        write_panel(&p, &mut buf).unwrap();
        let back = read_panel(buf.as_slice(), &PanelSchema::infer(cfg.t0)).unwrap();
        assert_eq!(back, p);
    }
}
