//! Small synthetic panels shared by unit tests.

use crate::panel::{Covariates, Panel, UnitCovariates};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

/// Noisy panel with every block present (covariate dims 2, 1, 1).
pub fn noisy_panel(seed: u64, n: usize, h: usize, t: usize, t0: usize) -> Panel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = DVector::from_fn(t, |_, _| normal(&mut rng));
    let w = random_matrix(&mut rng, t, n);
    let x = random_matrix(&mut rng, t, h);
    let z0 = random_matrix(&mut rng, t, n + 1);
    let z1 = random_matrix(&mut rng, t, h + 1);
    let cy = random_matrix(&mut rng, t, 2);
    let vals: Vec<f64> = (0..t * (n + h)).map(|_| normal(&mut rng)).collect();
    let cw = UnitCovariates::from_fn(t, n, 1, |s, i, _| vals[s * n + i]);
    let cx = UnitCovariates::from_fn(t, h, 1, |s, j, _| vals[t * n + s * h + j]);
    Panel::with_covariates(
        t0,
        y,
        w,
        x,
        z0,
        z1,
        Covariates { cy: Some(cy), cw: Some(cw), cx: Some(cx) },
    )
    .unwrap()
}

/// Panel on which the moments of every proxy system vanish at `truth`:
/// `Y = C_Y′1 + λ′1 + D·ρ′1`, `W = λ + C_W`, `X = Ψ′W + ρ + C_X` with the
/// post-period mean of `ρ′1` pinned at one. `Ψ` is zero unless `contam`.
pub fn noiseless_panel(seed: u64, n: usize, h: usize, t: usize, t0: usize, contam: bool, cov: bool) -> (Panel, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = random_matrix(&mut rng, t, n);
    let mut rho = random_matrix(&mut rng, t, h);
    let post = t - t0;
    let mean: f64 = (t0..t).map(|s| rho.row(s).sum()).sum::<f64>() / post as f64;
    for s in t0..t {
        rho[(s, 0)] += 1.0 - mean;
    }
    let psi = if contam { DMatrix::from_fn(n, h, |i, j| 0.3 + 0.1 * (i + j) as f64) } else { DMatrix::zeros(n, h) };
    let cov_scale = if cov { 1.0 } else { 0.0 };
    let cy = random_matrix(&mut rng, t, 2) * cov_scale;
    let cwv = random_matrix(&mut rng, t, n) * cov_scale;
    let cxv = random_matrix(&mut rng, t, h) * cov_scale;
    let w = &lambda + &cwv;
    let mut x = DMatrix::zeros(t, h);
    let mut y = DVector::zeros(t);
    for s in 0..t {
        let d = if s >= t0 { 1.0 } else { 0.0 };
        for j in 0..h {
            x[(s, j)] = (0..n).map(|i| psi[(i, j)] * w[(s, i)]).sum::<f64>() + d * rho[(s, j)] + cxv[(s, j)];
        }
        y[s] = cy.row(s).sum() + lambda.row(s).sum() + d * rho.row(s).sum();
    }
    let z0 = &lambda + random_matrix(&mut rng, t, n) * 0.5;
    let z1 = &rho + random_matrix(&mut rng, t, h) * 0.5;
    let covariates = if cov {
        Covariates {
            cy: Some(cy),
            cw: Some(UnitCovariates::from_fn(t, n, 1, |s, i, _| cwv[(s, i)])),
            cx: Some(UnitCovariates::from_fn(t, h, 1, |s, j, _| cxv[(s, j)])),
        }
    } else {
        Covariates::default()
    };
    (Panel::with_covariates(t0, y, w, x, z0, z1, covariates).unwrap(), psi)
}

