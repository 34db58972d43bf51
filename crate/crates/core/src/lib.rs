//! Proximal synthetic control with surrogates.
//!
//! Stacked GMM moment systems for seven synthetic-control estimators of the
//! average treatment effect on the treated, sandwich and HAC inference, a
//! factor-model simulation design and a Monte Carlo harness.
//!
//! ```
//! use proxsc::{simulate_dgp, solve_with, DgpConfig, EstimatorKind, InstrumentSpec, MomentSystem, SolveOptions};
//!
//! let panel = simulate_dgp(&DgpConfig::new(1, 1, 300).noiseless()).unwrap();
//! let sys = MomentSystem::build(EstimatorKind::PiS, &panel, InstrumentSpec::identity()).unwrap();
//! let fit = solve_with(&sys, &panel, &SolveOptions::default()).unwrap();
//! assert!((fit.tau().unwrap() - 1.0).abs() < 1e-8);
//! ```

// `!(x < y)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dgp;
pub mod gmm;
pub mod linalg;
pub mod mc;
pub mod moments;
pub mod panel;
pub mod rng;

pub use dgp::{simulate_dgp, DgpConfig};
pub use gmm::{solve, solve_with, CovSpec, GmmError, GmmFit, SolveOptions, WeightScheme};
pub use mc::{run_mc, McConfig, McReport};
pub use moments::{EstimatorKind, InstrumentSpec, MomentSystem};
pub use panel::{Panel, PanelError};

#[cfg(test)]
mod test_panels;

// Compile and run every code block of the guide as a doctest.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/panels.md")]
    mod panels {}
    #[doc = include_str!("../../../book/src/estimators.md")]
    mod estimators {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
