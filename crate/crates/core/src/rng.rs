//! Reproducible random streams.
//!
//! Every random component of the simulation draws from its own ChaCha8
//! stream: the 64-bit seed fixes the key and the component fixes the stream
//! id, so adding draws to one component never shifts another. Replication `r`
//! of a Monte Carlo run uses seed `base ^ r`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Random components of the simulation design.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    DonorFactors = 1,
    SurrogateFactors = 2,
    OutcomeError = 3,
    DonorError = 4,
    SurrogateError = 5,
    EffectError = 6,
    Covariates = 7,
    SurrogateEffectError = 8,
}

/// Generator for `component` under `seed`.
pub fn stream(seed: u64, component: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(component as u64);
    rng
}

/// Seed of Monte Carlo replication `rep`.
pub fn replication_seed(base: u64, rep: u64) -> u64 {
    base ^ rep
}

pub fn std_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}
