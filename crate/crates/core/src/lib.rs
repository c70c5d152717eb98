//! Simulation and inference toolkit for actor–critic value learners, the
//! neural signals that encode their latent variables, and the welfare
//! criteria used to judge their choices.
//!
//! Modules map onto the pipeline: [`environment`] and [`agent`] simulate
//! behaviour, [`neural`] encodes latents into synthetic traces, [`inference`]
//! fits and discriminates models, [`welfare`] evaluates policies under
//! declared criteria, [`scenarios`] builds canonical instances and [`audit`]
//! runs the six-step checklist.

pub mod agent;
pub mod audit;
pub mod environment;
pub mod error;
pub mod inference;
pub mod neural;
pub mod scenarios;
pub mod welfare;

pub use error::{Error, Result};

use rand::SeedableRng;

/// The seeded stream every simulation draws from.
pub type SimRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// An independent stream derived from `seed`, for replicate `index`.
pub fn substream(seed: u64, index: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}
