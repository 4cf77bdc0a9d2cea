//! Benchmark environments with exact latent-state simulators, exact
//! prediction oracles and observation abstractions.

pub mod ballbounce;
pub mod gallery;
pub mod tcm;

use crate::core::{ActionId, Alphabet, CoreError, ObsId, PredictionProfile, TestOfInterest};
use rand_chacha::ChaCha8Rng;

/// A single-owner mutable environment emitting abstract observations and a
/// reward channel.
pub trait Environment {
    fn id(&self) -> &str;
    fn alphabet(&self) -> &Alphabet;
    fn tests(&self) -> &[TestOfInterest];
    /// Starts a fresh episode.
    fn reset(&mut self, rng: &mut ChaCha8Rng);
    fn step(&mut self, a: ActionId, rng: &mut ChaCha8Rng) -> (ObsId, f64);
    /// A fresh exact-oracle tracker for this environment.
    fn make_tracker(&self) -> Box<dyn ProfileTracker>;
}

/// Incremental exact prediction oracle: consumes the abstract
/// action-observation stream and exposes the ground-truth profile for the
/// current history.
pub trait ProfileTracker {
    fn reset(&mut self);
    fn observe(&mut self, a: ActionId, o: ObsId) -> Result<(), CoreError>;
    fn profile(&self) -> PredictionProfile;
}

/// Ground-truth profile for a complete history via a fresh tracker.
pub fn oracle_profile(
    tracker: &mut dyn ProfileTracker,
    steps: &[(ActionId, ObsId)],
) -> Result<PredictionProfile, CoreError> {
    tracker.reset();
    for &(a, o) in steps {
        tracker.observe(a, o)?;
    }
    Ok(tracker.profile())
}
