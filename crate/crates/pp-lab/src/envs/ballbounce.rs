//! 1D ball bounce.
//!
//! A ball walks along a k-pixel strip, reflecting at the ends; the system
//! is uncontrolled (one dummy action). The observation abstraction keeps
//! only the 3-pixel window centred on a fixed pixel x, and the single test
//! of interest asks whether the next frame shows pixel x black. With the
//! initial state pinned at position 0 moving right, the walk is fully
//! deterministic and the oracle tracks it exactly.

use super::{Environment, ProfileTracker};
use crate::core::{
    ActionId, Alphabet, CoreError, GenerativeOracle, History, ObsId, PredictionProfile,
    TestOfInterest,
};
use rand_chacha::ChaCha8Rng;

pub const A_STEP: ActionId = 0;

/// Window bits: 1 = pixel x−1, 2 = pixel x, 4 = pixel x+1.
pub fn bb_abstract(pos: i32, x: i32) -> ObsId {
    if pos == x - 1 {
        1
    } else if pos == x {
        2
    } else if pos == x + 1 {
        4
    } else {
        0
    }
}

pub fn bb_alphabet() -> Alphabet {
    let obs: Vec<String> = (0..8).map(|m| format!("w{m}")).collect();
    Alphabet::new(vec!["step".to_string()], obs).expect("static alphabet")
}

/// The single test of interest: step -> pixel x black.
pub fn bb_tests() -> Vec<TestOfInterest> {
    vec![TestOfInterest::one_step(A_STEP, vec![2, 3, 6, 7])]
}

fn advance(k: i32, pos: &mut i32, dir: &mut i32) {
    if *pos + *dir < 0 || *pos + *dir >= k {
        *dir = -*dir;
    }
    *pos += *dir;
}

pub struct BallBounceEnv {
    alphabet: Alphabet,
    tests: Vec<TestOfInterest>,
    k: i32,
    x: i32,
    pos: i32,
    dir: i32,
}

impl BallBounceEnv {
    pub fn new(k: i32, x: i32) -> Result<Self, CoreError> {
        if k < 3 || x < 1 || x > k - 2 {
            return Err(CoreError::Config(format!(
                "ball bounce needs k >= 3 and 1 <= x <= k-2 (got k={k}, x={x})"
            )));
        }
        Ok(BallBounceEnv {
            alphabet: bb_alphabet(),
            tests: bb_tests(),
            k,
            x,
            pos: 0,
            dir: 1,
        })
    }
}

impl Environment for BallBounceEnv {
    fn id(&self) -> &str {
        "ballbounce"
    }

    fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    fn tests(&self) -> &[TestOfInterest] {
        &self.tests
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) {
        self.pos = 0;
        self.dir = 1;
    }

    fn step(&mut self, _a: ActionId, _rng: &mut ChaCha8Rng) -> (ObsId, f64) {
        advance(self.k, &mut self.pos, &mut self.dir);
        (bb_abstract(self.pos, self.x), 0.0)
    }

    fn make_tracker(&self) -> Box<dyn ProfileTracker> {
        Box::new(BallBounceTracker::new(self.k, self.x))
    }
}

#[derive(Clone, Debug)]
pub struct BallBounceTracker {
    k: i32,
    x: i32,
    pos: i32,
    dir: i32,
}

impl BallBounceTracker {
    pub fn new(k: i32, x: i32) -> Self {
        BallBounceTracker { k, x, pos: 0, dir: 1 }
    }
}

impl ProfileTracker for BallBounceTracker {
    fn reset(&mut self) {
        self.pos = 0;
        self.dir = 1;
    }

    fn observe(&mut self, _a: ActionId, o: ObsId) -> Result<(), CoreError> {
        advance(self.k, &mut self.pos, &mut self.dir);
        let expect = bb_abstract(self.pos, self.x);
        if o != expect {
            return Err(CoreError::Internal(format!(
                "ball bounce history: saw window {o}, walk implies {expect}"
            )));
        }
        Ok(())
    }

    fn profile(&self) -> PredictionProfile {
        let (mut p, mut d) = (self.pos, self.dir);
        advance(self.k, &mut p, &mut d);
        PredictionProfile::new(vec![if p == self.x { 1.0 } else { 0.0 }])
    }
}

/// Exact next-window model over the abstract alphabet; the walk is
/// deterministic from the pinned start, so every distribution is a point
/// mass.
pub struct BbOracle {
    pub k: i32,
    pub x: i32,
}

impl GenerativeOracle for BbOracle {
    fn n_actions(&self) -> usize {
        1
    }

    fn n_observations(&self) -> usize {
        8
    }

    fn next_obs_dist(&self, h: &History, _a: ActionId) -> Result<Vec<(ObsId, f64)>, CoreError> {
        let mut t = BallBounceTracker::new(self.k, self.x);
        for &(a, o) in &h.steps {
            t.observe(a, o)?;
        }
        let (mut p, mut d) = (t.pos, t.dir);
        advance(self.k, &mut p, &mut d);
        Ok(vec![(bb_abstract(p, self.x), 1.0)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn approaching_from_the_left_predicts_black() {
        let t = BallBounceTracker { k: 10, x: 4, pos: 3, dir: 1 };
        assert_eq!(t.profile().values, vec![1.0]);
    }

    #[test]
    fn leaving_to_the_left_predicts_white() {
        let t = BallBounceTracker { k: 10, x: 4, pos: 3, dir: -1 };
        assert_eq!(t.profile().values, vec![0.0]);
    }

    #[test]
    fn far_ball_predicts_white() {
        let t = BallBounceTracker { k: 10, x: 4, pos: 8, dir: 1 };
        assert_eq!(t.profile().values, vec![0.0]);
    }

    #[test]
    fn tracker_follows_the_walk_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut env = BallBounceEnv::new(7, 3).unwrap();
        env.reset(&mut rng);
        let mut t = env.make_tracker();
        for _ in 0..40 {
            let pred = t.profile().values[0];
            let (o, _) = env.step(A_STEP, &mut rng);
            t.observe(A_STEP, o).unwrap();
            let black = o == 2 || o == 3 || o == 6 || o == 7;
            assert_eq!(pred, if black { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn walk_has_period_2k_minus_2() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut env = BallBounceEnv::new(5, 2).unwrap();
        env.reset(&mut rng);
        let first: Vec<ObsId> = (0..8).map(|_| env.step(A_STEP, &mut rng).0).collect();
        let second: Vec<ObsId> = (0..8).map(|_| env.step(A_STEP, &mut rng).0).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn window_out_of_range_is_rejected() {
        assert!(BallBounceEnv::new(10, 0).is_err());
        assert!(BallBounceEnv::new(10, 9).is_err());
        assert!(BallBounceEnv::new(10, 8).is_ok());
    }
}
