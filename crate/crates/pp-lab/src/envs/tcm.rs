//! Three Card Monte.
//!
//! Three face-down cards; the middle one is the ace. A dealer repeatedly
//! swaps pairs, favouring the pair it has swapped the least so far, and
//! occasionally prompts the agent to guess. Flipping the ace when prompted
//! pays +1; any other flip pays -1. The tests of interest ask, for each
//! card, whether flipping it now would reveal the ace, so the ground-truth
//! profile is always one-hot over the tracked ace position (except at the
//! very start of a game, before the deal has been shown).

use super::{Environment, ProfileTracker};
use crate::core::{
    ActionId, Alphabet, CoreError, GenerativeOracle, History, ObsId, PredictionProfile,
    TestOfInterest,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const A_WATCH: ActionId = 0;
/// flip1, flip2, flip3
pub const A_FLIP: [ActionId; 3] = [1, 2, 3];

/// pos1, pos2, pos3
pub const O_POS: [ObsId; 3] = [0, 1, 2];
/// swap12, swap13, swap23
pub const O_SWAP: [ObsId; 3] = [3, 4, 5];
pub const O_PROMPT: ObsId = 6;
pub const O_ACE: ObsId = 7;
pub const O_NOTACE: ObsId = 8;

/// Card index pairs for the three swaps, 0-indexed.
pub const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
/// The ace is always dealt to the middle card.
pub const DEAL_POS: usize = 1;

pub fn tcm_alphabet() -> Alphabet {
    Alphabet::new(
        vec!["watch", "flip1", "flip2", "flip3"],
        vec![
            "pos1", "pos2", "pos3", "swap12", "swap13", "swap23", "prompt", "ace", "notace",
        ],
    )
    .expect("static alphabet")
}

/// The three one-step tests of interest: flipX -> {ace}.
pub fn tcm_tests() -> Vec<TestOfInterest> {
    A_FLIP
        .iter()
        .map(|&a| TestOfInterest::one_step(a, vec![O_ACE]))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Dealing,
    Mixing,
    Prompted,
}

/// Distribution over (swap pair 0..3, prompt) given the per-game swap
/// counters: 0.5 spread over the least-swapped pairs, 0.4 over the rest,
/// 0.1 on the prompt. A three-way tie spreads the whole 0.9 uniformly.
fn dealer_dist(counts: &[u32; 3]) -> [f64; 4] {
    let min = *counts.iter().min().unwrap();
    let argmin: Vec<usize> = (0..3).filter(|&i| counts[i] == min).collect();
    let mut d = [0.0; 4];
    d[3] = 0.1;
    if argmin.len() == 3 {
        for p in &mut d[..3] {
            *p = 0.9 / 3.0;
        }
    } else {
        let rest = 3 - argmin.len();
        for i in 0..3 {
            d[i] = if counts[i] == min {
                0.5 / argmin.len() as f64
            } else {
                0.4 / rest as f64
            };
        }
    }
    d
}

fn apply_swap(pos: usize, pair: usize) -> usize {
    let (a, b) = PAIRS[pair];
    if pos == a {
        b
    } else if pos == b {
        a
    } else {
        pos
    }
}

#[derive(Clone, Debug)]
struct TcmCore {
    phase: Phase,
    ace: usize,
    counts: [u32; 3],
}

impl TcmCore {
    fn fresh_deal() -> Self {
        TcmCore {
            phase: Phase::Dealing,
            ace: DEAL_POS,
            counts: [0; 3],
        }
    }

    /// Post-resolution state: the next game starts already dealt, so the
    /// resolution observation itself carries the outcome and the deal
    /// observation is only ever seen at the start of an episode.
    fn redeal_mixing(&mut self) {
        self.ace = DEAL_POS;
        self.counts = [0; 3];
        self.phase = Phase::Mixing;
    }
}

pub struct TcmEnv {
    alphabet: Alphabet,
    tests: Vec<TestOfInterest>,
    state: TcmCore,
}

impl TcmEnv {
    pub fn new() -> Self {
        TcmEnv {
            alphabet: tcm_alphabet(),
            tests: tcm_tests(),
            state: TcmCore::fresh_deal(),
        }
    }
}

impl Default for TcmEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for TcmEnv {
    fn id(&self) -> &str {
        "tcm"
    }

    fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    fn tests(&self) -> &[TestOfInterest] {
        &self.tests
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) {
        self.state = TcmCore::fresh_deal();
    }

    fn step(&mut self, a: ActionId, rng: &mut ChaCha8Rng) -> (ObsId, f64) {
        let s = &mut self.state;
        match s.phase {
            Phase::Dealing => {
                s.phase = Phase::Mixing;
                (O_POS[s.ace], 0.0)
            }
            Phase::Mixing => {
                if a == A_WATCH {
                    let d = dealer_dist(&s.counts);
                    let mut u: f64 = rng.gen();
                    let mut pick = 3;
                    for (i, &p) in d.iter().enumerate() {
                        if u < p {
                            pick = i;
                            break;
                        }
                        u -= p;
                    }
                    if pick == 3 {
                        s.phase = Phase::Prompted;
                        (O_PROMPT, 0.0)
                    } else {
                        s.ace = apply_swap(s.ace, pick);
                        s.counts[pick] += 1;
                        (O_SWAP[pick], 0.0)
                    }
                } else {
                    let flipped = (a - 1) as usize;
                    let obs = if flipped == s.ace { O_ACE } else { O_NOTACE };
                    (obs, -1.0)
                }
            }
            Phase::Prompted => {
                if a == A_WATCH {
                    s.redeal_mixing();
                    (O_POS[DEAL_POS], -1.0)
                } else {
                    let flipped = (a - 1) as usize;
                    let hit = flipped == s.ace;
                    s.redeal_mixing();
                    (
                        if hit { O_ACE } else { O_NOTACE },
                        if hit { 1.0 } else { -1.0 },
                    )
                }
            }
        }
    }

    fn make_tracker(&self) -> Box<dyn ProfileTracker> {
        Box::new(TcmTracker::new())
    }
}

/// Exact oracle tracker. Reconstructs (phase, ace position, swap counters)
/// from the observation stream alone; every observation the environment can
/// emit pins the latent state down exactly.
#[derive(Clone, Debug)]
pub struct TcmTracker {
    phase: Phase,
    tracked: usize,
    counts: [u32; 3],
}

impl TcmTracker {
    pub fn new() -> Self {
        TcmTracker {
            phase: Phase::Dealing,
            tracked: DEAL_POS,
            counts: [0; 3],
        }
    }

    fn bad(&self, a: ActionId, o: ObsId) -> CoreError {
        CoreError::Internal(format!(
            "impossible three-card-monte step (action {a}, observation {o}) in phase {:?}",
            self.phase
        ))
    }
}

impl Default for TcmTracker {
    fn default() -> Self {
        Self::new()
    }
}

impl ProfileTracker for TcmTracker {
    fn reset(&mut self) {
        *self = TcmTracker::new();
    }

    fn observe(&mut self, a: ActionId, o: ObsId) -> Result<(), CoreError> {
        match self.phase {
            Phase::Dealing => {
                let pos = O_POS.iter().position(|&p| p == o);
                match pos {
                    Some(x) => {
                        self.tracked = x;
                        self.counts = [0; 3];
                        self.phase = Phase::Mixing;
                        Ok(())
                    }
                    None => Err(self.bad(a, o)),
                }
            }
            Phase::Mixing => {
                if let Some(j) = O_SWAP.iter().position(|&s| s == o) {
                    if a != A_WATCH {
                        return Err(self.bad(a, o));
                    }
                    self.tracked = apply_swap(self.tracked, j);
                    self.counts[j] += 1;
                    Ok(())
                } else if o == O_PROMPT {
                    if a != A_WATCH {
                        return Err(self.bad(a, o));
                    }
                    self.phase = Phase::Prompted;
                    Ok(())
                } else if o == O_ACE || o == O_NOTACE {
                    let x = match A_FLIP.iter().position(|&f| f == a) {
                        Some(x) => x,
                        None => return Err(self.bad(a, o)),
                    };
                    let expect = if x == self.tracked { O_ACE } else { O_NOTACE };
                    if o != expect {
                        return Err(self.bad(a, o));
                    }
                    Ok(())
                } else {
                    Err(self.bad(a, o))
                }
            }
            Phase::Prompted => {
                if o == O_ACE || o == O_NOTACE {
                    let x = match A_FLIP.iter().position(|&f| f == a) {
                        Some(x) => x,
                        None => return Err(self.bad(a, o)),
                    };
                    let expect = if x == self.tracked { O_ACE } else { O_NOTACE };
                    if o != expect {
                        return Err(self.bad(a, o));
                    }
                    self.tracked = DEAL_POS;
                    self.counts = [0; 3];
                    self.phase = Phase::Mixing;
                    Ok(())
                } else if o == O_POS[DEAL_POS] && a == A_WATCH {
                    self.tracked = DEAL_POS;
                    self.counts = [0; 3];
                    self.phase = Phase::Mixing;
                    Ok(())
                } else {
                    Err(self.bad(a, o))
                }
            }
        }
    }

    fn profile(&self) -> PredictionProfile {
        let mut v = vec![0.0; 3];
        if self.phase != Phase::Dealing {
            v[self.tracked] = 1.0;
        }
        PredictionProfile::new(v)
    }
}

/// Convenience: ground-truth profile for a complete history.
pub fn tcm_oracle(history: &History) -> Result<PredictionProfile, CoreError> {
    let mut t = TcmTracker::new();
    for &(a, o) in &history.steps {
        t.observe(a, o)?;
    }
    Ok(t.profile())
}

/// Exact next-observation model, usable with the chain-rule predictor.
pub struct TcmOracle;

impl GenerativeOracle for TcmOracle {
    fn n_actions(&self) -> usize {
        4
    }

    fn n_observations(&self) -> usize {
        9
    }

    fn next_obs_dist(&self, h: &History, a: ActionId) -> Result<Vec<(ObsId, f64)>, CoreError> {
        let mut t = TcmTracker::new();
        for &(pa, po) in &h.steps {
            t.observe(pa, po)?;
        }
        Ok(match t.phase {
            Phase::Dealing => vec![(O_POS[t.tracked], 1.0)],
            Phase::Mixing => {
                if a == A_WATCH {
                    let d = dealer_dist(&t.counts);
                    let mut out: Vec<(ObsId, f64)> = (0..3)
                        .filter(|&i| d[i] > 0.0)
                        .map(|i| (O_SWAP[i], d[i]))
                        .collect();
                    out.push((O_PROMPT, d[3]));
                    out
                } else {
                    let x = (a - 1) as usize;
                    vec![(if x == t.tracked { O_ACE } else { O_NOTACE }, 1.0)]
                }
            }
            Phase::Prompted => {
                if a == A_WATCH {
                    vec![(O_POS[DEAL_POS], 1.0)]
                } else {
                    let x = (a - 1) as usize;
                    vec![(if x == t.tracked { O_ACE } else { O_NOTACE }, 1.0)]
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::phi;
    use rand::SeedableRng;

    fn hist(steps: &[(ActionId, ObsId)]) -> History {
        History {
            steps: steps.to_vec(),
        }
    }

    #[test]
    fn deal_points_at_middle_card() {
        let p = tcm_oracle(&hist(&[(A_WATCH, O_POS[1])])).unwrap();
        assert_eq!(p.values, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn swaps_move_the_tracked_ace() {
        let p = tcm_oracle(&hist(&[(A_WATCH, O_POS[1]), (A_WATCH, O_SWAP[0])])).unwrap();
        assert_eq!(p.values, vec![1.0, 0.0, 0.0]);
        let p = tcm_oracle(&hist(&[
            (A_WATCH, O_POS[1]),
            (A_WATCH, O_SWAP[0]),
            (A_WATCH, O_SWAP[1]),
        ]))
        .unwrap();
        assert_eq!(p.values, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn swap_twice_is_identity() {
        for j in 0..3u8 {
            let base = hist(&[(A_WATCH, O_POS[1])]);
            let mut twice = base.clone();
            twice.steps.push((A_WATCH, O_SWAP[j as usize]));
            twice.steps.push((A_WATCH, O_SWAP[j as usize]));
            assert_eq!(
                tcm_oracle(&base).unwrap().values,
                tcm_oracle(&twice).unwrap().values
            );
        }
    }

    #[test]
    fn degenerate_tie_gives_three_tenths_per_pair() {
        let d = dealer_dist(&[0, 0, 0]);
        for p in &d[..3] {
            assert!((p - 0.3).abs() < 1e-12);
        }
        assert!((d[3] - 0.1).abs() < 1e-12);
        let d = dealer_dist(&[2, 0, 1]);
        assert!((d[0] - 0.2).abs() < 1e-12);
        assert!((d[1] - 0.5).abs() < 1e-12);
        assert!((d[2] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn mixing_flip_reveals_and_costs_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut env = TcmEnv::new();
        env.reset(&mut rng);
        let (o, r) = env.step(A_WATCH, &mut rng);
        assert_eq!(o, O_POS[1]);
        assert_eq!(r, 0.0);
        let (o, r) = env.step(A_FLIP[1], &mut rng);
        assert_eq!(o, O_ACE);
        assert_eq!(r, -1.0);
        let (o, r) = env.step(A_FLIP[0], &mut rng);
        assert_eq!(o, O_NOTACE);
        assert_eq!(r, -1.0);
    }

    #[test]
    fn prompted_flip_pays_and_redeals() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut env = TcmEnv::new();
        env.reset(&mut rng);
        env.state.phase = Phase::Prompted;
        env.state.ace = 2;
        let (o, r) = env.step(A_FLIP[2], &mut rng);
        assert_eq!((o, r), (O_ACE, 1.0));
        assert_eq!(env.state.phase, Phase::Mixing);
        assert_eq!(env.state.ace, DEAL_POS);
        assert_eq!(env.state.counts, [0; 3]);
    }

    #[test]
    fn tracker_matches_chain_rule_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let tests = tcm_tests();
        let oracle = TcmOracle;
        for _ in 0..50 {
            let mut env = TcmEnv::new();
            env.reset(&mut rng);
            let mut tracker = TcmTracker::new();
            let mut h = History::null();
            for _ in 0..10 {
                let a = rng.gen_range(0..4) as ActionId;
                let (o, _) = env.step(a, &mut rng);
                tracker.observe(a, o).unwrap();
                h.steps.push((a, o));
                let via_chain = phi(&oracle, &h, &tests).unwrap();
                let direct = tracker.profile();
                assert!(direct.linf_distance(&via_chain) < 1e-12);
            }
        }
    }

    #[test]
    fn impossible_observation_is_rejected() {
        assert!(tcm_oracle(&hist(&[(A_WATCH, O_SWAP[0])])).is_err());
        assert!(tcm_oracle(&hist(&[(A_WATCH, O_POS[1]), (A_FLIP[0], O_ACE)])).is_err());
    }
}
