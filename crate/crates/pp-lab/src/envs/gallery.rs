//! Shooting gallery.
//!
//! An 8x8 image contains 2x2 obstacle blocks and a target that moves
//! diagonally, bouncing off walls and obstacles. Each step the target
//! sticks with probability 0.3, otherwise moves; with probability 0.01 the
//! whole scene resets. Shooting pays +10 when the target sits at the fixed
//! crosshairs cell afterwards, -5 otherwise, and a hit forces a reset on
//! the next step. The single test of interest is whether a watch action
//! would leave the target at the crosshairs (in a non-reset frame).
//!
//! Observations are abstracted to (target position, blocked/free pattern of
//! the 8 surrounding cells); resets collapse to one distinguished symbol.
//! The oracle tracks the target and a direction belief that is uniform over
//! its support: stick steps keep the support, moves filter it to the
//! directions that explain the observed displacement and map each survivor
//! through the bounce.

use super::{Environment, ProfileTracker};
use crate::core::{ActionId, Alphabet, CoreError, ObsId, PredictionProfile, TestOfInterest};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

pub const GRID: i32 = 8;
pub const CROSS: (i32, i32) = (4, 4);
pub const BLOCK_P: f64 = 0.1;
pub const RESET_P: f64 = 0.01;
pub const STICK_P: f64 = 0.3;

pub const A_WATCH: ActionId = 0;
pub const A_SHOOT: ActionId = 1;
pub const O_RESET: ObsId = 0;

pub const DIRS: [(i32, i32); 4] = [(-1, -1), (-1, 1), (1, -1), (1, 1)];

/// Neighbor offsets in pattern-bit order.
const NEIGHBORS: [(i32, i32); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn in_bounds(r: i32, c: i32) -> bool {
    (0..GRID).contains(&r) && (0..GRID).contains(&c)
}

fn bit(r: i32, c: i32) -> u64 {
    1u64 << (r * GRID + c)
}

/// Abstract observation id for a non-reset frame: 1 + pos * 256 + pattern.
pub fn abstract_obs(pos: (i32, i32), pattern: u8) -> ObsId {
    1 + (pos.0 * GRID + pos.1) as ObsId * 256 + pattern as ObsId
}

fn decode_obs(o: ObsId) -> Option<((i32, i32), u8)> {
    if o == O_RESET {
        return None;
    }
    let v = o - 1;
    let pos = v / 256;
    Some((((pos as i32) / GRID, (pos as i32) % GRID), (v % 256) as u8))
}

/// 8-neighbor blocked pattern around `pos`; out-of-bounds counts blocked.
pub fn pattern_at(grid: u64, pos: (i32, i32)) -> u8 {
    let mut pat = 0u8;
    for (i, (dr, dc)) in NEIGHBORS.iter().enumerate() {
        let (r, c) = (pos.0 + dr, pos.1 + dc);
        if !in_bounds(r, c) || grid & bit(r, c) != 0 {
            pat |= 1 << i;
        }
    }
    pat
}

pub fn gallery_alphabet() -> Alphabet {
    let mut obs = Vec::with_capacity(1 + 64 * 256);
    obs.push("reset".to_string());
    for pos in 0..64 {
        for pat in 0..256 {
            obs.push(format!("t{pos}b{pat}"));
        }
    }
    Alphabet::new(vec!["watch".to_string(), "shoot".to_string()], obs).expect("static alphabet")
}

/// The single test of interest: watch -> target at the crosshairs,
/// non-reset frame (any surrounding pattern).
pub fn gallery_tests() -> Vec<TestOfInterest> {
    let obs: Vec<ObsId> = (0u32..256).map(|pat| abstract_obs(CROSS, pat as u8)).collect();
    vec![TestOfInterest::one_step(A_WATCH, obs)]
}

/// Deterministic bounce. Attempt the diagonal cell; on a block, flip each
/// direction component whose single-axis probe is blocked (both if the
/// diagonal alone is blocked) and re-attempt; then try the full reversal of
/// the original direction; if everything is blocked, stay put.
pub fn resolve_bounce(
    pos: (i32, i32),
    dir: (i32, i32),
    blocked: &dyn Fn(i32, i32) -> bool,
) -> ((i32, i32), (i32, i32)) {
    let is_blocked = |r: i32, c: i32| !in_bounds(r, c) || blocked(r, c);
    let attempt = |d: (i32, i32)| {
        let (r, c) = (pos.0 + d.0, pos.1 + d.1);
        if is_blocked(r, c) {
            None
        } else {
            Some(((r, c), d))
        }
    };
    if let Some(hit) = attempt(dir) {
        return hit;
    }
    let row_probe = is_blocked(pos.0 + dir.0, pos.1);
    let col_probe = is_blocked(pos.0, pos.1 + dir.1);
    let flipped = if row_probe || col_probe {
        (
            if row_probe { -dir.0 } else { dir.0 },
            if col_probe { -dir.1 } else { dir.1 },
        )
    } else {
        (-dir.0, -dir.1)
    };
    if let Some(hit) = attempt(flipped) {
        return hit;
    }
    let reversed = (-dir.0, -dir.1);
    if reversed != flipped {
        if let Some(hit) = attempt(reversed) {
            return hit;
        }
    }
    (pos, dir)
}

pub struct GalleryEnv {
    alphabet: Alphabet,
    tests: Vec<TestOfInterest>,
    grid: u64,
    pos: (i32, i32),
    dir: (i32, i32),
    pending_reset: bool,
}

fn draw_scene(rng: &mut ChaCha8Rng) -> (u64, (i32, i32), (i32, i32)) {
    let cross_block = (CROSS.0 / 2, CROSS.1 / 2);
    let mut grid = 0u64;
    for br in 0..4 {
        for bc in 0..4 {
            if (br, bc) != cross_block && rng.gen::<f64>() < BLOCK_P {
                for r in 0..2 {
                    for c in 0..2 {
                        grid |= bit(br * 2 + r, bc * 2 + c);
                    }
                }
            }
        }
    }
    let free: Vec<(i32, i32)> = (0..GRID)
        .flat_map(|r| (0..GRID).map(move |c| (r, c)))
        .filter(|&(r, c)| grid & bit(r, c) == 0 && (r, c) != CROSS)
        .collect();
    let pos = free[rng.gen_range(0..free.len())];
    let dir = DIRS[rng.gen_range(0..4)];
    (grid, pos, dir)
}

impl GalleryEnv {
    pub fn new() -> Self {
        GalleryEnv {
            alphabet: gallery_alphabet(),
            tests: gallery_tests(),
            grid: 0,
            pos: (0, 0),
            dir: (1, 1),
            pending_reset: false,
        }
    }

    /// Current latent state, for tests and Monte-Carlo checks.
    pub fn latent(&self) -> (u64, (i32, i32), (i32, i32)) {
        (self.grid, self.pos, self.dir)
    }

    pub fn force_latent(&mut self, grid: u64, pos: (i32, i32), dir: (i32, i32)) {
        self.grid = grid;
        self.pos = pos;
        self.dir = dir;
        self.pending_reset = false;
    }
}

impl Default for GalleryEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for GalleryEnv {
    fn id(&self) -> &str {
        "gallery"
    }

    fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    fn tests(&self) -> &[TestOfInterest] {
        &self.tests
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        let (grid, pos, dir) = draw_scene(rng);
        self.grid = grid;
        self.pos = pos;
        self.dir = dir;
        self.pending_reset = false;
    }

    fn step(&mut self, a: ActionId, rng: &mut ChaCha8Rng) -> (ObsId, f64) {
        let reset_now = self.pending_reset || rng.gen::<f64>() < RESET_P;
        self.pending_reset = false;
        let obs = if reset_now {
            let (grid, pos, dir) = draw_scene(rng);
            self.grid = grid;
            self.pos = pos;
            self.dir = dir;
            O_RESET
        } else {
            if rng.gen::<f64>() >= STICK_P {
                let grid = self.grid;
                let (p, d) = resolve_bounce(self.pos, self.dir, &|r, c| grid & bit(r, c) != 0);
                self.pos = p;
                self.dir = d;
            }
            abstract_obs(self.pos, pattern_at(self.grid, self.pos))
        };
        let reward = if a == A_SHOOT {
            if obs != O_RESET && self.pos == CROSS {
                self.pending_reset = true;
                10.0
            } else {
                -5.0
            }
        } else {
            0.0
        };
        (obs, reward)
    }

    fn make_tracker(&self) -> Box<dyn ProfileTracker> {
        Box::new(GalleryTracker::new())
    }
}

/// Probability that a watch step from the scene-reset distribution leaves
/// the target at the crosshairs in a non-reset frame. Exact enumeration
/// over obstacle layouts (the crosshairs block is always free), target
/// placements and directions. Cached process-wide.
pub fn post_reset_prediction() -> f64 {
    static VALUE: OnceLock<f64> = OnceLock::new();
    *VALUE.get_or_init(|| {
        let cross_block_idx = (CROSS.0 / 2) * 4 + CROSS.1 / 2;
        let others: Vec<i32> = (0..16).filter(|&i| i != cross_block_idx).collect();
        let mut total = 0.0;
        for mask in 0u32..(1 << 15) {
            let mut grid = 0u64;
            let mut k = 0;
            for (j, &blk) in others.iter().enumerate() {
                if mask & (1 << j) != 0 {
                    k += 1;
                    let (br, bc) = (blk / 4, blk % 4);
                    for r in 0..2 {
                        for c in 0..2 {
                            grid |= bit(br * 2 + r, bc * 2 + c);
                        }
                    }
                }
            }
            let w = BLOCK_P.powi(k) * (1.0 - BLOCK_P).powi(15 - k);
            let free = 64 - 4 * k;
            let denom = (free - 1) as f64;
            let blocked = |r: i32, c: i32| grid & bit(r, c) != 0;
            let mut land = 0.0;
            // A move always ends on a diagonal neighbor of the start (or the
            // start itself), so only the four diagonal neighbors of the
            // crosshairs can reach it; try them against every direction.
            for nd in DIRS {
                let start = (CROSS.0 + nd.0, CROSS.1 + nd.1);
                if blocked(start.0, start.1) {
                    continue;
                }
                for d in DIRS {
                    if resolve_bounce(start, d, &blocked).0 == CROSS {
                        land += 1.0 / (4.0 * denom);
                    }
                }
            }
            total += w * land;
        }
        (1.0 - RESET_P) * (1.0 - STICK_P) * total
    })
}

#[derive(Clone, Debug)]
enum TrackState {
    /// Start of an episode or just after a reset frame: the scene is
    /// distributed as a fresh draw.
    Unknown,
    Known {
        pos: (i32, i32),
        pattern: u8,
        support: Vec<(i32, i32)>,
    },
}

#[derive(Clone, Debug)]
pub struct GalleryTracker {
    state: TrackState,
}

impl GalleryTracker {
    pub fn new() -> Self {
        GalleryTracker {
            state: TrackState::Unknown,
        }
    }

    /// Direction-belief support (empty means scene unknown).
    pub fn support(&self) -> &[(i32, i32)] {
        match &self.state {
            TrackState::Unknown => &[],
            TrackState::Known { support, .. } => support,
        }
    }
}

impl Default for GalleryTracker {
    fn default() -> Self {
        Self::new()
    }
}

fn pattern_blocked(pos: (i32, i32), pattern: u8) -> impl Fn(i32, i32) -> bool {
    move |r: i32, c: i32| {
        if (r, c) == pos {
            return false;
        }
        match NEIGHBORS
            .iter()
            .position(|&(dr, dc)| (pos.0 + dr, pos.1 + dc) == (r, c))
        {
            Some(i) => pattern & (1 << i) != 0,
            // Cells outside the 3x3 window are never probed by the bounce.
            None => true,
        }
    }
}

impl ProfileTracker for GalleryTracker {
    fn reset(&mut self) {
        self.state = TrackState::Unknown;
    }

    fn observe(&mut self, _a: ActionId, o: ObsId) -> Result<(), CoreError> {
        let malformed = |msg: &str| CoreError::Internal(format!("gallery history: {msg}"));
        let decoded = decode_obs(o);
        self.state = match (&self.state, decoded) {
            (_, None) => TrackState::Unknown,
            (TrackState::Unknown, Some((pos, pattern))) => TrackState::Known {
                pos,
                pattern,
                support: DIRS.to_vec(),
            },
            (
                TrackState::Known {
                    pos,
                    pattern,
                    support,
                },
                Some((npos, npat)),
            ) => {
                if npos == *pos {
                    if npat != *pattern {
                        return Err(malformed("pattern changed without movement or reset"));
                    }
                    TrackState::Known {
                        pos: *pos,
                        pattern: *pattern,
                        support: support.clone(),
                    }
                } else {
                    let blocked = pattern_blocked(*pos, *pattern);
                    let mut next = Vec::new();
                    for &d in support {
                        let (landing, nd) = resolve_bounce(*pos, d, &blocked);
                        if landing == npos && !next.contains(&nd) {
                            next.push(nd);
                        }
                    }
                    if next.is_empty() {
                        return Err(malformed("no direction explains the observed move"));
                    }
                    TrackState::Known {
                        pos: npos,
                        pattern: npat,
                        support: next,
                    }
                }
            }
        };
        Ok(())
    }

    fn profile(&self) -> PredictionProfile {
        let p = match &self.state {
            TrackState::Unknown => post_reset_prediction(),
            TrackState::Known {
                pos,
                pattern,
                support,
            } => {
                let blocked = pattern_blocked(*pos, *pattern);
                let at_cross = if *pos == CROSS { 1.0 } else { 0.0 };
                let landing = support
                    .iter()
                    .filter(|&&d| resolve_bounce(*pos, d, &blocked).0 == CROSS)
                    .count() as f64
                    / support.len() as f64;
                (1.0 - RESET_P) * (STICK_P * at_cross + (1.0 - STICK_P) * landing)
            }
        };
        PredictionProfile::new(vec![p])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn unobstructed_move_keeps_direction() {
        let ((r, c), d) = resolve_bounce((3, 3), (1, 1), &|_, _| false);
        assert_eq!(((r, c), d), ((4, 4), (1, 1)));
    }

    #[test]
    fn wall_bounce_flips_the_blocked_component() {
        let (p, d) = resolve_bounce((0, 3), (-1, 1), &|_, _| false);
        assert_eq!((p, d), ((1, 4), (1, 1)));
    }

    #[test]
    fn corner_bounce_flips_both_components() {
        let (p, d) = resolve_bounce((0, 0), (-1, -1), &|_, _| false);
        assert_eq!((p, d), ((1, 1), (1, 1)));
    }

    #[test]
    fn enclosed_target_stays() {
        let blocked = |r: i32, c: i32| (r, c) != (3, 3);
        let (p, d) = resolve_bounce((3, 3), (1, 1), &blocked);
        assert_eq!((p, d), ((3, 3), (1, 1)));
    }

    #[test]
    fn shoot_at_crosshairs_hits_at_stick_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut env = GalleryEnv::new();
        let n = 200_000;
        let mut hits = 0;
        for _ in 0..n {
            env.force_latent(0, CROSS, (1, 1));
            let (_, r) = env.step(A_SHOOT, &mut rng);
            if r > 0.0 {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        let expect = (1.0 - RESET_P) * STICK_P;
        assert!(
            (freq - expect).abs() < 0.005,
            "hit rate {freq} vs {expect}"
        );
    }

    #[test]
    fn far_target_always_misses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut env = GalleryEnv::new();
        for _ in 0..1000 {
            env.force_latent(0, (0, 0), (1, 1));
            let (_, r) = env.step(A_SHOOT, &mut rng);
            assert_eq!(r, -5.0);
        }
    }

    #[test]
    fn known_direction_toward_crosshairs_predicts_693() {
        let mut t = GalleryTracker::new();
        t.observe(A_WATCH, abstract_obs((2, 2), 0)).unwrap();
        t.observe(A_WATCH, abstract_obs((3, 3), 0)).unwrap();
        assert_eq!(t.support(), &[(1, 1)]);
        let p = t.profile().values[0];
        assert!((p - 0.99 * 0.7).abs() < 1e-12, "got {p}");
    }

    #[test]
    fn target_at_crosshairs_predicts_297_when_no_return() {
        // Direction known and pointing away: only the stick branch scores.
        let mut t = GalleryTracker::new();
        t.observe(A_WATCH, abstract_obs((2, 2), 0)).unwrap();
        t.observe(A_WATCH, abstract_obs((3, 3), 0)).unwrap();
        t.observe(A_WATCH, abstract_obs((4, 4), 0)).unwrap();
        let p = t.profile().values[0];
        assert!((p - 0.99 * 0.3).abs() < 1e-12, "got {p}");
    }

    #[test]
    fn far_target_predicts_zero() {
        let mut t = GalleryTracker::new();
        t.observe(A_WATCH, abstract_obs((0, 1), 0)).unwrap();
        assert_eq!(t.profile().values[0], 0.0);
    }

    #[test]
    fn stick_preserves_support_and_move_filters_it() {
        let mut t = GalleryTracker::new();
        t.observe(A_WATCH, abstract_obs((5, 2), 0)).unwrap();
        assert_eq!(t.support().len(), 4);
        t.observe(A_WATCH, abstract_obs((5, 2), 0)).unwrap();
        assert_eq!(t.support().len(), 4);
        t.observe(A_WATCH, abstract_obs((6, 3), 0)).unwrap();
        assert_eq!(t.support(), &[(1, 1)]);
    }

    #[test]
    fn post_reset_prediction_matches_monte_carlo() {
        let exact = post_reset_prediction();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut env = GalleryEnv::new();
        let n = 300_000;
        let mut hit = 0;
        for _ in 0..n {
            env.reset(&mut rng);
            let (o, _) = env.step(A_WATCH, &mut rng);
            if let Some((pos, _)) = decode_obs(o) {
                if pos == CROSS {
                    hit += 1;
                }
            }
        }
        let freq = hit as f64 / n as f64;
        assert!(
            (freq - exact).abs() < 0.003,
            "monte-carlo {freq} vs exact {exact}"
        );
    }

    #[test]
    fn tracker_rejects_inconsistent_moves() {
        let mut t = GalleryTracker::new();
        t.observe(A_WATCH, abstract_obs((2, 2), 0)).unwrap();
        assert!(t.observe(A_WATCH, abstract_obs((6, 6), 0)).is_err());
    }
}
