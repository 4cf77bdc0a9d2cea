//! Alphabets, histories, tests of interest, prediction profiles and exact
//! test prediction via the chain rule over a generative oracle.

use std::collections::HashMap;
use std::fmt::Write as _;
use thiserror::Error;

pub type ActionId = u16;
pub type ObsId = u32;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("internal consistency error: {0}")]
    Internal(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// A named action/observation alphabet with dense integer indexing.
#[derive(Debug, Clone)]
pub struct Alphabet {
    actions: Vec<String>,
    observations: Vec<String>,
    action_index: HashMap<String, ActionId>,
    obs_index: HashMap<String, ObsId>,
}

impl Alphabet {
    pub fn new<S: Into<String>>(
        actions: Vec<S>,
        observations: Vec<S>,
    ) -> Result<Self, CoreError> {
        let actions: Vec<String> = actions.into_iter().map(Into::into).collect();
        let observations: Vec<String> = observations.into_iter().map(Into::into).collect();
        if actions.is_empty() || observations.is_empty() {
            return Err(CoreError::Config("alphabet lists must be non-empty".into()));
        }
        let mut action_index = HashMap::new();
        for (i, a) in actions.iter().enumerate() {
            if action_index.insert(a.clone(), i as ActionId).is_some() {
                return Err(CoreError::Config(format!("duplicate action name {a:?}")));
            }
        }
        let mut obs_index = HashMap::new();
        for (i, o) in observations.iter().enumerate() {
            if obs_index.insert(o.clone(), i as ObsId).is_some() {
                return Err(CoreError::Config(format!("duplicate observation name {o:?}")));
            }
        }
        Ok(Alphabet { actions, observations, action_index, obs_index })
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn n_observations(&self) -> usize {
        self.observations.len()
    }

    pub fn action_name(&self, a: ActionId) -> &str {
        &self.actions[a as usize]
    }

    pub fn obs_name(&self, o: ObsId) -> &str {
        &self.observations[o as usize]
    }

    pub fn action_id(&self, name: &str) -> Option<ActionId> {
        self.action_index.get(name).copied()
    }

    pub fn obs_id(&self, name: &str) -> Option<ObsId> {
        self.obs_index.get(name).copied()
    }
}

/// One action-observation step.
pub type Step = (ActionId, ObsId);

/// A finite action-observation sequence; the empty sequence is the null
/// history.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct History {
    pub steps: Vec<Step>,
}

impl History {
    pub fn null() -> Self {
        History { steps: Vec::new() }
    }

    pub fn from_steps(steps: Vec<Step>) -> Self {
        History { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn extended(&self, a: ActionId, o: ObsId) -> History {
        let mut steps = self.steps.clone();
        steps.push((a, o));
        History { steps }
    }

    /// The trailing `n` steps as a history of their own.
    pub fn suffix(&self, n: usize) -> History {
        let start = self.steps.len().saturating_sub(n);
        History { steps: self.steps[start..].to_vec() }
    }
}

/// A per-step observation predicate: a non-empty set of observation ids.
pub type ObsPredicate = Vec<ObsId>;

/// A test of interest: actions paired with per-step observation predicates.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TestOfInterest {
    pub steps: Vec<(ActionId, ObsPredicate)>,
}

impl TestOfInterest {
    pub fn new(steps: Vec<(ActionId, ObsPredicate)>) -> Self {
        TestOfInterest { steps }
    }

    /// A one-step test.
    pub fn one_step(a: ActionId, pred: ObsPredicate) -> Self {
        TestOfInterest { steps: vec![(a, pred)] }
    }

    pub fn actions(&self) -> impl Iterator<Item = ActionId> + '_ {
        self.steps.iter().map(|(a, _)| *a)
    }
}

/// A vector of predictions, one per test of interest. Not necessarily a
/// probability distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionProfile {
    pub values: Vec<f64>,
}

impl PredictionProfile {
    pub fn new(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| (-1e-9..=1.0 + 1e-9).contains(v)));
        PredictionProfile { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn linf_distance(&self, other: &PredictionProfile) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// An episode: history steps plus metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub env_id: String,
    pub seed: u64,
    pub steps: Vec<Step>,
}

/// Behavioral contract for exact generative prediction: the distribution
/// over the next observation given a history and an action.
pub trait GenerativeOracle: Sync {
    fn n_actions(&self) -> usize;
    fn n_observations(&self) -> usize;

    /// Sparse next-observation distribution; entries with zero probability
    /// may be omitted. Probabilities sum to 1 within 1e-12.
    fn next_obs_dist(&self, h: &History, a: ActionId) -> Result<Vec<(ObsId, f64)>, CoreError>;
}

const DIST_TOL: f64 = 1e-12;

fn check_dist(dist: &[(ObsId, f64)]) -> Result<(), CoreError> {
    let total: f64 = dist.iter().map(|(_, p)| p).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CoreError::Internal(format!(
            "oracle distribution sums to {total}, expected 1"
        )));
    }
    Ok(())
}

/// The probability that test `t` succeeds after history `h`, assuming its
/// actions are taken: chain rule over steps, summing each next-observation
/// distribution over the step's predicate and recursing into every
/// satisfying observation weighted by its conditional probability.
///
/// The empty test returns 1.0 (empty product).
pub fn predict_test(
    oracle: &dyn GenerativeOracle,
    h: &History,
    t: &TestOfInterest,
) -> Result<f64, CoreError> {
    predict_test_from(oracle, h, &t.steps)
}

fn predict_test_from(
    oracle: &dyn GenerativeOracle,
    h: &History,
    steps: &[(ActionId, ObsPredicate)],
) -> Result<f64, CoreError> {
    let Some(((a, pred), rest)) = steps.split_first() else {
        return Ok(1.0);
    };
    if pred.is_empty() {
        return Err(CoreError::Config("empty observation predicate".into()));
    }
    if *a as usize >= oracle.n_actions() {
        return Err(CoreError::Config(format!("action {a} outside oracle alphabet")));
    }
    let dist = oracle.next_obs_dist(h, *a)?;
    check_dist(&dist)?;
    let mut p = 0.0;
    for &(o, po) in &dist {
        if po <= DIST_TOL || !pred.contains(&o) {
            continue;
        }
        if rest.is_empty() {
            p += po;
        } else {
            p += po * predict_test_from(oracle, &h.extended(*a, o), rest)?;
        }
    }
    Ok(p.clamp(0.0, 1.0))
}

/// The prediction profile phi(h): one prediction per test of interest.
pub fn phi(
    oracle: &dyn GenerativeOracle,
    h: &History,
    tests: &[TestOfInterest],
) -> Result<PredictionProfile, CoreError> {
    let values = tests
        .iter()
        .map(|t| predict_test(oracle, h, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PredictionProfile::new(values))
}

/// Empirical outcome of a test evaluated at a trajectory offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestOutcome {
    Success,
    Failure,
    NotApplicable,
}

/// Success iff the actions of `t` were all taken starting at `offset` and
/// every observation satisfied its predicate; failure iff the actions were
/// taken but some predicate was violated; not-applicable iff the action
/// sequence diverges or runs past the episode end.
pub fn test_outcome(traj: &[Step], offset: usize, t: &TestOfInterest) -> TestOutcome {
    if offset + t.steps.len() > traj.len() {
        return TestOutcome::NotApplicable;
    }
    let mut ok = true;
    for (i, (a, pred)) in t.steps.iter().enumerate() {
        let (ta, to) = traj[offset + i];
        if ta != *a {
            return TestOutcome::NotApplicable;
        }
        if !pred.contains(&to) {
            ok = false;
        }
    }
    if ok {
        TestOutcome::Success
    } else {
        TestOutcome::Failure
    }
}

/// Writes trajectories in the shared line-oriented text format:
/// `envId seed a1 o1 a2 o2 ...`, one episode per line.
pub fn write_trajectories(
    out: &mut String,
    trajs: &[Trajectory],
    alphabet: &Alphabet,
) {
    for t in trajs {
        let _ = write!(out, "{} {}", t.env_id, t.seed);
        for &(a, o) in &t.steps {
            let _ = write!(out, " {} {}", alphabet.action_name(a), alphabet.obs_name(o));
        }
        out.push('\n');
    }
}

/// Parses the trajectory text format. `#`-prefixed lines are ignored.
pub fn parse_trajectories(
    text: &str,
    alphabet: &Alphabet,
) -> Result<Vec<Trajectory>, CoreError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let env_id = toks
            .next()
            .ok_or(CoreError::Parse { line: lineno + 1, msg: "missing env id".into() })?
            .to_string();
        let seed: u64 = toks
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or(CoreError::Parse { line: lineno + 1, msg: "missing or bad seed".into() })?;
        let toks: Vec<&str> = toks.collect();
        if toks.len() % 2 != 0 {
            return Err(CoreError::Parse {
                line: lineno + 1,
                msg: "odd number of action/observation tokens".into(),
            });
        }
        let mut steps = Vec::with_capacity(toks.len() / 2);
        for pair in toks.chunks(2) {
            let a = alphabet.action_id(pair[0]).ok_or_else(|| CoreError::Parse {
                line: lineno + 1,
                msg: format!("unknown action symbol {:?}", pair[0]),
            })?;
            let o = alphabet.obs_id(pair[1]).ok_or_else(|| CoreError::Parse {
                line: lineno + 1,
                msg: format!("unknown observation symbol {:?}", pair[1]),
            })?;
            steps.push((a, o));
        }
        out.push(Trajectory { env_id, seed, steps });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A fixed two-state deterministic cycle used as a tiny oracle.
    struct CycleOracle;

    impl GenerativeOracle for CycleOracle {
        fn n_actions(&self) -> usize {
            1
        }
        fn n_observations(&self) -> usize {
            2
        }
        fn next_obs_dist(&self, h: &History, _a: ActionId) -> Result<Vec<(ObsId, f64)>, CoreError> {
            Ok(vec![((h.len() % 2) as ObsId, 1.0)])
        }
    }

    #[test]
    fn empty_test_is_one() {
        let t = TestOfInterest::new(vec![]);
        let p = predict_test(&CycleOracle, &History::null(), &t).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn singleton_one_step_matches_oracle() {
        let t = TestOfInterest::one_step(0, vec![0]);
        assert_eq!(predict_test(&CycleOracle, &History::null(), &t).unwrap(), 1.0);
        let t1 = TestOfInterest::one_step(0, vec![1]);
        assert_eq!(predict_test(&CycleOracle, &History::null(), &t1).unwrap(), 0.0);
    }

    #[test]
    fn empty_profile_for_no_tests() {
        let p = phi(&CycleOracle, &History::null(), &[]).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn test_outcome_cases() {
        let traj = vec![(0u16, 1u32), (1, 2)];
        let succ = TestOfInterest::one_step(0, vec![1]);
        assert_eq!(test_outcome(&traj, 0, &succ), TestOutcome::Success);
        let fail = TestOfInterest::one_step(0, vec![0]);
        assert_eq!(test_outcome(&traj, 0, &fail), TestOutcome::Failure);
        let na = TestOfInterest::one_step(1, vec![1]);
        assert_eq!(test_outcome(&traj, 0, &na), TestOutcome::NotApplicable);
        // Runs past episode end.
        assert_eq!(test_outcome(&traj, 2, &succ), TestOutcome::NotApplicable);
    }

    #[test]
    fn trajectory_roundtrip() {
        let alph = Alphabet::new(vec!["watch", "flip1"], vec!["pos2", "swap12"]).unwrap();
        let trajs = vec![Trajectory {
            env_id: "tcm".into(),
            seed: 7,
            steps: vec![(0, 0), (0, 1), (1, 0)],
        }];
        let mut text = String::from("# comment line\n");
        write_trajectories(&mut text, &trajs, &alph);
        let parsed = parse_trajectories(&text, &alph).unwrap();
        assert_eq!(parsed, trajs);
    }

    #[test]
    fn parse_rejects_unknown_symbol() {
        let alph = Alphabet::new(vec!["watch"], vec!["pos2"]).unwrap();
        let err = parse_trajectories("tcm 1 watch nope\n", &alph).unwrap_err();
        match err {
            CoreError::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn alphabet_rejects_duplicates() {
        assert!(Alphabet::new(vec!["a", "a"], vec!["o"]).is_err());
    }
}
