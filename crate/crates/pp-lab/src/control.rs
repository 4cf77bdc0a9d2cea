//! Policy-gradient control on predictive features: a softmax policy over
//! binary features, the online GPOMDP update with an average-reward
//! baseline, feature constructors, hand-coded expert policies, and the
//! online evaluation loop that scores both reward and prediction error.

use crate::core::{ActionId, CoreError, ObsId, PredictionProfile};
use crate::envs::Environment;
use crate::pomdp::{FlatRuntime, TabularPomdp};
use crate::ppmodel::PpModelRuntime;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub const DEFAULT_ETA: f64 = 0.01;
pub const DEFAULT_BETA: f64 = 0.95;
pub const DEFAULT_KAPPA: f64 = 0.001;
const PROFILE_BINS: usize = 10;

/// Sparse set of active binary feature ids.
pub type FeatureVector = Vec<usize>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    Predictive,
    Som,
}

/// Declares the feature id layout for one environment/model pairing.
#[derive(Clone, Debug)]
pub struct FeatureSpace {
    pub mode: FeatureMode,
    pub n_tests: usize,
    pub n_obs: usize,
    pub n_actions: usize,
}

impl FeatureSpace {
    pub fn size(&self) -> usize {
        match self.mode {
            FeatureMode::Predictive => self.n_tests * PROFILE_BINS + self.n_obs,
            // Second-order Markov: last obs, previous obs, previous action,
            // each one-hot with an extra "absent" slot for obs groups.
            FeatureMode::Som => 2 * (self.n_obs + 1) + self.n_actions,
        }
    }

    /// Active features for the current step. `clamped` counts predictions
    /// outside [0, 1].
    pub fn build(
        &self,
        profile: Option<&PredictionProfile>,
        last_obs: Option<ObsId>,
        prev_obs: Option<ObsId>,
        prev_action: Option<ActionId>,
        clamped: &mut u64,
    ) -> FeatureVector {
        let mut f = Vec::with_capacity(4);
        match self.mode {
            FeatureMode::Predictive => {
                let p = profile.expect("predictive mode needs a profile");
                assert_eq!(p.values.len(), self.n_tests);
                for (t, &v) in p.values.iter().enumerate() {
                    let v = if !(0.0..=1.0).contains(&v) {
                        *clamped += 1;
                        v.clamp(0.0, 1.0)
                    } else {
                        v
                    };
                    let b = ((v * PROFILE_BINS as f64) as usize).min(PROFILE_BINS - 1);
                    f.push(t * PROFILE_BINS + b);
                }
                if let Some(o) = last_obs {
                    f.push(self.n_tests * PROFILE_BINS + o as usize);
                }
            }
            FeatureMode::Som => {
                let group = self.n_obs + 1;
                f.push(last_obs.map_or(self.n_obs, |o| o as usize));
                f.push(group + prev_obs.map_or(self.n_obs, |o| o as usize));
                if let Some(a) = prev_action {
                    f.push(2 * group + a as usize);
                }
            }
        }
        f
    }
}

#[derive(Clone, Debug)]
pub struct PolicyParams {
    pub n_features: usize,
    pub n_actions: usize,
    /// Row-major [feature][action], initialized to zero (uniform policy).
    pub w: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(n_features: usize, n_actions: usize) -> Self {
        PolicyParams {
            n_features,
            n_actions,
            w: vec![0.0; n_features * n_actions],
        }
    }
}

/// Softmax action distribution for the active feature set, guarded by
/// max-subtraction.
pub fn policy_probs(w: &PolicyParams, f: &[usize]) -> Vec<f64> {
    let mut scores = vec![0.0; w.n_actions];
    for &i in f {
        let row = &w.w[i * w.n_actions..(i + 1) * w.n_actions];
        for (s, &x) in scores.iter_mut().zip(row) {
            *s += x;
        }
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in &mut scores {
        *s = (*s - m).exp();
        total += *s;
    }
    for s in &mut scores {
        *s /= total;
    }
    scores
}

pub fn policy_sample(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let mut u: f64 = rng.gen();
    let mut pick = 0;
    for (a, &p) in probs.iter().enumerate() {
        pick = a;
        if u < p {
            break;
        }
        u -= p;
    }
    pick
}

/// d log pi(chosen | f) / d w[i, a] for active i: [a == chosen] - pi(a).
pub fn log_policy_grad(probs: &[f64], f: &[usize], chosen: usize, n_actions: usize) -> Vec<(usize, f64)> {
    let mut g = Vec::with_capacity(f.len() * n_actions);
    for &i in f {
        for (a, &p) in probs.iter().enumerate() {
            let d = if a == chosen { 1.0 - p } else { -p };
            g.push((i * n_actions + a, d));
        }
    }
    g
}

/// Online GPOMDP with an average-reward baseline.
#[derive(Clone, Debug)]
pub struct Olgarb {
    pub z: Vec<f64>,
    /// Indices with non-negligible trace mass; everything else is exactly
    /// zero, so the per-step decay/update only touches this set.
    active: Vec<usize>,
    pub rbar: f64,
    pub steps: u64,
    pub beta: f64,
    pub eta: f64,
    pub kappa: f64,
}

/// Trace entries below this are cleared rather than decayed forever.
const TRACE_FLOOR: f64 = 1e-12;

impl Olgarb {
    pub fn new(n_features: usize, n_actions: usize, eta: f64, beta: f64, kappa: f64) -> Self {
        Olgarb {
            z: vec![0.0; n_features * n_actions],
            active: Vec::new(),
            rbar: 0.0,
            steps: 0,
            beta,
            eta,
            kappa,
        }
    }

    pub fn step(
        &mut self,
        w: &mut PolicyParams,
        f: &[usize],
        probs: &[f64],
        chosen: usize,
        reward: f64,
    ) -> Result<(), CoreError> {
        let beta = self.beta;
        let z = &mut self.z;
        self.active.retain(|&i| {
            z[i] *= beta;
            if z[i].abs() < TRACE_FLOOR {
                z[i] = 0.0;
                false
            } else {
                true
            }
        });
        for (idx, g) in log_policy_grad(probs, f, chosen, w.n_actions) {
            if z[idx] == 0.0 && g != 0.0 {
                self.active.push(idx);
            }
            z[idx] += g;
        }
        let advantage = reward - self.rbar;
        if advantage != 0.0 {
            let scale = self.eta * advantage;
            for &i in &self.active {
                w.w[i] += scale * z[i];
            }
        }
        self.rbar += self.kappa * (reward - self.rbar);
        self.steps += 1;
        if self.steps % 4096 == 0
            && (!self.rbar.is_finite() || w.w.iter().any(|x| !x.is_finite()))
        {
            return Err(CoreError::Internal(format!(
                "non-finite policy state at step {} (rbar {})",
                self.steps, self.rbar
            )));
        }
        Ok(())
    }
}

/// Where the evaluation loop gets its profile (and so its features).
pub enum FeatureSource {
    /// The environment's own exact profile tracker; prediction error is
    /// zero by construction.
    OraclePhi,
    Pp(Box<dyn PpModelRuntime>),
    /// Flat POMDP over (possibly remapped) observation symbols.
    Flat {
        model: Box<TabularPomdp>,
        /// Raw environment observation -> model symbol; unseen symbols
        /// trigger the prior-reset fallback.
        obs_map: HashMap<ObsId, ObsId>,
        tests: Vec<crate::core::TestOfInterest>,
    },
    Som,
}

impl FeatureSource {
    pub fn mode(&self) -> FeatureMode {
        match self {
            FeatureSource::Som => FeatureMode::Som,
            _ => FeatureMode::Predictive,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalRecord {
    pub steps: u64,
    pub avg_reward: f64,
    /// Joint RMSE over all tests; NaN when no prediction was scored.
    pub rmse: f64,
    pub per_test_rmse: Vec<f64>,
    pub fallbacks: u64,
    pub clamped: u64,
    pub rmse_defined: bool,
}

enum SourceState<'a> {
    Oracle,
    Pp(&'a mut dyn PpModelRuntime),
    Flat {
        rt: FlatRuntime<'a>,
        obs_map: &'a HashMap<ObsId, ObsId>,
        tests: &'a [crate::core::TestOfInterest],
        masses: Vec<Option<Vec<f64>>>,
        profile: PredictionProfile,
    },
    Som,
}

/// One online control run: observe, featurize, sample an action from the
/// softmax policy, step the environment, apply the OLGARB update, and
/// accumulate reward plus prediction RMSE against the exact tracker.
pub fn evaluate(
    env: &mut dyn Environment,
    source: &mut FeatureSource,
    steps: u64,
    eta: f64,
    beta: f64,
    kappa: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EvalRecord, CoreError> {
    if steps == 0 {
        return Ok(EvalRecord::default());
    }
    let tests = env.tests();
    let n_tests = tests.len();
    let space = FeatureSpace {
        mode: source.mode(),
        n_tests,
        n_obs: env.alphabet().n_observations(),
        n_actions: env.alphabet().n_actions(),
    };
    let n_actions = env.alphabet().n_actions();
    let mut w = PolicyParams::zeros(space.size(), n_actions);
    let mut learner = Olgarb::new(space.size(), n_actions, eta, beta, kappa);
    let mut tracker = env.make_tracker();
    env.reset(rng);
    tracker.reset();

    let mut state = match source {
        FeatureSource::OraclePhi => SourceState::Oracle,
        FeatureSource::Som => SourceState::Som,
        FeatureSource::Pp(rt) => {
            rt.reset();
            SourceState::Pp(rt.as_mut())
        }
        FeatureSource::Flat {
            model,
            obs_map,
            tests,
        } => SourceState::Flat {
            rt: FlatRuntime::new(model),
            obs_map,
            tests,
            masses: crate::pomdp::one_step_masses(model, tests),
            profile: PredictionProfile::new(vec![0.0; n_tests]),
        },
    };

    let mut total_reward = 0.0;
    let mut sq = vec![0.0; n_tests];
    let mut scored = 0u64;
    let mut clamped = 0u64;
    let mut extra_fallbacks = 0u64;
    let mut last_obs: Option<ObsId> = None;
    let mut prev_obs: Option<ObsId> = None;
    let mut prev_action: Option<ActionId> = None;

    for step in 0..steps {
        let profile: Option<PredictionProfile> = match &mut state {
            SourceState::Oracle => Some(tracker.profile()),
            SourceState::Som => None,
            SourceState::Pp(rt) => Some(rt.current_profile().clone()),
            SourceState::Flat { profile, .. } => Some(profile.clone()),
        };
        // The null history carries no information yet; score predictions
        // only once at least one observation has been seen.
        if step > 0 {
            if let Some(p) = &profile {
                let truth = tracker.profile();
                for ((s, x), y) in sq.iter_mut().zip(&p.values).zip(&truth.values) {
                    *s += (x - y) * (x - y);
                }
                scored += 1;
            }
        }
        let f = space.build(profile.as_ref(), last_obs, prev_obs, prev_action, &mut clamped);
        let probs = policy_probs(&w, &f);
        let a = policy_sample(&probs, rng) as ActionId;
        let (o, r) = env.step(a, rng);
        total_reward += r;
        tracker.observe(a, o)?;
        match &mut state {
            SourceState::Oracle | SourceState::Som => {}
            SourceState::Pp(rt) => rt.observe_step((a, o)),
            SourceState::Flat {
                rt,
                obs_map,
                tests,
                masses,
                profile,
            } => {
                match obs_map.get(&o) {
                    Some(&mo) => rt.observe(a, mo),
                    None => {
                        rt.reset();
                        extra_fallbacks += 1;
                    }
                }
                *profile = rt.predict_with(tests, masses);
            }
        }
        learner.step(&mut w, &f, &probs, a as usize, r)?;
        prev_obs = last_obs;
        last_obs = Some(o);
        prev_action = Some(a);
    }

    let fallbacks = extra_fallbacks
        + match &state {
            SourceState::Pp(rt) => rt.fallback_count(),
            SourceState::Flat { rt, .. } => rt.fallbacks,
            _ => 0,
        };
    let per_test_rmse: Vec<f64> = sq
        .iter()
        .map(|&s| if scored > 0 { (s / scored as f64).sqrt() } else { f64::NAN })
        .collect();
    let joint = if scored > 0 {
        (sq.iter().sum::<f64>() / (scored as f64 * n_tests as f64)).sqrt()
    } else {
        f64::NAN
    };
    Ok(EvalRecord {
        steps,
        avg_reward: total_reward / steps as f64,
        rmse: joint,
        per_test_rmse,
        fallbacks,
        clamped,
        rmse_defined: scored > 0,
    })
}

/// Hand-coded expert policies, driven by the exact profile.
pub fn expert_action(env_id: &str, last_obs: Option<ObsId>, profile: &PredictionProfile) -> ActionId {
    match env_id {
        "tcm" => {
            if last_obs == Some(crate::envs::tcm::O_PROMPT) {
                let best = profile
                    .values
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                crate::envs::tcm::A_FLIP[best]
            } else {
                crate::envs::tcm::A_WATCH
            }
        }
        "gallery" => {
            // Break-even for +10 hit / -5 miss is 1/3.
            if profile.values[0] > 1.0 / 3.0 {
                crate::envs::gallery::A_SHOOT
            } else {
                crate::envs::gallery::A_WATCH
            }
        }
        _ => 0,
    }
}

/// Average reward of the expert policy, as a reference ceiling.
pub fn expert_reward(env: &mut dyn Environment, steps: u64, rng: &mut ChaCha8Rng) -> Result<f64, CoreError> {
    let mut tracker = env.make_tracker();
    env.reset(rng);
    tracker.reset();
    let id = env.id().to_string();
    let mut total = 0.0;
    let mut last_obs = None;
    for _ in 0..steps {
        let p = tracker.profile();
        let a = expert_action(&id, last_obs, &p);
        let (o, r) = env.step(a, rng);
        total += r;
        tracker.observe(a, o)?;
        last_obs = Some(o);
    }
    Ok(total / steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::tcm::TcmEnv;
    use rand::SeedableRng;

    #[test]
    fn zero_weights_give_a_uniform_policy() {
        let w = PolicyParams::zeros(5, 4);
        let p = policy_probs(&w, &[0, 3]);
        for &x in &p {
            assert!((x - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn ln2_weight_gives_two_thirds() {
        let mut w = PolicyParams::zeros(1, 2);
        w.w[0] = 2f64.ln();
        let p = policy_probs(&w, &[0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_normalizes_and_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let mut w = PolicyParams::zeros(6, 3);
            for x in &mut w.w {
                *x = rng.gen_range(-2.0..2.0);
            }
            let f = vec![1, 4];
            let p = policy_probs(&w, &f);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // Add a constant to every action's weight for one feature.
            for a in 0..3 {
                w.w[4 * 3 + a] += 1.7;
            }
            let q = policy_probs(&w, &f);
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (nf, na) = (5, 3);
        let mut w = PolicyParams::zeros(nf, na);
        for x in &mut w.w {
            *x = rng.gen_range(-1.0..1.0);
        }
        let f = vec![0, 2, 4];
        let chosen = 1;
        let probs = policy_probs(&w, &f);
        let grad = log_policy_grad(&probs, &f, chosen, na);
        let dense: HashMap<usize, f64> = grad.into_iter().collect();
        let eps = 1e-6;
        for i in &f {
            for a in 0..na {
                let idx = i * na + a;
                let mut wp = w.clone();
                wp.w[idx] += eps;
                let mut wm = w.clone();
                wm.w[idx] -= eps;
                let fd = (policy_probs(&wp, &f)[chosen].ln()
                    - policy_probs(&wm, &f)[chosen].ln())
                    / (2.0 * eps);
                let g = dense.get(&idx).copied().unwrap_or(0.0);
                let denom = fd.abs().max(1e-3);
                assert!(
                    ((g - fd) / denom).abs() < 1e-6,
                    "grad {g} vs fd {fd} at {idx}"
                );
            }
        }
    }

    #[test]
    fn zero_advantage_leaves_weights_unchanged() {
        let mut w = PolicyParams::zeros(2, 2);
        let mut l = Olgarb::new(2, 2, 0.1, 0.5, 0.0);
        l.rbar = 1.0;
        let f = vec![0];
        let probs = policy_probs(&w, &f);
        l.step(&mut w, &f, &probs, 0, 1.0).unwrap();
        assert!(w.w.iter().all(|&x| x == 0.0));
        assert!(l.z.iter().any(|&z| z != 0.0));
    }

    #[test]
    fn bandit_learns_the_better_arm() {
        // 2-armed bandit, rewards 1 and 0, single constant feature.
        let mut wins = 0;
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut w = PolicyParams::zeros(1, 2);
            let mut l = Olgarb::new(1, 2, DEFAULT_ETA, DEFAULT_BETA, DEFAULT_KAPPA);
            let f = vec![0usize];
            for _ in 0..50_000 {
                let probs = policy_probs(&w, &f);
                let a = policy_sample(&probs, &mut rng);
                let r = if a == 0 { 1.0 } else { 0.0 };
                l.step(&mut w, &f, &probs, a, r).unwrap();
            }
            if policy_probs(&w, &f)[0] > 0.95 {
                wins += 1;
            }
        }
        assert!(wins >= 3, "majority of seeds must prefer the better arm");
    }

    #[test]
    fn bin_rule_boundaries() {
        let space = FeatureSpace {
            mode: FeatureMode::Predictive,
            n_tests: 3,
            n_obs: 9,
            n_actions: 4,
        };
        let mut clamped = 0;
        let p = PredictionProfile::new(vec![1.0, 0.297, 0.0]);
        let f = space.build(Some(&p), Some(6), None, None, &mut clamped);
        assert_eq!(f, vec![9, 12, 20, 36]);
        assert_eq!(clamped, 0);
        // Exactly one bin per test plus the last-observation one-hot.
        assert_eq!(f.len(), 4);
    }

    #[test]
    fn out_of_range_prediction_is_clamped_and_counted() {
        let space = FeatureSpace {
            mode: FeatureMode::Predictive,
            n_tests: 1,
            n_obs: 2,
            n_actions: 2,
        };
        let mut clamped = 0;
        let p = PredictionProfile { values: vec![1.3] };
        let f = space.build(Some(&p), None, None, None, &mut clamped);
        assert_eq!(f, vec![9]);
        assert_eq!(clamped, 1);
    }

    #[test]
    fn som_features_are_three_factored_groups() {
        let space = FeatureSpace {
            mode: FeatureMode::Som,
            n_tests: 3,
            n_obs: 9,
            n_actions: 4,
        };
        let mut clamped = 0;
        let f = space.build(None, Some(2), Some(5), Some(1), &mut clamped);
        assert_eq!(f, vec![2, 10 + 5, 20 + 1]);
        // Start of stream: obs groups fall back to the "absent" slot.
        let f0 = space.build(None, None, None, None, &mut clamped);
        assert_eq!(f0, vec![9, 10 + 9]);
    }

    #[test]
    fn oracle_source_has_zero_rmse() {
        let mut env = TcmEnv::new();
        let mut src = FeatureSource::OraclePhi;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rec = evaluate(
            &mut env,
            &mut src,
            2_000,
            DEFAULT_ETA,
            DEFAULT_BETA,
            DEFAULT_KAPPA,
            &mut rng,
        )
        .unwrap();
        assert!(rec.rmse_defined);
        assert_eq!(rec.rmse, 0.0);
        assert!(rec.avg_reward >= -1.0 && rec.avg_reward <= 1.0);
    }

    #[test]
    fn zero_steps_gives_an_undefined_rmse_record() {
        let mut env = TcmEnv::new();
        let mut src = FeatureSource::Som;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = evaluate(&mut env, &mut src, 0, 0.01, 0.95, 0.001, &mut rng).unwrap();
        assert!(!rec.rmse_defined);
        assert_eq!(rec.steps, 0);
    }

    #[test]
    fn tcm_expert_flips_the_tracked_card() {
        let p = PredictionProfile::new(vec![0.0, 1.0, 0.0]);
        assert_eq!(
            expert_action("tcm", Some(crate::envs::tcm::O_PROMPT), &p),
            crate::envs::tcm::A_FLIP[1]
        );
        assert_eq!(expert_action("tcm", Some(3), &p), crate::envs::tcm::A_WATCH);
    }

    #[test]
    fn gallery_expert_threshold() {
        let shoot = PredictionProfile::new(vec![0.693]);
        let hold = PredictionProfile::new(vec![0.297]);
        assert_eq!(expert_action("gallery", None, &shoot), crate::envs::gallery::A_SHOOT);
        assert_eq!(expert_action("gallery", None, &hold), crate::envs::gallery::A_WATCH);
    }

    #[test]
    fn tcm_expert_earns_positive_reward() {
        let mut env = TcmEnv::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = expert_reward(&mut env, 20_000, &mut rng).unwrap();
        assert!(r > 0.05, "expert avg reward {r}");
    }
}
