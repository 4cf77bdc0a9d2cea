//! Tabular POMDPs: exact belief tracking, forward-algorithm likelihood,
//! action-conditioned Baum-Welch training, and the flat-POMDP predictor
//! for tests of interest.
//!
//! The emission model keeps the full conditional form O(o | s, a, s'):
//! the observation may depend on the previous state, the action and the
//! successor state.

use crate::core::{
    ActionId, CoreError, GenerativeOracle, History, ObsId, PredictionProfile, Step,
    TestOfInterest, Trajectory,
};
use crate::parallel;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fmt::Write as _;

const BELIEF_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug)]
pub struct TabularPomdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_obs: usize,
    pub initial: Vec<f64>,
    /// T[s][a] -> distribution over s', flattened as (s * A + a) * S + s'.
    trans: Vec<f64>,
    /// O[s][a][s'] -> distribution over o, flattened on top of `trans`'s
    /// layout with o innermost.
    emit: Vec<f64>,
}

impl TabularPomdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        n_obs: usize,
        initial: Vec<f64>,
        trans: Vec<f64>,
        emit: Vec<f64>,
    ) -> Result<Self, CoreError> {
        let m = TabularPomdp {
            n_states,
            n_actions,
            n_obs,
            initial,
            trans,
            emit,
        };
        m.validate()?;
        Ok(m)
    }

    fn t_base(&self, s: usize, a: usize) -> usize {
        (s * self.n_actions + a) * self.n_states
    }

    fn e_base(&self, s: usize, a: usize, ns: usize) -> usize {
        ((s * self.n_actions + a) * self.n_states + ns) * self.n_obs
    }

    pub fn t(&self, s: usize, a: usize, ns: usize) -> f64 {
        self.trans[self.t_base(s, a) + ns]
    }

    pub fn e(&self, s: usize, a: usize, ns: usize, o: usize) -> f64 {
        self.emit[self.e_base(s, a, ns) + o]
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let (s_len, e_len) = (
            self.n_states * self.n_actions * self.n_states,
            self.n_states * self.n_actions * self.n_states * self.n_obs,
        );
        if self.initial.len() != self.n_states
            || self.trans.len() != s_len
            || self.emit.len() != e_len
        {
            return Err(CoreError::Config("model table shape mismatch".into()));
        }
        let check = |xs: &[f64], what: &str| -> Result<(), CoreError> {
            if xs.iter().any(|&x| x < 0.0) {
                return Err(CoreError::Config(format!("negative entry in {what}")));
            }
            let sum: f64 = xs.iter().sum();
            if (sum - 1.0).abs() > 1e-10 {
                return Err(CoreError::Config(format!(
                    "{what} sums to {sum}, expected 1"
                )));
            }
            Ok(())
        };
        check(&self.initial, "initial distribution")?;
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let tb = self.t_base(s, a);
                check(&self.trans[tb..tb + self.n_states], "transition row")?;
                for ns in 0..self.n_states {
                    let eb = self.e_base(s, a, ns);
                    check(&self.emit[eb..eb + self.n_obs], "emission row")?;
                }
            }
        }
        Ok(())
    }

    /// Joint next-state/observation weight given the current belief:
    /// J[s', o] = sum_s b(s) T(s'|s,a) O(o|s,a,s').
    fn joint(&self, belief: &[f64], a: usize) -> Vec<f64> {
        let mut j = vec![0.0; self.n_states * self.n_obs];
        for s in 0..self.n_states {
            let b = belief[s];
            if b <= 0.0 {
                continue;
            }
            let tb = self.t_base(s, a);
            for ns in 0..self.n_states {
                let t = b * self.trans[tb + ns];
                if t <= 0.0 {
                    continue;
                }
                let eb = self.e_base(s, a, ns);
                let row = &self.emit[eb..eb + self.n_obs];
                let out = &mut j[ns * self.n_obs..(ns + 1) * self.n_obs];
                for (x, &e) in out.iter_mut().zip(row) {
                    *x += t * e;
                }
            }
        }
        j
    }
}

/// One exact Bayes step (Eq. 4 shape): condition the predicted successor
/// distribution on the observation.
pub fn belief_update(
    model: &TabularPomdp,
    belief: &[f64],
    a: ActionId,
    o: ObsId,
) -> Result<Vec<f64>, CoreError> {
    let (a, o) = (a as usize, o as usize);
    if a >= model.n_actions || o >= model.n_obs {
        return Err(CoreError::Config("symbol outside model alphabets".into()));
    }
    let mut num = vec![0.0; model.n_states];
    for s in 0..model.n_states {
        let b = belief[s];
        if b <= 0.0 {
            continue;
        }
        for (ns, x) in num.iter_mut().enumerate() {
            *x += b * model.t(s, a, ns) * model.e(s, a, ns, o);
        }
    }
    let denom: f64 = num.iter().sum();
    if denom <= BELIEF_FLOOR {
        return Err(CoreError::Internal(
            "observation has zero probability under the model".into(),
        ));
    }
    for x in &mut num {
        *x /= denom;
    }
    Ok(num)
}

/// Log-likelihood of an action-observation sequence via the scaled forward
/// algorithm; an impossible sequence returns negative infinity.
pub fn log_likelihood(model: &TabularPomdp, steps: &[Step]) -> f64 {
    let mut alpha = model.initial.clone();
    let mut ll = 0.0;
    for &(a, o) in steps {
        let (a, o) = (a as usize, o as usize);
        let mut next = vec![0.0; model.n_states];
        for s in 0..model.n_states {
            let w = alpha[s];
            if w <= 0.0 {
                continue;
            }
            for (ns, x) in next.iter_mut().enumerate() {
                *x += w * model.t(s, a, ns) * model.e(s, a, ns, o);
            }
        }
        let c: f64 = next.iter().sum();
        if c <= BELIEF_FLOOR {
            return f64::NEG_INFINITY;
        }
        for x in &mut next {
            *x /= c;
        }
        ll += c.ln();
        alpha = next;
    }
    ll
}

/// State posteriors after each step (the scaled forward pass), for
/// cross-checking against iterated belief updates.
pub fn forward_posteriors(
    model: &TabularPomdp,
    steps: &[Step],
) -> Result<Vec<Vec<f64>>, CoreError> {
    let mut out = Vec::with_capacity(steps.len());
    let mut b = model.initial.clone();
    for &(a, o) in steps {
        b = belief_update(model, &b, a, o)?;
        out.push(b.clone());
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EmReport {
    /// Log-likelihood after each iteration of the winning restart.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub restart: usize,
    pub final_ll: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct EmConfig {
    pub n_states: usize,
    pub max_iters: usize,
    pub n_restarts: usize,
    /// Stop when the absolute log-likelihood gain drops below this.
    pub tol: f64,
}

impl EmConfig {
    pub fn new(n_states: usize) -> Self {
        EmConfig {
            n_states,
            max_iters: 50,
            n_restarts: 3,
            tol: 1e-6,
        }
    }
}

/// Per-shard sufficient statistics: initial-state posteriors, transition
/// counts, and emission counts keyed sparsely by (action, observation).
struct EStats {
    ll: f64,
    init: Vec<f64>,
    trans: Vec<f64>,
    emit: HashMap<(usize, usize), Vec<f64>>,
    n_trajs: usize,
}

fn e_step_shard(model: &TabularPomdp, shard: &[Trajectory]) -> EStats {
    let ns = model.n_states;
    let na = model.n_actions;
    let mut stats = EStats {
        ll: 0.0,
        init: vec![0.0; ns],
        trans: vec![0.0; ns * na * ns],
        emit: HashMap::new(),
        n_trajs: shard.len(),
    };
    // Kahan compensation for the shard log-likelihood.
    let mut comp = 0.0;
    for traj in shard {
        let l = traj.steps.len();
        // Scaled forward pass; alphas[0] is the initial belief.
        let mut alphas: Vec<Vec<f64>> = Vec::with_capacity(l + 1);
        let mut scales: Vec<f64> = Vec::with_capacity(l);
        alphas.push(model.initial.clone());
        for &(a, o) in &traj.steps {
            let (a, o) = (a as usize, o as usize);
            let prev = alphas.last().unwrap();
            let mut next = vec![0.0; ns];
            for s in 0..ns {
                let w = prev[s];
                if w <= 0.0 {
                    continue;
                }
                for (nstate, x) in next.iter_mut().enumerate() {
                    *x += w * model.t(s, a, nstate) * model.e(s, a, nstate, o);
                }
            }
            let c: f64 = next.iter().sum();
            let c = c.max(BELIEF_FLOOR);
            for x in &mut next {
                *x /= c;
            }
            let y = c.ln() - comp;
            let t = stats.ll + y;
            comp = (t - stats.ll) - y;
            stats.ll = t;
            scales.push(c);
            alphas.push(next);
        }
        // Scaled backward pass with per-step transition posteriors.
        let mut beta = vec![1.0; ns];
        let mut xis: Vec<(usize, usize, Vec<f64>)> = Vec::with_capacity(l);
        for i in (0..l).rev() {
            let (a, o) = (traj.steps[i].0 as usize, traj.steps[i].1 as usize);
            let mut xi = vec![0.0; ns * ns];
            let mut prev_beta = vec![0.0; ns];
            for s in 0..ns {
                let aw = alphas[i][s];
                let mut acc = 0.0;
                for nstate in 0..ns {
                    let k = model.t(s, a, nstate) * model.e(s, a, nstate, o);
                    acc += k * beta[nstate];
                    xi[s * ns + nstate] = aw * k * beta[nstate] / scales[i];
                }
                prev_beta[s] = acc / scales[i];
            }
            xis.push((a, o, xi));
            beta = prev_beta;
        }
        xis.reverse();
        for (s, x) in stats.init.iter_mut().enumerate() {
            *x += alphas[0][s] * beta[s];
        }
        for (a, o, xi) in xis {
            for s in 0..ns {
                for nstate in 0..ns {
                    stats.trans[(s * na + a) * ns + nstate] += xi[s * ns + nstate];
                }
            }
            let acc = stats
                .emit
                .entry((a, o))
                .or_insert_with(|| vec![0.0; ns * ns]);
            for (x, v) in acc.iter_mut().zip(&xi) {
                *x += v;
            }
        }
    }
    stats
}

fn dirichlet_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
    let sum: f64 = row.iter().sum();
    for x in &mut row {
        *x /= sum;
    }
    row
}

fn random_model(
    rng: &mut ChaCha8Rng,
    n_states: usize,
    n_actions: usize,
    n_obs: usize,
) -> TabularPomdp {
    let initial = dirichlet_row(rng, n_states);
    let mut trans = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        trans.extend(dirichlet_row(rng, n_states));
    }
    let mut emit = Vec::with_capacity(n_states * n_actions * n_states * n_obs);
    for _ in 0..n_states * n_actions * n_states {
        emit.extend(dirichlet_row(rng, n_obs));
    }
    TabularPomdp {
        n_states,
        n_actions,
        n_obs,
        initial,
        trans,
        emit,
    }
}

/// Action-conditioned Baum-Welch with random restarts. The E-step is
/// sharded across trajectories; the per-restart log-likelihood trace is
/// non-decreasing (up to 1e-9 slack, asserted).
pub fn em_train(
    data: &[Trajectory],
    n_actions: usize,
    n_obs: usize,
    cfg: EmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(TabularPomdp, EmReport), CoreError> {
    if cfg.n_states < 1 {
        return Err(CoreError::Config("need at least one hidden state".into()));
    }
    if data.is_empty() {
        return Err(CoreError::Config("empty training data".into()));
    }
    let ns = cfg.n_states;
    let chunk = (data.len() / 64).max(64);
    let mut best: Option<(TabularPomdp, EmReport)> = None;
    for restart in 0..cfg.n_restarts.max(1) {
        let mut model = random_model(rng, ns, n_actions, n_obs);
        let mut trace: Vec<f64> = Vec::new();
        for _ in 0..cfg.max_iters {
            let shards = parallel::map_chunks(data, chunk, |s| e_step_shard(&model, s));
            let mut ll = 0.0;
            let mut init = vec![0.0; ns];
            let mut trans = vec![0.0; ns * n_actions * ns];
            let mut emit: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
            let mut total_trajs = 0usize;
            for s in shards {
                ll += s.ll;
                total_trajs += s.n_trajs;
                for (x, v) in init.iter_mut().zip(&s.init) {
                    *x += v;
                }
                for (x, v) in trans.iter_mut().zip(&s.trans) {
                    *x += v;
                }
                for (k, v) in s.emit {
                    let acc = emit.entry(k).or_insert_with(|| vec![0.0; ns * ns]);
                    for (x, y) in acc.iter_mut().zip(&v) {
                        *x += y;
                    }
                }
            }
            if let Some(&prev) = trace.last() {
                debug_assert!(
                    ll >= prev - 1e-9,
                    "likelihood decreased: {prev} -> {ll}"
                );
            }
            let done = trace
                .last()
                .is_some_and(|&prev| (ll - prev).abs() < cfg.tol);
            trace.push(ll);
            // M-step.
            let mut new_initial = init;
            let ni_sum = total_trajs as f64;
            for x in &mut new_initial {
                *x /= ni_sum;
            }
            let mut new_trans = vec![0.0; ns * n_actions * ns];
            for s in 0..ns {
                for a in 0..n_actions {
                    let base = (s * n_actions + a) * ns;
                    let row = &trans[base..base + ns];
                    let total: f64 = row.iter().sum();
                    for nstate in 0..ns {
                        new_trans[base + nstate] = if total > 0.0 {
                            row[nstate] / total
                        } else {
                            1.0 / ns as f64
                        };
                    }
                }
            }
            let mut new_emit = vec![0.0; ns * n_actions * ns * n_obs];
            // Emission totals per (s, a, s') are the transition counts.
            for ((a, o), xi) in &emit {
                for s in 0..ns {
                    for nstate in 0..ns {
                        let idx = ((s * n_actions + a) * ns + nstate) * n_obs + o;
                        new_emit[idx] = xi[s * ns + nstate];
                    }
                }
            }
            for s in 0..ns {
                for a in 0..n_actions {
                    for nstate in 0..ns {
                        let base = ((s * n_actions + a) * ns + nstate) * n_obs;
                        let row = &mut new_emit[base..base + n_obs];
                        let total: f64 = row.iter().sum();
                        if total > 0.0 {
                            for x in row {
                                *x /= total;
                            }
                        } else {
                            for x in row {
                                *x = 1.0 / n_obs as f64;
                            }
                        }
                    }
                }
            }
            model = TabularPomdp {
                n_states: ns,
                n_actions,
                n_obs,
                initial: new_initial,
                trans: new_trans,
                emit: new_emit,
            };
            if done {
                break;
            }
        }
        let final_ll = trace.last().copied().unwrap_or(f64::NEG_INFINITY);
        let report = EmReport {
            iterations: trace.len(),
            trace,
            restart,
            final_ll,
        };
        if best.as_ref().is_none_or(|(_, r)| final_ll > r.final_ll) {
            best = Some((model, report));
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Incremental flat-POMDP runtime: tracks a belief over the model's hidden
/// states; observations the model finds impossible reset the belief to the
/// prior (counted).
#[derive(Clone, Debug)]
pub struct FlatRuntime<'m> {
    pub model: &'m TabularPomdp,
    pub belief: Vec<f64>,
    pub fallbacks: u64,
}

impl<'m> FlatRuntime<'m> {
    pub fn new(model: &'m TabularPomdp) -> Self {
        FlatRuntime {
            model,
            belief: model.initial.clone(),
            fallbacks: 0,
        }
    }

    pub fn reset(&mut self) {
        self.belief = self.model.initial.clone();
    }

    pub fn observe(&mut self, a: ActionId, o: ObsId) {
        match belief_update(self.model, &self.belief, a, o) {
            Ok(b) => self.belief = b,
            Err(_) => {
                self.belief = self.model.initial.clone();
                self.fallbacks += 1;
            }
        }
    }

    pub fn predict(&self, tests: &[TestOfInterest]) -> PredictionProfile {
        let values = tests
            .iter()
            .map(|t| predict_from_belief(self.model, &self.belief, &t.steps))
            .collect();
        PredictionProfile::new(values)
    }

    /// Like `predict`, but one-step tests use the precomputed mass vectors
    /// from `one_step_masses` (a dot product instead of a full joint).
    pub fn predict_with(
        &self,
        tests: &[TestOfInterest],
        masses: &[Option<Vec<f64>>],
    ) -> PredictionProfile {
        let values = tests
            .iter()
            .zip(masses)
            .map(|(t, m)| match m {
                Some(m) => self
                    .belief
                    .iter()
                    .zip(m)
                    .map(|(b, x)| b * x)
                    .sum::<f64>()
                    .clamp(0.0, 1.0),
                None => predict_from_belief(self.model, &self.belief, &t.steps),
            })
            .collect();
        PredictionProfile::new(values)
    }
}

/// Per-test one-step success mass: m[s] = sum_{s'} T(s'|s,a) sum_{o in pred}
/// O(o|s,a,s'), so the prediction is belief . m. Multi-step tests get None
/// and fall back to the recursive path.
pub fn one_step_masses(model: &TabularPomdp, tests: &[TestOfInterest]) -> Vec<Option<Vec<f64>>> {
    tests
        .iter()
        .map(|t| {
            let [(a, pred)] = t.steps.as_slice() else {
                return None;
            };
            let a = *a as usize;
            if a >= model.n_actions {
                return None;
            }
            let mut m = vec![0.0; model.n_states];
            for (s, out) in m.iter_mut().enumerate() {
                for ns in 0..model.n_states {
                    let t = model.t(s, a, ns);
                    if t <= 0.0 {
                        continue;
                    }
                    let e: f64 = pred
                        .iter()
                        .filter(|&&o| (o as usize) < model.n_obs)
                        .map(|&o| model.e(s, a, ns, o as usize))
                        .sum();
                    *out += t * e;
                }
            }
            Some(m)
        })
        .collect()
}

fn predict_from_belief(
    model: &TabularPomdp,
    belief: &[f64],
    steps: &[(ActionId, Vec<ObsId>)],
) -> f64 {
    let Some(((a, pred), rest)) = steps.split_first() else {
        return 1.0;
    };
    let j = model.joint(belief, *a as usize);
    let mut p = 0.0;
    for &o in pred {
        let o = o as usize;
        if o >= model.n_obs {
            continue;
        }
        let mass: f64 = (0..model.n_states)
            .map(|ns| j[ns * model.n_obs + o])
            .sum();
        if mass <= BELIEF_FLOOR {
            continue;
        }
        if rest.is_empty() {
            p += mass;
        } else {
            let cond: Vec<f64> = (0..model.n_states)
                .map(|ns| j[ns * model.n_obs + o] / mass)
                .collect();
            p += mass * predict_from_belief(model, &cond, rest);
        }
    }
    p.clamp(0.0, 1.0)
}

/// Model-implied profile after a full history, with the count of
/// reset-to-prior fallbacks taken along the way.
pub fn flat_predict(
    model: &TabularPomdp,
    h: &History,
    tests: &[TestOfInterest],
) -> (PredictionProfile, u64) {
    let mut rt = FlatRuntime::new(model);
    for &(a, o) in &h.steps {
        rt.observe(a, o);
    }
    (rt.predict(tests), rt.fallbacks)
}

impl GenerativeOracle for TabularPomdp {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn n_observations(&self) -> usize {
        self.n_obs
    }

    fn next_obs_dist(&self, h: &History, a: ActionId) -> Result<Vec<(ObsId, f64)>, CoreError> {
        let mut b = self.initial.clone();
        for &(pa, po) in &h.steps {
            b = belief_update(self, &b, pa, po)?;
        }
        let j = self.joint(&b, a as usize);
        let mut out = Vec::new();
        for o in 0..self.n_obs {
            let mass: f64 = (0..self.n_states).map(|ns| j[ns * self.n_obs + o]).sum();
            if mass > 0.0 {
                out.push((o as ObsId, mass));
            }
        }
        Ok(out)
    }
}

/// Versioned text serialization; reals carry 17 significant digits so the
/// round trip is bit-faithful.
pub fn write_pomdp(out: &mut String, model: &TabularPomdp) {
    let _ = writeln!(
        out,
        "pomdp 1 {} {} {}",
        model.n_states, model.n_actions, model.n_obs
    );
    let dump = |out: &mut String, xs: &[f64]| {
        for (i, x) in xs.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{x:.17e}");
        }
        out.push('\n');
    };
    dump(out, &model.initial);
    dump(out, &model.trans);
    dump(out, &model.emit);
}

pub fn parse_pomdp(text: &str) -> Result<TabularPomdp, CoreError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let err = |msg: &str| CoreError::Parse {
        line: 0,
        msg: msg.into(),
    };
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| err("missing header"))?
        .split_whitespace()
        .collect();
    if header.len() != 5 || header[0] != "pomdp" || header[1] != "1" {
        return Err(err("bad header"));
    }
    let parse_dim = |s: &str| s.parse::<usize>().map_err(|_| err("bad dimension"));
    let (ns, na, no) = (
        parse_dim(header[2])?,
        parse_dim(header[3])?,
        parse_dim(header[4])?,
    );
    let mut read_row = |expect: usize| -> Result<Vec<f64>, CoreError> {
        let row: Vec<f64> = lines
            .next()
            .ok_or_else(|| err("missing table row"))?
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err("bad real")))
            .collect::<Result<_, _>>()?;
        if row.len() != expect {
            return Err(err("table row length mismatch"));
        }
        Ok(row)
    };
    let initial = read_row(ns)?;
    let trans = read_row(ns * na * ns)?;
    let emit = read_row(ns * na * ns * no)?;
    TabularPomdp::new(ns, na, no, initial, trans, emit)
}
