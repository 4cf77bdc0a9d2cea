//! Profile-sequence models and their self-fed runtimes.
//!
//! Both model families consume PP-trajectories: streams of (action,
//! observation) pairs ("PP-actions") labeled with profile indices. At run
//! time neither model sees true profiles; each feeds its own committed
//! profile back into its state, so an emitted profile stream is a
//! deterministic function of the model, the PP-action stream and the
//! tie-break RNG seed.
//!
//! Suffix-tree contexts pair each past PP-action with the profile that was
//! committed alongside it. A PP-action alone does not determine the next
//! profile (the same swap observation moves the tracked object differently
//! depending on where it was), but the (PP-action, previous profile) pair
//! often does, which keeps trees shallow.

use crate::core::{CoreError, PredictionProfile, Step};
use crate::pomdp::{belief_update, em_train, EmConfig, EmReport, TabularPomdp};
use crate::profiles::{PpTrajectory, ProfileSet};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fmt::Write as _;

/// PP-action vocabulary observed in training, with dense ids for use as
/// POMDP input symbols.
#[derive(Clone, Debug)]
pub struct PpAlphabet {
    pub pp_actions: Vec<Step>,
    index: HashMap<Step, usize>,
    pub n_profiles: usize,
}

impl PpAlphabet {
    pub fn from_data(data: &[PpTrajectory], n_profiles: usize) -> Self {
        let mut pp_actions: Vec<Step> = data
            .iter()
            .flat_map(|t| t.steps.iter().map(|&(pa, _)| pa))
            .collect();
        pp_actions.sort_unstable();
        pp_actions.dedup();
        let index = pp_actions.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        PpAlphabet {
            pp_actions,
            index,
            n_profiles,
        }
    }

    pub fn id_of(&self, pa: Step) -> Option<usize> {
        self.index.get(&pa).copied()
    }
}

/// Runtime contract shared by the profile models: after `reset` plus a
/// fixed PP-action sequence, `current_profile` depends only on that
/// sequence (and the model's own tie-break seed).
pub trait PpModelRuntime {
    fn reset(&mut self);
    fn observe_step(&mut self, pa: Step);
    fn current_profile(&self) -> &PredictionProfile;
    /// Committed profile index for the current history, if any.
    fn current_index(&self) -> Option<usize>;
    /// Count of fallbacks taken (unseen symbols / impossible updates).
    fn fallback_count(&self) -> u64;
}

// ---------------------------------------------------------------------------
// Looping predictive suffix tree
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
struct LpstNode {
    /// Every profile index observed after the context prefix this node keys.
    labels: Vec<usize>,
    /// Training occurrences per label, parallel to `labels`.
    counts: Vec<u64>,
    children: HashMap<(Step, usize), usize>,
    /// Redirect to a proper ancestor whose remaining-context behavior this
    /// node's (possibly truncated) table matches.
    loop_to: Option<usize>,
    /// Ambiguity left unresolved only because the depth cap was reached.
    truncated: bool,
}

#[derive(Clone, Debug)]
pub struct Lpst {
    pub max_depth: usize,
    pub n_profiles: usize,
    root: HashMap<Step, usize>,
    nodes: Vec<LpstNode>,
    all_labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct LpstQuery {
    pub labels: Vec<usize>,
    /// Training occurrences per label, parallel to `labels`.
    pub counts: Vec<u64>,
    pub depth_used: usize,
    pub unseen_root: bool,
}

impl Lpst {
    pub fn build(data: &[PpTrajectory], max_depth: usize) -> Result<Lpst, CoreError> {
        if data.iter().all(|t| t.steps.is_empty()) {
            return Err(CoreError::Config("empty PP training data".into()));
        }
        let mut n_profiles = 0;
        // One training instance per predicted step: the upcoming PP-action,
        // the (PP-action, profile) pairs before it newest-first, the label.
        let mut by_root: HashMap<Step, Vec<(Vec<(Step, usize)>, usize)>> = HashMap::new();
        for traj in data {
            for (i, &(pa, label)) in traj.steps.iter().enumerate() {
                n_profiles = n_profiles.max(label + 1);
                let ctx: Vec<(Step, usize)> = traj.steps[..i]
                    .iter()
                    .rev()
                    .take(max_depth)
                    .copied()
                    .collect();
                by_root.entry(pa).or_default().push((ctx, label));
            }
        }
        let mut all_labels: Vec<usize> = by_root
            .values()
            .flat_map(|v| v.iter().map(|&(_, l)| l))
            .collect();
        all_labels.sort_unstable();
        all_labels.dedup();
        let mut nodes = Vec::new();
        let mut root = HashMap::new();
        let mut roots: Vec<Step> = by_root.keys().copied().collect();
        roots.sort_unstable();
        for pa in roots {
            let insts = by_root.remove(&pa).unwrap();
            let idx = grow(&mut nodes, insts, 0, max_depth);
            root.insert(pa, idx);
        }
        let mut lpst = Lpst {
            max_depth,
            n_profiles,
            root,
            nodes,
            all_labels,
        };
        lpst.add_loops();
        Ok(lpst)
    }

    /// Resolve a context: the upcoming PP-action plus the committed
    /// (PP-action, profile) history newest-first.
    pub fn lookup<'h, I>(&self, pa: Step, history: I) -> LpstQuery
    where
        I: IntoIterator<Item = &'h (Step, usize)>,
    {
        let Some(&start) = self.root.get(&pa) else {
            let labels = if self.all_labels.is_empty() {
                (0..self.n_profiles).collect()
            } else {
                self.all_labels.clone()
            };
            let counts = vec![1; labels.len()];
            return LpstQuery {
                labels,
                counts,
                depth_used: 0,
                unseen_root: true,
            };
        };
        let mut node = start;
        let mut depth = 0;
        for sym in history {
            let n = self.resolve_loop(node);
            match self.nodes[n].children.get(sym) {
                Some(&c) => {
                    node = c;
                    depth += 1;
                }
                None => break,
            }
        }
        let n = self.resolve_loop(node);
        LpstQuery {
            labels: self.nodes[n].labels.clone(),
            counts: self.nodes[n].counts.clone(),
            depth_used: depth,
            unseen_root: false,
        }
    }

    fn resolve_loop(&self, mut node: usize) -> usize {
        while let Some(t) = self.nodes[node].loop_to {
            node = t;
        }
        node
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Collapse nodes whose remaining-context behavior matches a proper
    /// ancestor into loop edges. A deeper node matches an ancestor when its
    /// table is a (possibly cap-truncated, possibly data-sparse) copy of
    /// the ancestor's, so looping through the ancestor lets resolution scan
    /// arbitrarily far beyond the depth cap.
    fn add_loops(&mut self) {
        let roots: Vec<usize> = self.root.values().copied().collect();
        for start in roots {
            let mut stack = vec![(start, vec![start])];
            while let Some((n, ancestry)) = stack.pop() {
                let mut kids: Vec<usize> = self.nodes[n].children.values().copied().collect();
                kids.sort_unstable();
                for c in kids {
                    if let Some(&anc) = ancestry.iter().find(|&&a| self.simulates(c, a)) {
                        self.nodes[c].loop_to = Some(anc);
                        self.nodes[c].children.clear();
                    } else {
                        let mut next = ancestry.clone();
                        next.push(c);
                        stack.push((c, next));
                    }
                }
            }
        }
    }

    /// True when node u's subtree behaves like a truncated copy of v's:
    /// equal label sets, u's edges a subset of v's, recursively — with a
    /// cap-truncated u leaf matching any equal-labeled v.
    fn simulates(&self, u: usize, v: usize) -> bool {
        if u == v {
            return true;
        }
        let (nu, nv) = (&self.nodes[u], &self.nodes[v]);
        if nu.labels != nv.labels {
            return false;
        }
        if nu.truncated {
            return true;
        }
        nu.children.iter().all(|(k, &cu)| {
            nv.children
                .get(k)
                .is_some_and(|&cv| self.simulates(cu, cv))
        })
    }
}

fn grow(
    nodes: &mut Vec<LpstNode>,
    insts: Vec<(Vec<(Step, usize)>, usize)>,
    depth: usize,
    max_depth: usize,
) -> usize {
    let mut sorted: Vec<usize> = insts.iter().map(|&(_, l)| l).collect();
    sorted.sort_unstable();
    let total = sorted.len();
    let mut labels: Vec<usize> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    for &l in &sorted {
        if labels.last() == Some(&l) {
            *counts.last_mut().unwrap() += 1;
        } else {
            labels.push(l);
            counts.push(1);
        }
    }
    let mut best = 0;
    for i in 1..counts.len() {
        if counts[i] > counts[best] {
            best = i;
        }
    }
    // Once no further context can separate instances (depth cap reached or
    // every context exhausted), residual disagreement in a well-populated
    // node is translation label noise: keep the dominant label rather than
    // leaving the node ambiguous. Small nodes stay strict.
    let can_split =
        depth < max_depth && insts.iter().any(|(ctx, _)| ctx.get(depth).is_some());
    if labels.len() > 1 && !can_split && (total as u64 - counts[best]) <= (total / 32) as u64 {
        labels = vec![labels[best]];
        counts = vec![counts[best]];
    }
    let idx = nodes.len();
    nodes.push(LpstNode {
        labels: labels.clone(),
        counts,
        children: HashMap::new(),
        loop_to: None,
        truncated: labels.len() > 1 && depth >= max_depth,
    });
    if labels.len() <= 1 || depth >= max_depth {
        return idx;
    }
    let mut groups: HashMap<(Step, usize), Vec<(Vec<(Step, usize)>, usize)>> = HashMap::new();
    for (ctx, label) in insts {
        if let Some(&sym) = ctx.get(depth) {
            groups.entry(sym).or_default().push((ctx, label));
        }
        // Instances whose history is exhausted contribute only to this
        // node's label set.
    }
    let mut keys: Vec<(Step, usize)> = groups.keys().copied().collect();
    keys.sort_unstable();
    for k in keys {
        let sub = groups.remove(&k).unwrap();
        let child = grow(nodes, sub, depth + 1, max_depth);
        nodes[idx].children.insert(k, child);
    }
    idx
}

/// Self-fed LPST runtime.
pub struct LpstRuntime {
    lpst: Lpst,
    profiles: ProfileSet,
    /// Committed (PP-action, profile) pairs, newest first, capped at depth.
    history: Vec<(Step, usize)>,
    current: PredictionProfile,
    current_idx: Option<usize>,
    rng: ChaCha8Rng,
    ambiguous: u64,
    unseen: u64,
}

impl LpstRuntime {
    pub fn new(lpst: Lpst, profiles: ProfileSet, rng: ChaCha8Rng) -> Self {
        let current = profiles.mean_profile();
        LpstRuntime {
            lpst,
            profiles,
            history: Vec::new(),
            current,
            current_idx: None,
            rng,
            ambiguous: 0,
            unseen: 0,
        }
    }

    pub fn ambiguity_count(&self) -> u64 {
        self.ambiguous
    }

    /// Occurrence-weighted mean over an ambiguity set.
    fn mean_of(&self, labels: &[usize], counts: &[u64]) -> PredictionProfile {
        let m = self.profiles.profiles[0].values.len();
        let total: u64 = counts.iter().sum();
        let mut acc = vec![0.0; m];
        for (&l, &c) in labels.iter().zip(counts) {
            let w = c as f64 / total as f64;
            for (x, v) in acc.iter_mut().zip(&self.profiles.profiles[l].values) {
                *x += w * v;
            }
        }
        PredictionProfile::new(acc)
    }
}

impl PpModelRuntime for LpstRuntime {
    fn reset(&mut self) {
        self.history.clear();
        self.current = self.profiles.mean_profile();
        self.current_idx = None;
    }

    fn observe_step(&mut self, pa: Step) {
        let q = self.lpst.lookup(pa, self.history.iter());
        if q.unseen_root {
            self.unseen += 1;
        }
        let idx = if q.labels.len() == 1 {
            self.current = PredictionProfile::new(self.profiles.profiles[q.labels[0]].values.clone());
            q.labels[0]
        } else {
            self.ambiguous += 1;
            self.current = self.mean_of(&q.labels, &q.counts);
            // Commit to the label the data favors; exact ties are drawn
            // uniformly.
            let maxc = q.counts.iter().copied().max().unwrap_or(0);
            let tied: Vec<usize> = (0..q.labels.len())
                .filter(|&i| q.counts[i] == maxc)
                .collect();
            q.labels[tied[self.rng.gen_range(0..tied.len())]]
        };
        self.current_idx = Some(idx);
        self.history.insert(0, (pa, idx));
        self.history.truncate(self.lpst.max_depth);
    }

    fn current_profile(&self) -> &PredictionProfile {
        &self.current
    }

    fn current_index(&self) -> Option<usize> {
        self.current_idx
    }

    fn fallback_count(&self) -> u64 {
        self.unseen
    }
}

// ---------------------------------------------------------------------------
// PP-POMDP
// ---------------------------------------------------------------------------

/// A POMDP over PP symbols: inputs are dense PP-action ids, outputs are
/// profile indices.
#[derive(Clone, Debug)]
pub struct PpPomdp {
    pub model: TabularPomdp,
    pub alphabet: PpAlphabet,
}

pub fn train_pp_pomdp(
    data: &[PpTrajectory],
    profiles: &ProfileSet,
    n_states: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<(PpPomdp, EmReport), CoreError> {
    let alphabet = PpAlphabet::from_data(data, profiles.profiles.len());
    if alphabet.pp_actions.is_empty() {
        return Err(CoreError::Config("empty PP training data".into()));
    }
    let trajs: Vec<crate::core::Trajectory> = data
        .iter()
        .filter(|t| !t.steps.is_empty())
        .map(|t| crate::core::Trajectory {
            env_id: "pp".into(),
            seed: 0,
            steps: t
                .steps
                .iter()
                .map(|&(pa, rho)| (alphabet.id_of(pa).unwrap() as u16, rho as u32))
                .collect(),
        })
        .collect();
    let n_states = n_states.unwrap_or(2 * profiles.profiles.len());
    let cfg = EmConfig::new(n_states);
    let (model, report) = em_train(
        &trajs,
        alphabet.pp_actions.len(),
        alphabet.n_profiles,
        cfg,
        rng,
    )?;
    Ok((PpPomdp { model, alphabet }, report))
}

/// Self-fed PP-POMDP runtime: predicts with the most likely next profile
/// and conditions the belief on that same profile.
pub struct PpPomdpRuntime {
    pp: PpPomdp,
    profiles: ProfileSet,
    belief: Vec<f64>,
    current: PredictionProfile,
    current_idx: Option<usize>,
    fallbacks: u64,
}

impl PpPomdpRuntime {
    pub fn new(pp: PpPomdp, profiles: ProfileSet) -> Self {
        let belief = pp.model.initial.clone();
        let current = profiles.mean_profile();
        PpPomdpRuntime {
            pp,
            profiles,
            belief,
            current,
            current_idx: None,
            fallbacks: 0,
        }
    }

    /// Most likely next profile given the belief and PP-action; ties break
    /// to the lowest index.
    fn argmax_profile(&self, a: usize) -> usize {
        let m = &self.pp.model;
        let mut best = (0usize, f64::NEG_INFINITY);
        for rho in 0..m.n_obs {
            let mut p = 0.0;
            for s in 0..m.n_states {
                let b = self.belief[s];
                if b <= 0.0 {
                    continue;
                }
                for ns in 0..m.n_states {
                    p += b * m.t(s, a, ns) * m.e(s, a, ns, rho);
                }
            }
            if p > best.1 {
                best = (rho, p);
            }
        }
        best.0
    }
}

impl PpModelRuntime for PpPomdpRuntime {
    fn reset(&mut self) {
        self.belief = self.pp.model.initial.clone();
        self.current = self.profiles.mean_profile();
        self.current_idx = None;
    }

    fn observe_step(&mut self, pa: Step) {
        let Some(a) = self.pp.alphabet.id_of(pa) else {
            self.belief = self.pp.model.initial.clone();
            self.current = self.profiles.mean_profile();
            self.current_idx = None;
            self.fallbacks += 1;
            return;
        };
        let rho = self.argmax_profile(a);
        self.current = PredictionProfile::new(self.profiles.profiles[rho].values.clone());
        self.current_idx = Some(rho);
        match belief_update(&self.pp.model, &self.belief, a as u16, rho as u32) {
            Ok(b) => self.belief = b,
            Err(_) => {
                self.belief = self.pp.model.initial.clone();
                self.fallbacks += 1;
            }
        }
    }

    fn current_profile(&self) -> &PredictionProfile {
        &self.current
    }

    fn current_index(&self) -> Option<usize> {
        self.current_idx
    }

    fn fallback_count(&self) -> u64 {
        self.fallbacks
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

pub fn write_pp_pomdp(out: &mut String, pp: &PpPomdp) {
    let _ = writeln!(
        out,
        "ppwrap 1 {} {}",
        pp.alphabet.pp_actions.len(),
        pp.alphabet.n_profiles
    );
    for &(a, o) in &pp.alphabet.pp_actions {
        let _ = writeln!(out, "pa {a} {o}");
    }
    crate::pomdp::write_pomdp(out, &pp.model);
}

pub fn parse_pp_pomdp(text: &str) -> Result<PpPomdp, CoreError> {
    let err = |msg: &str| CoreError::Parse {
        line: 0,
        msg: msg.into(),
    };
    let mut lines = text.lines();
    let h: Vec<&str> = lines
        .next()
        .ok_or_else(|| err("empty input"))?
        .split_whitespace()
        .collect();
    if h.len() != 4 || h[0] != "ppwrap" || h[1] != "1" {
        return Err(err("bad header"));
    }
    let n_pa: usize = h[2].parse().map_err(|_| err("bad pp-action count"))?;
    let n_profiles: usize = h[3].parse().map_err(|_| err("bad profile count"))?;
    let mut pp_actions = Vec::with_capacity(n_pa);
    for _ in 0..n_pa {
        let toks: Vec<&str> = lines
            .next()
            .ok_or_else(|| err("missing pp-action line"))?
            .split_whitespace()
            .collect();
        if toks.len() != 3 || toks[0] != "pa" {
            return Err(err("bad pp-action line"));
        }
        let a: u16 = toks[1].parse().map_err(|_| err("bad action"))?;
        let o: u32 = toks[2].parse().map_err(|_| err("bad obs"))?;
        pp_actions.push((a, o));
    }
    let rest: String = lines.collect::<Vec<&str>>().join("\n");
    let model = crate::pomdp::parse_pomdp(&rest)?;
    if model.n_actions != n_pa || model.n_obs != n_profiles {
        return Err(err("model dimensions disagree with the PP alphabet"));
    }
    let index = pp_actions.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    Ok(PpPomdp {
        model,
        alphabet: PpAlphabet {
            pp_actions,
            index,
            n_profiles,
        },
    })
}

pub fn write_lpst(out: &mut String, lpst: &Lpst) {
    let _ = writeln!(
        out,
        "lpst 1 {} {} {}",
        lpst.max_depth,
        lpst.n_profiles,
        lpst.nodes.len()
    );
    let mut roots: Vec<(&Step, &usize)> = lpst.root.iter().collect();
    roots.sort();
    for (&(a, o), &n) in roots {
        let _ = writeln!(out, "root {a} {o} {n}");
    }
    for (i, node) in lpst.nodes.iter().enumerate() {
        let labels: Vec<String> = node
            .labels
            .iter()
            .zip(&node.counts)
            .map(|(l, c)| format!("{l}:{c}"))
            .collect();
        let _ = write!(out, "node {i} [{}]", labels.join(","));
        if node.truncated {
            let _ = write!(out, " capped");
        }
        if let Some(t) = node.loop_to {
            let _ = write!(out, " loop {t}");
        }
        out.push('\n');
        let mut kids: Vec<(&(Step, usize), &usize)> = node.children.iter().collect();
        kids.sort();
        for (&((a, o), rho), &c) in kids {
            let _ = writeln!(out, "  edge {a} {o} {rho} {c}");
        }
    }
}

pub fn parse_lpst(text: &str) -> Result<Lpst, CoreError> {
    let err = |line: usize, msg: &str| CoreError::Parse {
        line,
        msg: msg.into(),
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(0, "empty input"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 5 || h[0] != "lpst" || h[1] != "1" {
        return Err(err(1, "bad header"));
    }
    let max_depth: usize = h[2].parse().map_err(|_| err(1, "bad depth"))?;
    let n_profiles: usize = h[3].parse().map_err(|_| err(1, "bad profile count"))?;
    let n_nodes: usize = h[4].parse().map_err(|_| err(1, "bad node count"))?;
    let mut root = HashMap::new();
    let mut nodes = vec![
        LpstNode {
            labels: Vec::new(),
            counts: Vec::new(),
            children: HashMap::new(),
            loop_to: None,
            truncated: false,
        };
        n_nodes
    ];
    let mut current: Option<usize> = None;
    for (ln, raw) in lines {
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.first() {
            Some(&"root") if toks.len() == 4 => {
                let a: u16 = toks[1].parse().map_err(|_| err(ln + 1, "bad action"))?;
                let o: u32 = toks[2].parse().map_err(|_| err(ln + 1, "bad obs"))?;
                let n: usize = toks[3].parse().map_err(|_| err(ln + 1, "bad node"))?;
                root.insert((a, o), n);
            }
            Some(&"node") if toks.len() >= 3 => {
                let i: usize = toks[1].parse().map_err(|_| err(ln + 1, "bad node id"))?;
                if i >= n_nodes {
                    return Err(err(ln + 1, "node id out of range"));
                }
                let body = toks[2]
                    .strip_prefix('[')
                    .and_then(|s| s.strip_suffix(']'))
                    .ok_or_else(|| err(ln + 1, "bad label list"))?;
                if !body.is_empty() {
                    for item in body.split(',') {
                        let (l, c) = item
                            .split_once(':')
                            .ok_or_else(|| err(ln + 1, "bad label entry"))?;
                        nodes[i]
                            .labels
                            .push(l.parse().map_err(|_| err(ln + 1, "bad label"))?);
                        nodes[i]
                            .counts
                            .push(c.parse().map_err(|_| err(ln + 1, "bad count"))?);
                    }
                }
                let mut rest = &toks[3..];
                if rest.first() == Some(&"capped") {
                    nodes[i].truncated = true;
                    rest = &rest[1..];
                }
                match rest {
                    [] => {}
                    ["loop", t] => {
                        nodes[i].loop_to =
                            Some(t.parse().map_err(|_| err(ln + 1, "bad loop target"))?);
                    }
                    _ => return Err(err(ln + 1, "bad node suffix")),
                }
                current = Some(i);
            }
            Some(&"edge") if toks.len() == 5 => {
                let n = current.ok_or_else(|| err(ln + 1, "edge before node"))?;
                let a: u16 = toks[1].parse().map_err(|_| err(ln + 1, "bad action"))?;
                let o: u32 = toks[2].parse().map_err(|_| err(ln + 1, "bad obs"))?;
                let rho: usize = toks[3].parse().map_err(|_| err(ln + 1, "bad profile"))?;
                let c: usize = toks[4].parse().map_err(|_| err(ln + 1, "bad child"))?;
                nodes[n].children.insert(((a, o), rho), c);
            }
            None => {}
            _ => return Err(err(ln + 1, "unrecognized line")),
        }
    }
    let mut all_labels: Vec<usize> = nodes.iter().flat_map(|n| n.labels.iter().copied()).collect();
    all_labels.sort_unstable();
    all_labels.dedup();
    Ok(Lpst {
        max_depth,
        n_profiles,
        root,
        nodes,
        all_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{tcm, Environment};
    use crate::profiles::EstimatedProfile;
    use rand::SeedableRng;

    fn one_hot_set() -> ProfileSet {
        let profiles = (0..3)
            .map(|i| {
                let mut v = vec![0.0; 3];
                v[i] = 1.0;
                EstimatedProfile {
                    values: v,
                    counts: Vec::new(),
                    exemplar: crate::core::History::null(),
                }
            })
            .map(|e| e)
            .collect();
        ProfileSet {
            profiles,
            alpha: 1e-5,
            min_trials: 10,
        }
    }

    /// Generate labeled PP data straight from the environment tracker.
    fn tcm_pp_data(episodes: usize, len: usize, seed: u64) -> Vec<PpTrajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut env = tcm::TcmEnv::new();
        let mut out = Vec::new();
        for _ in 0..episodes {
            env.reset(&mut rng);
            let mut tracker = env.make_tracker();
            let mut steps = Vec::new();
            for _ in 0..len {
                let a = rng.gen_range(0..4) as u16;
                let (o, _) = env.step(a, &mut rng);
                tracker.observe(a, o).unwrap();
                let p = tracker.profile();
                let idx = p.values.iter().position(|&v| v == 1.0).unwrap();
                steps.push(((a, o), idx));
            }
            out.push(PpTrajectory {
                steps,
                truncated: None,
            });
        }
        out
    }

    #[test]
    fn single_instance_builds_a_unique_root_entry() {
        let data = vec![PpTrajectory {
            steps: vec![((0, 1), 2)],
            truncated: None,
        }];
        let lpst = Lpst::build(&data, 4).unwrap();
        let q = lpst.lookup((0, 1), []);
        assert_eq!(q.labels, vec![2]);
        assert!(!q.unseen_root);
    }

    #[test]
    fn empty_data_is_rejected() {
        assert!(Lpst::build(&[], 4).is_err());
        let (_e, data) = ((), vec![PpTrajectory { steps: vec![], truncated: None }]);
        assert!(Lpst::build(&data, 4).is_err());
    }

    #[test]
    fn ambiguity_resolves_to_mean_and_member_draw() {
        // Same context, two different next profiles.
        let data = vec![
            PpTrajectory {
                steps: vec![((0, 0), 0)],
                truncated: None,
            },
            PpTrajectory {
                steps: vec![((0, 0), 1)],
                truncated: None,
            },
        ];
        let lpst = Lpst::build(&data, 4).unwrap();
        let mut rt = LpstRuntime::new(lpst, one_hot_set(), ChaCha8Rng::seed_from_u64(0));
        rt.observe_step((0, 0));
        let p = rt.current_profile();
        assert!((p.values[0] - 0.5).abs() < 1e-12 && (p.values[1] - 0.5).abs() < 1e-12);
        assert!(matches!(rt.current_index(), Some(0 | 1)));
        assert_eq!(rt.ambiguity_count(), 1);
    }

    #[test]
    fn unseen_root_symbol_falls_back_flagged() {
        let data = vec![PpTrajectory {
            steps: vec![((0, 0), 1)],
            truncated: None,
        }];
        let lpst = Lpst::build(&data, 4).unwrap();
        let q = lpst.lookup((3, 9), []);
        assert!(q.unseen_root);
        assert_eq!(q.labels, vec![1]);
    }

    #[test]
    fn tcm_contexts_resolve_at_depth_one() {
        // With (PP-action, profile) pair contexts, one level pins the next
        // Three Card Monte profile: the pair carries the tracked position.
        let data = tcm_pp_data(400, 10, 7);
        let lpst = Lpst::build(&data, 4).unwrap();
        for traj in &data {
            for (i, &(pa, label)) in traj.steps.iter().enumerate() {
                let ctx: Vec<(Step, usize)> =
                    traj.steps[..i].iter().rev().copied().collect();
                let q = lpst.lookup(pa, ctx.iter());
                assert!(
                    q.labels.contains(&label),
                    "pa {pa:?} label {label} got {:?} i {i} ctx {:?}",
                    q.labels,
                    ctx.first()
                );
                if i >= 1 {
                    assert_eq!(q.labels.len(), 1, "context {pa:?}/{:?}", ctx.first());
                }
            }
        }
    }

    #[test]
    fn lpst_runtime_tracks_the_tcm_oracle() {
        let data = tcm_pp_data(3000, 10, 11);
        let lpst = Lpst::build(&data, 4).unwrap();
        let mut rt = LpstRuntime::new(lpst, one_hot_set(), ChaCha8Rng::seed_from_u64(1));
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut env = tcm::TcmEnv::new();
        let mut se = 0.0;
        let mut n = 0usize;
        for _ in 0..50 {
            env.reset(&mut rng);
            rt.reset();
            let mut tracker = env.make_tracker();
            for _ in 0..10 {
                let a = rng.gen_range(0..4) as u16;
                let (o, _) = env.step(a, &mut rng);
                tracker.observe(a, o).unwrap();
                rt.observe_step((a, o));
                for (x, y) in tracker
                    .profile()
                    .values
                    .iter()
                    .zip(&rt.current_profile().values)
                {
                    se += (x - y) * (x - y);
                    n += 1;
                }
            }
        }
        let rmse = (se / n as f64).sqrt();
        assert!(rmse < 0.02, "lpst rmse {rmse}");
    }

    #[test]
    fn training_set_consistency_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Random PP streams over a tiny alphabet.
        let data: Vec<PpTrajectory> = (0..50)
            .map(|_| PpTrajectory {
                steps: (0..8)
                    .map(|_| {
                        (
                            (rng.gen_range(0..2) as u16, rng.gen_range(0..2) as u32),
                            rng.gen_range(0..3),
                        )
                    })
                    .collect(),
                truncated: None,
            })
            .collect();
        let lpst = Lpst::build(&data, 3).unwrap();
        for traj in &data {
            for (i, &(pa, label)) in traj.steps.iter().enumerate() {
                let ctx: Vec<(Step, usize)> = traj.steps[..i].iter().rev().copied().collect();
                let q = lpst.lookup(pa, ctx.iter());
                assert!(q.labels.contains(&label));
            }
        }
    }

    #[test]
    fn loop_edges_let_resolution_scan_past_the_depth_cap() {
        // The label after the query symbol is set by a marker pair an
        // arbitrary number of filler pairs back.
        let query: Step = (0, 0);
        let filler = ((1u16, 0u32), 2usize);
        let marker = |b: usize| ((1u16, 1u32), b);
        let mut data = Vec::new();
        for b in 0..2usize {
            for j in 0..=10usize {
                let mut steps = vec![marker(b)];
                steps.extend(std::iter::repeat_n(filler, j));
                steps.push((query, b));
                data.push(PpTrajectory {
                    steps,
                    truncated: None,
                });
            }
        }
        let lpst = Lpst::build(&data, 4).unwrap();
        let mut looped = 0;
        for (i, n) in lpst.nodes.iter().enumerate() {
            if let Some(t) = n.loop_to {
                assert!(t < i, "loop target must be an ancestor (smaller index)");
                assert!(n.children.is_empty());
                looped += 1;
            }
        }
        assert!(looped > 0, "self-similar filler chain should loop");
        // A marker 10 pairs back — far beyond the cap of 4 — still resolves.
        let mut ctx = vec![filler; 10];
        ctx.push(marker(1));
        let q = lpst.lookup(query, ctx.iter());
        assert_eq!(q.labels, vec![1]);
        // Training-set consistency survives looping.
        for traj in &data {
            for (i, &(pa, label)) in traj.steps.iter().enumerate() {
                let ctx: Vec<(Step, usize)> = traj.steps[..i].iter().rev().copied().collect();
                assert!(lpst.lookup(pa, ctx.iter()).labels.contains(&label));
            }
        }
    }

    #[test]
    fn lpst_serialization_roundtrip() {
        let data = tcm_pp_data(100, 8, 5);
        let lpst = Lpst::build(&data, 4).unwrap();
        let mut text = String::new();
        write_lpst(&mut text, &lpst);
        let back = parse_lpst(&text).unwrap();
        assert_eq!(back.max_depth, lpst.max_depth);
        assert_eq!(back.root, lpst.root);
        assert_eq!(back.nodes.len(), lpst.nodes.len());
        for (a, b) in lpst.nodes.iter().zip(&back.nodes) {
            assert_eq!(a, b);
        }
    }

    /// Hand-built PP-POMDP that exactly encodes the Three Card Monte
    /// profile machine. States are (tracked position, prompted?): the same
    /// flip PP-action keeps the position mid-mixing but re-deals after a
    /// prompt, so the phase bit is part of the state. Emissions are the
    /// post-step position, which is exactly the profile index.
    fn exact_tcm_pp_pomdp() -> PpPomdp {
        // Enumerate the full PP-action vocabulary.
        let mut pas: Vec<Step> = Vec::new();
        for a in 0..4u16 {
            for o in 0..9u32 {
                pas.push((a, o));
            }
        }
        let data = vec![PpTrajectory {
            steps: pas.iter().map(|&pa| (pa, 0)).collect(),
            truncated: None,
        }];
        let alphabet = PpAlphabet::from_data(&data, 3);
        let ns = 6;
        let na = alphabet.pp_actions.len();
        let no = 3;
        // (position, prompted) -> (position', prompted') for a PP-action.
        let next = |pos: usize, prompted: bool, (a, o): Step| -> (usize, bool) {
            if prompted {
                // Any resolution re-deals to the middle and resumes mixing.
                return (tcm::DEAL_POS, false);
            }
            match o {
                o if (3..6).contains(&o) => {
                    let (i, j) = tcm::PAIRS[(o - 3) as usize];
                    let p = if pos == i {
                        j
                    } else if pos == j {
                        i
                    } else {
                        pos
                    };
                    (p, false)
                }
                o if o < 3 => (o as usize, false),
                6 => (pos, true),
                // Mid-mixing peek: an ace sighting pins the flipped card.
                7 => ((a as usize).saturating_sub(1), false),
                _ => (pos, false),
            }
        };
        let mut trans = vec![0.0; ns * na * ns];
        let mut emit = vec![0.0; ns * na * ns * no];
        for pos in 0..3 {
            for ph in 0..2 {
                let s = pos + 3 * ph;
                for (ai, &pa) in alphabet.pp_actions.iter().enumerate() {
                    let (np, nph) = next(pos, ph == 1, pa);
                    let t = np + 3 * usize::from(nph);
                    trans[(s * na + ai) * ns + t] = 1.0;
                    for nstate in 0..ns {
                        emit[((s * na + ai) * ns + nstate) * no + nstate % 3] = 1.0;
                    }
                }
            }
        }
        let mut initial = vec![0.0; ns];
        initial[tcm::DEAL_POS] = 1.0;
        let model = TabularPomdp::new(ns, na, no, initial, trans, emit).unwrap();
        PpPomdp { model, alphabet }
    }

    #[test]
    fn exact_pp_pomdp_reproduces_the_tcm_oracle() {
        let pp = exact_tcm_pp_pomdp();
        let mut rt = PpPomdpRuntime::new(pp, one_hot_set());
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut env = tcm::TcmEnv::new();
        for _ in 0..100 {
            env.reset(&mut rng);
            rt.reset();
            let mut tracker = env.make_tracker();
            for _ in 0..10 {
                let a = rng.gen_range(0..4) as u16;
                let (o, _) = env.step(a, &mut rng);
                tracker.observe(a, o).unwrap();
                rt.observe_step((a, o));
                assert!(tracker.profile().linf_distance(rt.current_profile()) < 1e-12);
            }
        }
        assert_eq!(rt.fallback_count(), 0);
    }

    #[test]
    fn argmax_ties_break_to_the_lowest_index() {
        // One state, one PP-action, two equally likely profiles.
        let model = TabularPomdp::new(
            1,
            1,
            2,
            vec![1.0],
            vec![1.0],
            vec![0.5, 0.5],
        )
        .unwrap();
        let data = vec![PpTrajectory {
            steps: vec![((0, 0), 0)],
            truncated: None,
        }];
        let alphabet = PpAlphabet::from_data(&data, 2);
        let profiles = {
            let mut s = one_hot_set();
            s.profiles.truncate(2);
            s
        };
        let mut rt = PpPomdpRuntime::new(PpPomdp { model, alphabet }, profiles);
        rt.observe_step((0, 0));
        assert_eq!(rt.current_index(), Some(0));
    }

    #[test]
    fn trained_pp_pomdp_tracks_tcm_closely() {
        let data = tcm_pp_data(600, 10, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (pp, report) = train_pp_pomdp(&data, &one_hot_set(), None, &mut rng).unwrap();
        assert_eq!(pp.model.n_states, 6);
        for w in report.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        let mut rt = PpPomdpRuntime::new(pp, one_hot_set());
        let mut env = tcm::TcmEnv::new();
        let mut se = 0.0;
        let mut n = 0usize;
        for _ in 0..30 {
            env.reset(&mut rng);
            rt.reset();
            let mut tracker = env.make_tracker();
            for _ in 0..10 {
                let a = rng.gen_range(0..4) as u16;
                let (o, _) = env.step(a, &mut rng);
                tracker.observe(a, o).unwrap();
                rt.observe_step((a, o));
                let truth = tracker.profile();
                for (x, y) in truth.values.iter().zip(&rt.current_profile().values) {
                    se += (x - y) * (x - y);
                    n += 1;
                }
            }
        }
        let rmse = (se / n as f64).sqrt();
        assert!(rmse < 0.1, "trained PP-POMDP rmse {rmse}");
    }

    #[test]
    fn pp_pomdp_serialization_roundtrip() {
        let pp = exact_tcm_pp_pomdp();
        let mut text = String::new();
        write_pp_pomdp(&mut text, &pp);
        let back = parse_pp_pomdp(&text).unwrap();
        assert_eq!(back.alphabet.pp_actions, pp.alphabet.pp_actions);
        let mut again = String::new();
        write_pp_pomdp(&mut again, &back);
        assert_eq!(text, again);
    }

    #[test]
    fn train_on_empty_data_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(train_pp_pomdp(&[], &one_hot_set(), None, &mut rng).is_err());
    }
}
