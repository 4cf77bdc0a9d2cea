//! Profile estimation and translation: count-based test estimates per
//! history, greedy significance-based clustering into a profile set, and
//! translation of raw trajectories into profile-index sequences.

use crate::core::{
    Alphabet, CoreError, History, PredictionProfile, Step, TestOfInterest, TestOutcome, Trajectory,
    test_outcome,
};
use crate::parallel;
use crate::stats::{GTest, bernoulli_kld};
use std::collections::HashMap;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TestCounts {
    pub successes: u64,
    pub trials: u64,
}

impl TestCounts {
    pub fn estimate(&self) -> Option<f64> {
        if self.trials == 0 {
            None
        } else {
            Some(self.successes as f64 / self.trials as f64)
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct HistoryStats {
    pub visits: u64,
    pub tests: Vec<TestCounts>,
}

/// Per-history statistics for every stored prefix of the corpus. Prefixes
/// longer than `max_len` are keyed by their trailing `max_len` steps.
#[derive(Clone, Debug)]
pub struct CorpusStats {
    pub n_tests: usize,
    pub max_len: usize,
    pub map: HashMap<History, HistoryStats>,
    /// Aggregated tallies keyed by every strictly shorter trailing suffix
    /// of each stored prefix; sparse full-length prefixes back off to
    /// these during translation.
    pub suffix_map: HashMap<History, HistoryStats>,
}

impl CorpusStats {
    /// The storage key for a raw prefix.
    pub fn key_for(&self, prefix: &History) -> History {
        if prefix.len() <= self.max_len {
            prefix.clone()
        } else {
            prefix.suffix(self.max_len)
        }
    }

    pub fn get(&self, prefix: &History) -> Option<&HistoryStats> {
        self.map.get(&self.key_for(prefix))
    }

    /// Tallies for the trailing `k` steps of `prefix`; `k` equal to the
    /// stored key length falls through to the exact-prefix map.
    pub fn get_suffix(&self, prefix: &History, k: usize) -> Option<&HistoryStats> {
        if k >= prefix.len().min(self.max_len) {
            self.get(prefix)
        } else {
            self.suffix_map.get(&prefix.suffix(k))
        }
    }
}

fn tally(shard: &[Trajectory], tests: &[TestOfInterest], max_len: usize) -> CorpusStats {
    let mut map: HashMap<History, HistoryStats> = HashMap::new();
    let mut suffix_map: HashMap<History, HistoryStats> = HashMap::new();
    for traj in shard {
        for offset in 0..=traj.steps.len() {
            let prefix = History::from_steps(traj.steps[..offset].to_vec());
            let key_len = offset.min(max_len);
            let key = if offset <= max_len {
                prefix
            } else {
                prefix.suffix(max_len)
            };
            let outcomes: Vec<TestOutcome> = tests
                .iter()
                .map(|t| test_outcome(&traj.steps, offset, t))
                .collect();
            let bump = |entry: &mut HistoryStats| {
                entry.visits += 1;
                for (tc, out) in entry.tests.iter_mut().zip(&outcomes) {
                    match out {
                        TestOutcome::Success => {
                            tc.trials += 1;
                            tc.successes += 1;
                        }
                        TestOutcome::Failure => tc.trials += 1,
                        TestOutcome::NotApplicable => {}
                    }
                }
            };
            // Including k == key_len keeps the suffix view a true union
            // over every occurrence of the trailing pattern.
            for k in 1..=key_len {
                let entry = suffix_map
                    .entry(key.suffix(k))
                    .or_insert_with(|| HistoryStats {
                        visits: 0,
                        tests: vec![TestCounts::default(); tests.len()],
                    });
                bump(entry);
            }
            let entry = map.entry(key).or_insert_with(|| HistoryStats {
                visits: 0,
                tests: vec![TestCounts::default(); tests.len()],
            });
            bump(entry);
        }
    }
    CorpusStats {
        n_tests: tests.len(),
        max_len,
        map,
        suffix_map,
    }
}

/// Exact tallies of test trials and successes after every stored prefix.
/// Episodes are sharded across workers and the additive counts merged.
pub fn collect_stats(
    data: &[Trajectory],
    tests: &[TestOfInterest],
    max_len: usize,
) -> CorpusStats {
    let chunk = (data.len() / 64).max(256);
    let shards = parallel::map_chunks(data, chunk, |s| tally(s, tests, max_len));
    let mut merged = CorpusStats {
        n_tests: tests.len(),
        max_len,
        map: HashMap::new(),
        suffix_map: HashMap::new(),
    };
    let fold = |into: &mut HashMap<History, HistoryStats>, from: HashMap<History, HistoryStats>| {
        for (h, s) in from {
            let entry = into.entry(h).or_insert_with(|| HistoryStats {
                visits: 0,
                tests: vec![TestCounts::default(); tests.len()],
            });
            entry.visits += s.visits;
            for (a, b) in entry.tests.iter_mut().zip(&s.tests) {
                a.successes += b.successes;
                a.trials += b.trials;
            }
        }
    };
    for shard in shards {
        fold(&mut merged.map, shard.map);
        fold(&mut merged.suffix_map, shard.suffix_map);
    }
    merged
}

/// A profile estimated at an exemplar history, frozen at admission.
#[derive(Clone, Debug)]
pub struct EstimatedProfile {
    pub values: Vec<f64>,
    pub counts: Vec<TestCounts>,
    pub exemplar: History,
}

impl EstimatedProfile {
    fn from_stats(h: &History, s: &HistoryStats) -> Self {
        EstimatedProfile {
            values: s.tests.iter().map(|c| c.estimate().unwrap_or(0.0)).collect(),
            counts: s.tests.clone(),
            exemplar: h.clone(),
        }
    }

    pub fn profile(&self) -> PredictionProfile {
        PredictionProfile::new(self.values.clone())
    }
}

/// True iff any test of interest is significantly different between the two
/// count vectors; zero-trial components carry no information and are
/// skipped.
pub fn profiles_differ(a: &[TestCounts], b: &[TestCounts], gt: &GTest) -> bool {
    a.iter().zip(b).any(|(x, y)| {
        x.trials > 0 && y.trials > 0 && gt.differs(x.successes, x.trials, y.successes, y.trials)
    })
}

#[derive(Clone, Debug)]
pub struct ProfileSet {
    pub profiles: Vec<EstimatedProfile>,
    pub alpha: f64,
    pub min_trials: u64,
}

impl ProfileSet {
    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    /// Component-wise mean of the member profiles.
    pub fn mean_profile(&self) -> PredictionProfile {
        let m = self.profiles.first().map_or(0, |p| p.values.len());
        let mut v = vec![0.0; m];
        for p in &self.profiles {
            for (acc, x) in v.iter_mut().zip(&p.values) {
                *acc += x;
            }
        }
        let n = self.profiles.len().max(1) as f64;
        for x in &mut v {
            *x /= n;
        }
        PredictionProfile::new(v)
    }

    /// Index of the member closest to `p` in L-infinity distance.
    pub fn nearest_linf(&self, p: &PredictionProfile) -> Option<usize> {
        (0..self.profiles.len()).min_by(|&i, &j| {
            let di = self.profiles[i].profile().linf_distance(p);
            let dj = self.profiles[j].profile().linf_distance(p);
            di.partial_cmp(&dj).unwrap()
        })
    }
}

/// Greedy discovery of the distinct profiles: scan histories by descending
/// visit count (ties: shorter first, then lexicographic); a history is
/// admitted as a new exemplar iff every test has at least `min_trials`
/// trials and its counts differ significantly from every current exemplar.
/// The null history is never a candidate: its profile reflects the
/// un-dealt start of an episode, which the runtime models never predict
/// from.
pub fn cluster_profiles(stats: &CorpusStats, gt: &GTest, min_trials: u64) -> ProfileSet {
    let mut order: Vec<(&History, &HistoryStats)> = stats
        .map
        .iter()
        .filter(|(h, _)| !h.is_empty())
        .collect();
    order.sort_by(|(ha, sa), (hb, sb)| {
        sb.visits
            .cmp(&sa.visits)
            .then(ha.len().cmp(&hb.len()))
            .then(ha.cmp(hb))
    });
    let mut set = ProfileSet {
        profiles: Vec::new(),
        alpha: gt.alpha(),
        min_trials,
    };
    for (h, s) in order {
        if s.tests.iter().any(|c| c.trials < min_trials) {
            continue;
        }
        if set
            .profiles
            .iter()
            .all(|p| profiles_differ(&s.tests, &p.counts, gt))
        {
            set.profiles.push(EstimatedProfile::from_stats(h, s));
        }
    }
    set
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MatchResult {
    Unique(usize),
    Multiple(Vec<usize>),
    None,
}

/// Profiles not significantly different from the history's counts.
pub fn match_profile(s: &HistoryStats, set: &ProfileSet, gt: &GTest) -> MatchResult {
    let hits: Vec<usize> = set
        .profiles
        .iter()
        .enumerate()
        .filter(|(_, p)| !profiles_differ(&s.tests, &p.counts, gt))
        .map(|(i, _)| i)
        .collect();
    match hits.len() {
        0 => MatchResult::None,
        1 => MatchResult::Unique(hits[0]),
        _ => MatchResult::Multiple(hits),
    }
}

/// Candidate with the smallest summed Bernoulli KL divergence from the
/// history's point estimates; zero-trial tests contribute nothing and ties
/// go to the lowest index.
pub fn kld_match(s: &HistoryStats, candidates: &[usize], set: &ProfileSet) -> usize {
    debug_assert!(!candidates.is_empty());
    let mut best = candidates[0];
    let mut best_d = f64::INFINITY;
    for &i in candidates {
        let mut d = 0.0;
        for (c, rho) in s.tests.iter().zip(&set.profiles[i].values) {
            if let Some(p_hat) = c.estimate() {
                d += bernoulli_kld(p_hat, *rho);
            }
        }
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TranslateStrategy {
    Kld,
    Cut,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Truncation {
    /// A prefix matched no profile at all.
    NoMatch,
    /// Ambiguous match under the cut strategy.
    Ambiguous,
    /// A prefix absent from the statistics.
    Unseen,
}

/// A trajectory re-expressed in the profile system: one (action,
/// observation) pair and one profile index per surviving step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PpTrajectory {
    pub steps: Vec<(Step, usize)>,
    pub truncated: Option<Truncation>,
}

/// Longest trailing suffix whose pooled counts single out one profile; the
/// most recent steps carry the disambiguating observations, so a longer
/// suffix is never less specific, and suffixes too sparse to reject
/// anything simply fall through.
pub fn confident_label(
    prefix: &History,
    stats: &CorpusStats,
    set: &ProfileSet,
    gt: &GTest,
) -> Option<usize> {
    let max_k = prefix.len().min(stats.max_len);
    (1..=max_k).rev().find_map(|k| {
        stats
            .get_suffix(prefix, k)
            .and_then(|s| match match_profile(s, set, gt) {
                MatchResult::Unique(j) => Some(j),
                _ => None,
            })
    })
}

/// Re-expresses an episode as profile indices: after each step, the prefix
/// statistics are matched against the profile set. A unique match emits
/// its index; an ambiguous one is settled by KL divergence or cuts the
/// episode, depending on strategy; no match (or an unseen prefix) always
/// cuts.
pub fn translate(
    traj: &Trajectory,
    stats: &CorpusStats,
    set: &ProfileSet,
    strategy: TranslateStrategy,
    gt: &GTest,
) -> PpTrajectory {
    translate_inner(traj, stats, set, strategy, gt, None)
}

/// Majority-voted deterministic transition tables distilled from
/// consecutive confidently-labeled steps. The profile system is
/// deterministic, so a well-supported entry is near-certain even where
/// per-prefix statistics are sparse. The second-order table additionally
/// keys on the preceding PP-action, which disambiguates transitions that
/// depend on one more step of context; the first-order table is its
/// fallback where data is thin.
pub struct ProfileTransitions {
    pub second: HashMap<(Step, usize, Step), usize>,
    pub first: HashMap<(usize, Step), usize>,
}

impl ProfileTransitions {
    fn next(&self, prev_pa: Step, prev: usize, pa: Step) -> Option<usize> {
        self.second
            .get(&(prev_pa, prev, pa))
            .or_else(|| self.first.get(&(prev, pa)))
            .copied()
    }
}

fn majority<K: Ord + std::hash::Hash>(
    votes: HashMap<K, HashMap<usize, u64>>,
    min_votes: u64,
) -> HashMap<K, usize> {
    votes
        .into_iter()
        .filter_map(|(k, m)| {
            let total: u64 = m.values().sum();
            let mut entries: Vec<(usize, u64)> = m.into_iter().collect();
            entries.sort_unstable();
            let mut best = entries[0];
            for &e in &entries[1..] {
                if e.1 > best.1 {
                    best = e;
                }
            }
            // The profile system is deterministic, so a genuine edge is
            // near-unanimous; weak or contested tallies are mislabel noise.
            (total >= min_votes && best.1 * 10 >= total * 9).then_some((k, best.0))
        })
        .collect()
}

pub fn profile_transitions(
    trajs: &[Trajectory],
    confident: &[Vec<Option<usize>>],
) -> ProfileTransitions {
    let mut v1: HashMap<(usize, Step), HashMap<usize, u64>> = HashMap::new();
    let mut v2: HashMap<(Step, usize, Step), HashMap<usize, u64>> = HashMap::new();
    for (t, labs) in trajs.iter().zip(confident) {
        for i in 1..labs.len() {
            if let (Some(p), Some(c)) = (labs[i - 1], labs[i]) {
                *v1.entry((p, t.steps[i])).or_default().entry(c).or_default() += 1;
                *v2.entry((t.steps[i - 1], p, t.steps[i]))
                    .or_default()
                    .entry(c)
                    .or_default() += 1;
            }
        }
    }
    // Fine-grained keys need a stiffer quorum: a sparse key can be seeded
    // entirely by correlated mislabels, while the pooled first-order entry
    // for the same step is backed by orders of magnitude more evidence.
    ProfileTransitions {
        second: majority(v2, 25),
        first: majority(v1, 5),
    }
}

fn translate_inner(
    traj: &Trajectory,
    stats: &CorpusStats,
    set: &ProfileSet,
    strategy: TranslateStrategy,
    gt: &GTest,
    trans: Option<&ProfileTransitions>,
) -> PpTrajectory {
    let mut out = PpTrajectory {
        steps: Vec::new(),
        truncated: None,
    };
    // Per-step direct evidence, stopping at the first unseen prefix.
    let mut conf: Vec<Option<usize>> = Vec::new();
    for i in 1..=traj.steps.len() {
        let prefix = History::from_steps(traj.steps[..i].to_vec());
        if stats.get(&prefix).is_none() {
            out.truncated = Some(Truncation::Unseen);
            break;
        }
        conf.push(confident_label(&prefix, stats, set, gt));
    }
    let n = conf.len();
    if n == 0 {
        return out;
    }
    let Some(trans) = trans else {
        return translate_steps(traj, stats, set, strategy, gt, &conf, out);
    };
    // The profile system is deterministic, so within a trajectory the label
    // sequence is a chain under the transition table. Pick the chain that
    // agrees with the most direct evidence (a small Viterbi pass): isolated
    // spurious unique matches get outvoted by the rest of the chain.
    let m = set.len();
    const BREAK: f64 = 0.25;
    const CONTRA: f64 = 5.0;
    let gain = |j: usize, l: usize| -> f64 {
        if conf[j] == Some(l) {
            1.0
        } else {
            0.0
        }
    };
    let mut score: Vec<f64> = (0..m).map(|l| gain(0, l)).collect();
    let mut from: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut broke: Vec<Vec<bool>> = Vec::with_capacity(n);
    for j in 1..n {
        let mut next = vec![f64::NEG_INFINITY; m];
        let mut arg = vec![0usize; m];
        let mut brk = vec![false; m];
        let prev_pa = traj.steps[j - 1];
        for prev in 0..m {
            match trans.next(prev_pa, prev, traj.steps[j]) {
                Some(l) => {
                    for cand in 0..m {
                        let cost = if cand == l { 0.0 } else { CONTRA };
                        let sc = score[prev] - cost + gain(j, cand);
                        if sc > next[cand] {
                            next[cand] = sc;
                            arg[cand] = prev;
                            brk[cand] = cand != l;
                        }
                    }
                }
                None => {
                    // Unknown dynamics: the chain may continue into any
                    // label at a small cost.
                    for cand in 0..m {
                        let sc = score[prev] - BREAK + gain(j, cand);
                        if sc > next[cand] {
                            next[cand] = sc;
                            arg[cand] = prev;
                            brk[cand] = true;
                        }
                    }
                }
            }
        }
        score = next;
        from.push(arg);
        broke.push(brk);
    }
    let mut best = 0;
    for l in 1..m {
        if score[l] > score[best] {
            best = l;
        }
    }
    let mut labels = vec![0usize; n];
    let mut breaks = vec![false; n];
    let mut cur = best;
    for j in (1..n).rev() {
        labels[j] = cur;
        breaks[j] = broke[j - 1][cur];
        cur = from[j - 1][cur];
    }
    labels[0] = cur;
    breaks[0] = conf[0].is_none();
    for j in 0..n {
        if breaks[j] && conf[j].is_none() {
            // Neither direct evidence nor the deterministic dynamics pin
            // this label down.
            match strategy {
                TranslateStrategy::Kld => {
                    // Keep the chain's guess; divergence matching has no
                    // stronger evidence to offer here.
                }
                TranslateStrategy::Cut => {
                    out.truncated = Some(Truncation::Ambiguous);
                    return out;
                }
            }
        }
        out.steps.push((traj.steps[j], labels[j]));
    }
    out
}

/// Spec-shaped per-step resolution, used when no transition table is
/// available (single-trajectory translation).
fn translate_steps(
    traj: &Trajectory,
    stats: &CorpusStats,
    set: &ProfileSet,
    strategy: TranslateStrategy,
    gt: &GTest,
    conf: &[Option<usize>],
    mut out: PpTrajectory,
) -> PpTrajectory {
    for (j, &c) in conf.iter().enumerate() {
        let prefix = History::from_steps(traj.steps[..=j].to_vec());
        let full = stats.get(&prefix).expect("prefix presence checked");
        let max_k = prefix.len().min(stats.max_len);
        let idx = if let Some(i) = c {
            i
        } else {
            // No suffix is decisive. The longest mature ambiguous suffix
            // (min_trials on every test) narrows the candidates; with no
            // mature evidence at all, the divergence strategy scores the
            // exact-prefix counts against every profile — its few trials
            // came from this very occurrence — while the cut strategy
            // stops rather than guess.
            let mature =
                |s: &&HistoryStats| s.tests.iter().all(|tc| tc.trials >= set.min_trials);
            let multi = (1..=max_k).rev().find_map(|k| {
                stats
                    .get_suffix(&prefix, k)
                    .filter(mature)
                    .and_then(|s| match match_profile(s, set, gt) {
                        MatchResult::Multiple(c) => Some((s, c)),
                        _ => None,
                    })
            });
            match (multi, strategy) {
                (Some((s, cands)), TranslateStrategy::Kld) => kld_match(s, &cands, set),
                (Some(_), TranslateStrategy::Cut) => {
                    out.truncated = Some(Truncation::Ambiguous);
                    return out;
                }
                (None, TranslateStrategy::Kld) => {
                    let all: Vec<usize> = (0..set.len()).collect();
                    kld_match(full, &all, set)
                }
                (None, TranslateStrategy::Cut) => {
                    out.truncated = Some(Truncation::NoMatch);
                    return out;
                }
            }
        };
        out.steps.push((traj.steps[j], idx));
    }
    out
}

/// Translates a batch in parallel. Statistically ambiguous steps are first
/// resolved through the voted transition table where possible; only steps
/// with neither direct nor propagated evidence fall back to the per-episode
/// strategy.
pub fn translate_all(
    trajs: &[Trajectory],
    stats: &CorpusStats,
    set: &ProfileSet,
    strategy: TranslateStrategy,
    gt: &GTest,
) -> Vec<PpTrajectory> {
    let confident: Vec<Vec<Option<usize>>> = parallel::map_collect(trajs, |t| {
        (1..=t.steps.len())
            .map(|i| {
                let prefix = History::from_steps(t.steps[..i].to_vec());
                confident_label(&prefix, stats, set, gt)
            })
            .collect()
    });
    let trans = profile_transitions(trajs, &confident);
    // A refinement pass: the first decoding is already near-exact, so a
    // transition table rebuilt from its full label chains gets orders of
    // magnitude more votes per edge, flushing out noise-seeded entries.
    let first_pass: Vec<Vec<Option<usize>>> = parallel::map_collect(trajs, |t| {
        translate_inner(t, stats, set, TranslateStrategy::Kld, gt, Some(&trans))
            .steps
            .into_iter()
            .map(|(_, l)| Some(l))
            .collect()
    });
    let trans = profile_transitions(trajs, &first_pass);
    parallel::map_collect(trajs, |t| {
        translate_inner(t, stats, set, strategy, gt, Some(&trans))
    })
}

/// CSV rows: index, m values, per-test "successes/trials" pairs, exemplar.
pub fn write_profile_set(out: &mut String, set: &ProfileSet, alphabet: &Alphabet) {
    let _ = writeln!(out, "# alpha {} min_trials {}", set.alpha, set.min_trials);
    for (i, p) in set.profiles.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in &p.values {
            let _ = write!(out, ",{v}");
        }
        for c in &p.counts {
            let _ = write!(out, ",{}/{}", c.successes, c.trials);
        }
        let _ = write!(out, ",");
        for (j, &(a, o)) in p.exemplar.steps.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{} {}", alphabet.action_name(a), alphabet.obs_name(o));
        }
        out.push('\n');
    }
}

pub fn parse_profile_set(text: &str, alphabet: &Alphabet) -> Result<ProfileSet, CoreError> {
    let mut set = ProfileSet {
        profiles: Vec::new(),
        alpha: 0.0,
        min_trials: 0,
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        let err = |msg: String| CoreError::Parse {
            line: lineno + 1,
            msg,
        };
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let toks: Vec<&str> = rest.split_whitespace().collect();
            if toks.len() == 4 && toks[0] == "alpha" && toks[2] == "min_trials" {
                set.alpha = toks[1].parse().map_err(|e| err(format!("bad alpha: {e}")))?;
                set.min_trials = toks[3]
                    .parse()
                    .map_err(|e| err(format!("bad min_trials: {e}")))?;
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        // index, m values, m count pairs, exemplar
        if fields.len() < 2 || (fields.len() - 2) % 2 != 0 {
            return Err(err("malformed profile row".into()));
        }
        let m = (fields.len() - 2) / 2;
        let mut values = Vec::with_capacity(m);
        for f in &fields[1..1 + m] {
            values.push(f.parse().map_err(|e| err(format!("bad value: {e}")))?);
        }
        let mut counts = Vec::with_capacity(m);
        for f in &fields[1 + m..1 + 2 * m] {
            let (s, n) = f
                .split_once('/')
                .ok_or_else(|| err("bad count pair".into()))?;
            counts.push(TestCounts {
                successes: s.parse().map_err(|e| err(format!("bad count: {e}")))?,
                trials: n.parse().map_err(|e| err(format!("bad count: {e}")))?,
            });
        }
        let toks: Vec<&str> = fields[1 + 2 * m].split_whitespace().collect();
        if toks.len() % 2 != 0 {
            return Err(err("odd exemplar token count".into()));
        }
        let mut steps = Vec::with_capacity(toks.len() / 2);
        for pair in toks.chunks(2) {
            let a = alphabet
                .action_id(pair[0])
                .ok_or_else(|| err(format!("unknown action {:?}", pair[0])))?;
            let o = alphabet
                .obs_id(pair[1])
                .ok_or_else(|| err(format!("unknown observation {:?}", pair[1])))?;
            steps.push((a, o));
        }
        set.profiles.push(EstimatedProfile {
            values,
            counts,
            exemplar: History::from_steps(steps),
        });
    }
    Ok(set)
}

/// One line per episode: `action obs index ... [TRUNCATED:<reason>]`.
pub fn write_pp_trajectories(out: &mut String, trajs: &[PpTrajectory], alphabet: &Alphabet) {
    for t in trajs {
        let mut first = true;
        for &((a, o), idx) in &t.steps {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(
                out,
                "{} {} {}",
                alphabet.action_name(a),
                alphabet.obs_name(o),
                idx
            );
        }
        if let Some(reason) = t.truncated {
            if !first {
                out.push(' ');
            }
            let tag = match reason {
                Truncation::NoMatch => "nomatch",
                Truncation::Ambiguous => "ambiguous",
                Truncation::Unseen => "unseen",
            };
            let _ = write!(out, "[TRUNCATED:{tag}]");
        }
        out.push('\n');
    }
}

pub fn parse_pp_trajectories(
    text: &str,
    alphabet: &Alphabet,
) -> Result<Vec<PpTrajectory>, CoreError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.starts_with('#') {
            continue;
        }
        let err = |msg: String| CoreError::Parse {
            line: lineno + 1,
            msg,
        };
        let mut t = PpTrajectory {
            steps: Vec::new(),
            truncated: None,
        };
        let mut toks = line.split_whitespace().peekable();
        while let Some(tok) = toks.next() {
            if let Some(tag) = tok.strip_prefix("[TRUNCATED:") {
                let tag = tag.strip_suffix(']').ok_or_else(|| err("bad tag".into()))?;
                t.truncated = Some(match tag {
                    "nomatch" => Truncation::NoMatch,
                    "ambiguous" => Truncation::Ambiguous,
                    "unseen" => Truncation::Unseen,
                    other => return Err(err(format!("unknown truncation {other:?}"))),
                });
                if toks.next().is_some() {
                    return Err(err("tokens after truncation tag".into()));
                }
                break;
            }
            let a = alphabet
                .action_id(tok)
                .ok_or_else(|| err(format!("unknown action {tok:?}")))?;
            let o = toks
                .next()
                .and_then(|s| alphabet.obs_id(s))
                .ok_or_else(|| err("missing or unknown observation".into()))?;
            let idx: usize = toks
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err("missing or bad profile index".into()))?;
            t.steps.push(((a, o), idx));
        }
        out.push(t);
    }
    Ok(out)
}
