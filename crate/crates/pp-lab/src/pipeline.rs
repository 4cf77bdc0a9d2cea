//! Experiment orchestration: flat key-value configs, staged artifacts with
//! config-hash staleness checks, per-(stage, trial) RNG streams, and CSV
//! outputs.

use crate::control::{evaluate, FeatureSource};
use crate::core::{
    parse_trajectories, write_trajectories, CoreError, ObsId, Trajectory,
};
use crate::envs::{ballbounce::BallBounceEnv, gallery::GalleryEnv, tcm::TcmEnv, Environment};
use crate::parallel;
use crate::pomdp::{em_train, parse_pomdp, write_pomdp, EmConfig, TabularPomdp};
use crate::ppmodel::{
    parse_lpst, parse_pp_pomdp, train_pp_pomdp, write_lpst, write_pp_pomdp, Lpst, LpstRuntime,
    PpPomdpRuntime,
};
use crate::profiles::{
    cluster_profiles, collect_stats, parse_pp_trajectories, parse_profile_set, translate_all,
    write_pp_trajectories, write_profile_set, ProfileSet, TranslateStrategy,
};
use crate::sdm::{
    check_deterministic_bound, numeric_rank, tcm_profile_machine, DEFAULT_RANK_TOL,
};
use crate::stats::GTest;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("prerequisite missing: {0}")]
    Prereq(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Prereq(_) => 3,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub environment: String,
    pub bb_k: usize,
    pub bb_x: usize,
    pub episodes: usize,
    pub episode_len: usize,
    pub alpha: f64,
    pub min_trials: u64,
    pub max_search_len: usize,
    pub translation: TranslateStrategy,
    pub pp_model: String,
    pub lpst_depth: usize,
    /// 0 means the default of twice the discovered profile count.
    pub pp_states: usize,
    pub flat_states: usize,
    pub em_iters: usize,
    pub em_restarts: usize,
    pub eta: f64,
    pub beta: f64,
    pub kappa: f64,
    pub eval_steps: u64,
    pub trials: usize,
    pub feature_source: String,
    pub sdm_target: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            environment: "tcm".into(),
            bb_k: 10,
            bb_x: 4,
            episodes: 20_000,
            episode_len: 10,
            alpha: 1e-5,
            min_trials: 10,
            max_search_len: 10,
            translation: TranslateStrategy::Kld,
            pp_model: "lpst".into(),
            lpst_depth: 8,
            pp_states: 0,
            flat_states: 30,
            em_iters: 50,
            em_restarts: 3,
            eta: 0.01,
            beta: 0.95,
            kappa: 0.001,
            eval_steps: 100_000,
            trials: 5,
            feature_source: "pp".into(),
            sdm_target: "tcm-machine".into(),
        }
    }
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` comments and blank lines are
    /// skipped; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected key = value", ln + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| PipelineError::Config(format!("line {}: bad {what}: {value}", ln + 1));
            match key {
                "environment" => cfg.environment = value.to_string(),
                "bb_k" => cfg.bb_k = value.parse().map_err(|_| bad("bb_k"))?,
                "bb_x" => cfg.bb_x = value.parse().map_err(|_| bad("bb_x"))?,
                "episodes" => cfg.episodes = value.parse().map_err(|_| bad("episodes"))?,
                "episode_len" => cfg.episode_len = value.parse().map_err(|_| bad("episode_len"))?,
                "alpha" => cfg.alpha = value.parse().map_err(|_| bad("alpha"))?,
                "min_trials" => cfg.min_trials = value.parse().map_err(|_| bad("min_trials"))?,
                "max_search_len" => {
                    cfg.max_search_len = value.parse().map_err(|_| bad("max_search_len"))?
                }
                "translation" => {
                    cfg.translation = match value {
                        "kld" => TranslateStrategy::Kld,
                        "cut" => TranslateStrategy::Cut,
                        _ => return Err(bad("translation (kld|cut)")),
                    }
                }
                "pp_model" => match value {
                    "lpst" | "ppomdp" => cfg.pp_model = value.to_string(),
                    _ => return Err(bad("pp_model (lpst|ppomdp)")),
                },
                "lpst_depth" => cfg.lpst_depth = value.parse().map_err(|_| bad("lpst_depth"))?,
                "pp_states" => cfg.pp_states = value.parse().map_err(|_| bad("pp_states"))?,
                "flat_states" => cfg.flat_states = value.parse().map_err(|_| bad("flat_states"))?,
                "em_iters" => cfg.em_iters = value.parse().map_err(|_| bad("em_iters"))?,
                "em_restarts" => cfg.em_restarts = value.parse().map_err(|_| bad("em_restarts"))?,
                "eta" => cfg.eta = value.parse().map_err(|_| bad("eta"))?,
                "beta" => cfg.beta = value.parse().map_err(|_| bad("beta"))?,
                "kappa" => cfg.kappa = value.parse().map_err(|_| bad("kappa"))?,
                "eval_steps" => cfg.eval_steps = value.parse().map_err(|_| bad("eval_steps"))?,
                "trials" => cfg.trials = value.parse().map_err(|_| bad("trials"))?,
                "feature_source" => match value {
                    "pp" | "flat" | "oracle" | "som" => cfg.feature_source = value.to_string(),
                    _ => return Err(bad("feature_source (pp|flat|oracle|som)")),
                },
                "sdm_target" => cfg.sdm_target = value.to_string(),
                _ => {
                    return Err(PipelineError::Config(format!(
                        "line {}: unknown key `{key}`",
                        ln + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(PipelineError::Config(msg.to_string()))
            }
        };
        check(
            matches!(self.environment.as_str(), "tcm" | "gallery" | "ballbounce"),
            "environment must be tcm|gallery|ballbounce",
        )?;
        check(self.alpha > 0.0 && self.alpha < 1.0, "alpha must be in (0,1)")?;
        check(self.episode_len >= 1, "episode_len must be >= 1")?;
        check(self.max_search_len >= 1, "max_search_len must be >= 1")?;
        check(self.trials >= 1, "trials must be >= 1")?;
        check(self.flat_states >= 1, "flat_states must be >= 1")?;
        Ok(())
    }

    /// Canonical serialization; its FNV-1a hash is the staleness key.
    pub fn canonical(&self) -> String {
        let t = match self.translation {
            TranslateStrategy::Kld => "kld",
            TranslateStrategy::Cut => "cut",
        };
        format!(
            "alpha = {}\nbb_k = {}\nbb_x = {}\nbeta = {}\nem_iters = {}\nem_restarts = {}\n\
             environment = {}\nepisode_len = {}\nepisodes = {}\neta = {}\neval_steps = {}\n\
             feature_source = {}\nflat_states = {}\nkappa = {}\nlpst_depth = {}\n\
             max_search_len = {}\nmin_trials = {}\npp_model = {}\npp_states = {}\n\
             sdm_target = {}\ntranslation = {}\ntrials = {}\n",
            self.alpha,
            self.bb_k,
            self.bb_x,
            self.beta,
            self.em_iters,
            self.em_restarts,
            self.environment,
            self.episode_len,
            self.episodes,
            self.eta,
            self.eval_steps,
            self.feature_source,
            self.flat_states,
            self.kappa,
            self.lpst_depth,
            self.max_search_len,
            self.min_trials,
            self.pp_model,
            self.pp_states,
            self.sdm_target,
            t,
            self.trials,
        )
    }

    pub fn hash(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// One RNG stream per (stage, trial), derived from the master seed.
pub fn derive_rng(master: u64, stage: &str, trial: u64) -> ChaCha8Rng {
    let mut key = master.to_le_bytes().to_vec();
    key.extend_from_slice(stage.as_bytes());
    key.extend_from_slice(&trial.to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a(&key))
}

// ---------------------------------------------------------------------------
// Artifact plumbing
// ---------------------------------------------------------------------------

fn make_env(cfg: &ExperimentConfig) -> Result<Box<dyn Environment>> {
    Ok(match cfg.environment.as_str() {
        "tcm" => Box::new(TcmEnv::new()),
        "gallery" => Box::new(GalleryEnv::new()),
        "ballbounce" => Box::new(
            BallBounceEnv::new(cfg.bb_k as i32, cfg.bb_x as i32)
                .map_err(|e| PipelineError::Config(e.to_string()))?,
        ),
        other => return Err(PipelineError::Config(format!("unknown environment {other}"))),
    })
}

fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, content)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads an artifact, checking its `# config <hash>` first line.
fn read_artifact(path: &Path, hash: u64, stage: &str) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|_| {
        PipelineError::Prereq(format!(
            "{} not found; run the `{stage}` stage first",
            path.display()
        ))
    })?;
    let (first, rest) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    let expected = format!("# config {hash:016x}");
    if first != expected {
        return Err(PipelineError::Prereq(format!(
            "{} was produced under a different config; re-run `{stage}`",
            path.display()
        )));
    }
    Ok(rest.to_string())
}

fn stamp(hash: u64) -> String {
    format!("# config {hash:016x}\n")
}

#[derive(Clone, Debug)]
pub struct StageRecord {
    pub stage: String,
    pub artifact: PathBuf,
    pub millis: u128,
}

#[derive(Clone, Debug, Default)]
pub struct RunManifest {
    pub config_hash: u64,
    pub tool_version: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    fn new(hash: u64) -> Self {
        RunManifest {
            config_hash: hash,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            stages: Vec::new(),
        }
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "config {:016x}", self.config_hash);
        let _ = writeln!(s, "version {}", self.tool_version);
        for r in &self.stages {
            if !r.artifact.as_os_str().is_empty() && !r.artifact.exists() {
                return Err(PipelineError::Prereq(format!(
                    "artifact {} missing after stage {}",
                    r.artifact.display(),
                    r.stage
                )));
            }
            let _ = writeln!(s, "stage {} {} {}ms", r.stage, r.artifact.display(), r.millis);
        }
        write_atomic(&out_dir.join("manifest.txt"), &s)
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

pub fn gen_data(cfg: &ExperimentConfig, out_dir: &Path, seed: u64) -> Result<PathBuf> {
    let env0 = make_env(cfg)?;
    let alphabet = env0.alphabet().clone();
    let n_actions = alphabet.n_actions();
    let idx: Vec<usize> = (0..cfg.episodes).collect();
    let trajs: Vec<Trajectory> = parallel::map_chunks(&idx, 512, |chunk| {
        let mut env = make_env(cfg).expect("env construction already validated");
        chunk
            .iter()
            .map(|&i| {
                let mut rng = derive_rng(seed, "gen-data", i as u64);
                env.reset(&mut rng);
                let steps = (0..cfg.episode_len)
                    .map(|_| {
                        let a = rng.gen_range(0..n_actions) as u16;
                        let (o, _) = env.step(a, &mut rng);
                        (a, o)
                    })
                    .collect();
                Trajectory {
                    env_id: cfg.environment.clone(),
                    seed: i as u64,
                    steps,
                }
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    let mut text = stamp(cfg.hash());
    write_trajectories(&mut text, &trajs, &alphabet);
    let path = out_dir.join("data.txt");
    write_atomic(&path, &text)?;
    Ok(path)
}

fn load_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<Trajectory>> {
    let env = make_env(cfg)?;
    let text = read_artifact(&out_dir.join("data.txt"), cfg.hash(), "gen-data")?;
    Ok(parse_trajectories(&text, env.alphabet())?)
}

pub fn estimate_profiles(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    let env = make_env(cfg)?;
    let data = load_data(cfg, out_dir)?;
    let stats = collect_stats(&data, env.tests(), cfg.max_search_len);
    let gt = GTest::new(cfg.alpha).map_err(PipelineError::Core)?;
    let set = cluster_profiles(&stats, &gt, cfg.min_trials);
    if set.is_empty() {
        return Err(PipelineError::Prereq(
            "no profiles survived clustering; need more data".into(),
        ));
    }
    let mut text = stamp(cfg.hash());
    write_profile_set(&mut text, &set, env.alphabet());
    let path = out_dir.join("profiles.txt");
    write_atomic(&path, &text)?;
    Ok(path)
}

fn load_profiles(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ProfileSet> {
    let env = make_env(cfg)?;
    let text = read_artifact(&out_dir.join("profiles.txt"), cfg.hash(), "estimate-profiles")?;
    Ok(parse_profile_set(&text, env.alphabet())?)
}

pub fn translate_stage(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    let env = make_env(cfg)?;
    let data = load_data(cfg, out_dir)?;
    let set = load_profiles(cfg, out_dir)?;
    let stats = collect_stats(&data, env.tests(), cfg.max_search_len);
    let gt = GTest::new(cfg.alpha).map_err(PipelineError::Core)?;
    let pp = translate_all(&data, &stats, &set, cfg.translation, &gt);
    let mut text = stamp(cfg.hash());
    write_pp_trajectories(&mut text, &pp, env.alphabet());
    let path = out_dir.join("ppdata.txt");
    write_atomic(&path, &text)?;
    Ok(path)
}

pub fn train_pp(cfg: &ExperimentConfig, out_dir: &Path, seed: u64) -> Result<PathBuf> {
    let env = make_env(cfg)?;
    let set = load_profiles(cfg, out_dir)?;
    let text = read_artifact(&out_dir.join("ppdata.txt"), cfg.hash(), "translate")?;
    let pp_data = parse_pp_trajectories(&text, env.alphabet())?;
    let mut out = stamp(cfg.hash());
    let path = out_dir.join("pp_model.txt");
    match cfg.pp_model.as_str() {
        "lpst" => {
            let lpst = Lpst::build(&pp_data, cfg.lpst_depth).map_err(PipelineError::Core)?;
            write_lpst(&mut out, &lpst);
        }
        _ => {
            let n_states = if cfg.pp_states == 0 { None } else { Some(cfg.pp_states) };
            let mut rng = derive_rng(seed, "train-pp", 0);
            let (pp, _) =
                train_pp_pomdp(&pp_data, &set, n_states, &mut rng).map_err(PipelineError::Core)?;
            write_pp_pomdp(&mut out, &pp);
        }
    }
    write_atomic(&path, &out)?;
    Ok(path)
}

/// Dense observation remap for the flat baseline; symbols never seen in
/// training fall back to the prior at run time.
fn dense_obs_map(data: &[Trajectory]) -> HashMap<ObsId, ObsId> {
    let mut seen: Vec<ObsId> = data
        .iter()
        .flat_map(|t| t.steps.iter().map(|&(_, o)| o))
        .collect();
    seen.sort_unstable();
    seen.dedup();
    seen.into_iter()
        .enumerate()
        .map(|(i, o)| (o, i as ObsId))
        .collect()
}

pub fn train_flat(cfg: &ExperimentConfig, out_dir: &Path, seed: u64) -> Result<PathBuf> {
    let env = make_env(cfg)?;
    let data = load_data(cfg, out_dir)?;
    let obs_map = dense_obs_map(&data);
    let remapped: Vec<Trajectory> = data
        .iter()
        .map(|t| Trajectory {
            env_id: t.env_id.clone(),
            seed: t.seed,
            steps: t.steps.iter().map(|&(a, o)| (a, obs_map[&o])).collect(),
        })
        .collect();
    let em = EmConfig {
        n_states: cfg.flat_states,
        max_iters: cfg.em_iters,
        n_restarts: cfg.em_restarts,
        tol: 1e-6,
    };
    let mut rng = derive_rng(seed, "train-flat", 0);
    let (model, _) = em_train(
        &remapped,
        env.alphabet().n_actions(),
        obs_map.len(),
        em,
        &mut rng,
    )
    .map_err(PipelineError::Core)?;
    let mut out = stamp(cfg.hash());
    let mut pairs: Vec<(ObsId, ObsId)> = obs_map.into_iter().collect();
    pairs.sort_unstable();
    let _ = writeln!(out, "obsmap {}", pairs.len());
    for (raw, dense) in pairs {
        let _ = writeln!(out, "o {raw} {dense}");
    }
    write_pomdp(&mut out, &model);
    let path = out_dir.join("flat_model.txt");
    write_atomic(&path, &out)?;
    Ok(path)
}

fn load_flat(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(TabularPomdp, HashMap<ObsId, ObsId>)> {
    let text = read_artifact(&out_dir.join("flat_model.txt"), cfg.hash(), "train-flat")?;
    let mut lines = text.lines();
    let err = |msg: &str| PipelineError::Prereq(format!("flat model file corrupt: {msg}"));
    let h: Vec<&str> = lines.next().ok_or_else(|| err("empty"))?.split_whitespace().collect();
    if h.len() != 2 || h[0] != "obsmap" {
        return Err(err("bad obsmap header"));
    }
    let n: usize = h[1].parse().map_err(|_| err("bad obsmap count"))?;
    let mut map = HashMap::new();
    for _ in 0..n {
        let toks: Vec<&str> = lines.next().ok_or_else(|| err("missing obsmap row"))?
            .split_whitespace()
            .collect();
        if toks.len() != 3 || toks[0] != "o" {
            return Err(err("bad obsmap row"));
        }
        let raw: ObsId = toks[1].parse().map_err(|_| err("bad raw obs"))?;
        let dense: ObsId = toks[2].parse().map_err(|_| err("bad dense obs"))?;
        map.insert(raw, dense);
    }
    let rest: String = lines.collect::<Vec<&str>>().join("\n");
    let model = parse_pomdp(&rest).map_err(PipelineError::Core)?;
    Ok((model, map))
}

fn build_source(cfg: &ExperimentConfig, out_dir: &Path, seed: u64, trial: u64) -> Result<FeatureSource> {
    Ok(match cfg.feature_source.as_str() {
        "oracle" => FeatureSource::OraclePhi,
        "som" => FeatureSource::Som,
        "flat" => {
            let (model, obs_map) = load_flat(cfg, out_dir)?;
            let env = make_env(cfg)?;
            FeatureSource::Flat {
                model: Box::new(model),
                obs_map,
                tests: env.tests().to_vec(),
            }
        }
        _ => {
            let set = load_profiles(cfg, out_dir)?;
            let text = read_artifact(&out_dir.join("pp_model.txt"), cfg.hash(), "train-pp")?;
            if cfg.pp_model == "lpst" {
                let lpst = parse_lpst(&text).map_err(PipelineError::Core)?;
                let rng = derive_rng(seed, "evaluate-tiebreak", trial);
                FeatureSource::Pp(Box::new(LpstRuntime::new(lpst, set, rng)))
            } else {
                let pp = parse_pp_pomdp(&text).map_err(PipelineError::Core)?;
                FeatureSource::Pp(Box::new(PpPomdpRuntime::new(pp, set)))
            }
        }
    })
}

pub const EVAL_HEADER: &str =
    "trial,seed,featureSource,episodes,steps,avgReward,rmse,perTestRmse,fallbackCount,configHash";

pub fn evaluate_stage(cfg: &ExperimentConfig, out_dir: &Path, seed: u64) -> Result<PathBuf> {
    // Fail fast on missing prerequisites before fanning out.
    build_source(cfg, out_dir, seed, 0)?;
    let trials: Vec<u64> = (0..cfg.trials as u64).collect();
    let rows: Vec<std::result::Result<String, String>> = parallel::map_collect(&trials, |&trial| {
        let run = || -> Result<String> {
            let mut env = make_env(cfg)?;
            let mut source = build_source(cfg, out_dir, seed, trial)?;
            let mut rng = derive_rng(seed, "evaluate", trial);
            let rec = evaluate(
                env.as_mut(),
                &mut source,
                cfg.eval_steps,
                cfg.eta,
                cfg.beta,
                cfg.kappa,
                &mut rng,
            )
            .map_err(PipelineError::Core)?;
            let per_test: Vec<String> = rec.per_test_rmse.iter().map(|x| format!("{x:.6}")).collect();
            Ok(format!(
                "{trial},{seed},{},{},{},{:.6},{:.6},{},{},{:016x}",
                cfg.feature_source,
                cfg.episodes,
                rec.steps,
                rec.avg_reward,
                rec.rmse,
                per_test.join(";"),
                rec.fallbacks,
                cfg.hash()
            ))
        };
        run().map_err(|e| e.to_string())
    });
    let mut text = stamp(cfg.hash());
    text.push_str(EVAL_HEADER);
    text.push('\n');
    for row in rows {
        match row {
            Ok(r) => {
                text.push_str(&r);
                text.push('\n');
            }
            Err(e) => return Err(PipelineError::Prereq(e)),
        }
    }
    let path = out_dir.join("eval.csv");
    write_atomic(&path, &text)?;
    Ok(path)
}

pub fn sdm_check(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    let machine = match cfg.sdm_target.as_str() {
        "tcm-machine" => tcm_profile_machine(),
        "bb-machine" => crate::sdm::bb_profile_machine(),
        other => {
            return Err(PipelineError::Config(format!(
                "unknown sdm_target {other} (tcm-machine|bb-machine)"
            )))
        }
    };
    let block = crate::sdm::build_sdm(&machine, 4, 3, crate::sdm::DEFAULT_SDM_CAP)
        .map_err(PipelineError::Core)?;
    let rank = numeric_rank(&block, DEFAULT_RANK_TOL).map_err(PipelineError::Core)?;
    let bound = check_deterministic_bound(&machine, 4, 3).map_err(PipelineError::Core)?;
    let mut text = stamp(cfg.hash());
    let _ = writeln!(text, "target {}", cfg.sdm_target);
    let _ = writeln!(text, "rank {}", rank.numeric_rank);
    let svs: Vec<String> = rank.singular_values.iter().map(|x| format!("{x:.6e}")).collect();
    let _ = writeln!(text, "singular_values {}", svs.join(" "));
    let _ = writeln!(
        text,
        "bound {:.6} vacuous {} pass {}",
        bound.bound, bound.vacuous, bound.pass
    );
    let path = out_dir.join("sdm.txt");
    write_atomic(&path, &text)?;
    Ok(path)
}

/// Merges evaluation CSVs into one long-format table keyed by
/// (method, training size, seed, metric).
pub fn emit_plotdata(inputs: &[PathBuf], out: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(PipelineError::Config("no input CSVs given".into()));
    }
    let mut rows: Vec<(String, usize, String, String, f64)> = Vec::new();
    for path in inputs {
        let text = std::fs::read_to_string(path).map_err(|_| {
            PipelineError::Prereq(format!("{} not found", path.display()))
        })?;
        let mut saw_header = false;
        for line in text.lines() {
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            if !saw_header {
                if line != EVAL_HEADER {
                    return Err(PipelineError::Config(format!(
                        "{}: unexpected column schema",
                        path.display()
                    )));
                }
                saw_header = true;
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 10 {
                return Err(PipelineError::Config(format!(
                    "{}: expected 10 columns, got {}",
                    path.display(),
                    cols.len()
                )));
            }
            let method = cols[2].to_string();
            let episodes: usize = cols[3]
                .parse()
                .map_err(|_| PipelineError::Config("bad episodes column".into()))?;
            let seed = format!("{}:{}", cols[1], cols[0]);
            for (metric, idx) in [("avgReward", 5usize), ("rmse", 6)] {
                let v: f64 = cols[idx]
                    .parse()
                    .map_err(|_| PipelineError::Config(format!("bad {metric} column")))?;
                rows.push((method.clone(), episodes, seed.clone(), metric.to_string(), v));
            }
        }
    }
    rows.sort_by(|a, b| {
        (&a.0, a.1, &a.2, &a.3)
            .partial_cmp(&(&b.0, b.1, &b.2, &b.3))
            .unwrap()
    });
    let mut text = String::from("method,trainingSize,seed,metric,value\n");
    for (m, e, s, k, v) in rows {
        let _ = writeln!(text, "{m},{e},{s},{k},{v}");
    }
    write_atomic(out, &text)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    EstimateProfiles,
    Translate,
    TrainPp,
    TrainFlat,
    Evaluate,
    SdmCheck,
    All,
}

pub fn run_stage(
    stage: Stage,
    cfg: &ExperimentConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<RunManifest> {
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = RunManifest::new(cfg.hash());
    let stages: Vec<Stage> = match stage {
        Stage::All => {
            let mut v = vec![
                Stage::GenData,
                Stage::EstimateProfiles,
                Stage::Translate,
                Stage::TrainPp,
            ];
            if cfg.feature_source == "flat" {
                v.push(Stage::TrainFlat);
            }
            v.push(Stage::Evaluate);
            v
        }
        s => vec![s],
    };
    for s in stages {
        let start = Instant::now();
        let (name, artifact) = match s {
            Stage::GenData => ("gen-data", gen_data(cfg, out_dir, seed)?),
            Stage::EstimateProfiles => ("estimate-profiles", estimate_profiles(cfg, out_dir)?),
            Stage::Translate => ("translate", translate_stage(cfg, out_dir)?),
            Stage::TrainPp => ("train-pp", train_pp(cfg, out_dir, seed)?),
            Stage::TrainFlat => ("train-flat", train_flat(cfg, out_dir, seed)?),
            Stage::Evaluate => ("evaluate", evaluate_stage(cfg, out_dir, seed)?),
            Stage::SdmCheck => ("sdm-check", sdm_check(cfg, out_dir)?),
            Stage::All => unreachable!(),
        };
        manifest.stages.push(StageRecord {
            stage: name.to_string(),
            artifact,
            millis: start.elapsed().as_millis(),
        });
    }
    manifest.write(out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_canonical_form() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::parse("no_such_key = 3"),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::parse("alpha = 2.0").is_err());
        assert!(ExperimentConfig::parse("translation = maybe").is_err());
        assert!(ExperimentConfig::parse("episodes = minus-one").is_err());
    }

    #[test]
    fn hash_is_sensitive_to_values() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::parse("alpha = 0.001").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn derived_rngs_are_stream_separated() {
        let mut a = derive_rng(7, "gen-data", 0);
        let mut b = derive_rng(7, "gen-data", 1);
        let mut c = derive_rng(7, "evaluate", 0);
        let (x, y, z): (u64, u64, u64) = (a.gen(), b.gen(), c.gen());
        assert_ne!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn missing_prerequisite_is_a_prereq_error() {
        let dir = std::env::temp_dir().join(format!("pp-lab-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = ExperimentConfig::default();
        let err = estimate_profiles(&cfg, &dir).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn small_tcm_pipeline_runs_end_to_end_and_is_deterministic() {
        let base = std::env::temp_dir().join(format!("pp-lab-e2e-{}", std::process::id()));
        let cfg = ExperimentConfig::parse(
            "episodes = 10000\nepisode_len = 10\neval_steps = 2000\ntrials = 2\n",
        )
        .unwrap();
        let mut outputs = Vec::new();
        for run in 0..2 {
            let dir = base.join(run.to_string());
            std::fs::create_dir_all(&dir).unwrap();
            let manifest = run_stage(Stage::All, &cfg, &dir, 42).unwrap();
            assert_eq!(manifest.stages.last().unwrap().stage, "evaluate");
            outputs.push(std::fs::read_to_string(dir.join("eval.csv")).unwrap());
        }
        assert_eq!(outputs[0], outputs[1], "identical config+seed must match");
        // The discovered set for Three Card Monte has exactly 3 profiles.
        let profiles = std::fs::read_to_string(base.join("0").join("profiles.txt")).unwrap();
        let rows = profiles.lines().filter(|l| !l.starts_with('#')).count();
        assert_eq!(rows, 3);
        let _ = std::fs::remove_dir_all(&base);
    }

    #[test]
    fn sdm_check_reports_rank_three_for_the_tcm_machine() {
        let dir = std::env::temp_dir().join(format!("pp-lab-sdm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = ExperimentConfig::default();
        let path = sdm_check(&cfg, &dir).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.contains("rank 3"), "{text}");
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn plotdata_merges_eval_csvs() {
        let dir = std::env::temp_dir().join(format!("pp-lab-plot-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let body = format!(
            "# config {:016x}\n{}\n0,42,pp,1000,500,0.100000,0.010000,0.010000,0,{:016x}\n",
            1u64, EVAL_HEADER, 1u64
        );
        let a = dir.join("a.csv");
        std::fs::write(&a, &body).unwrap();
        let out = dir.join("plot.csv");
        emit_plotdata(&[a], &out).unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.lines().count() == 3);
        assert!(text.contains("pp,1000,42:0,avgReward,0.1"));
        assert!(emit_plotdata(&[], &out).is_err());
        let _ = std::fs::remove_dir_all(&dir);
    }
}
