//! Subcommand bodies. Each one reads its inputs from disk, writes its
//! artifacts under an output directory and logs progress to stderr.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use tpsr_core::envs::trajectory::{read_trajectories, write_trajectories};
use tpsr_core::io::{
    load_model, load_value_function, save_model, save_value_function, write_embedding_csv, write_episode_csv,
    write_spectrum_csv, ModelSidecar, ValueSidecar,
};
use tpsr_core::{Error, FeatureMap, Result, TpsrModel};

use crate::config::ExperimentConfig;
use crate::pipeline::{self, Agent, Dataset, Environment, EvalSummary, LearnOutput};

pub const TRAJECTORIES: &str = "trajectories.txt";
pub const MODEL: &str = "model.tpsr";
pub const SPECTRUM: &str = "spectrum.csv";
pub const EMBEDDING: &str = "embedding.csv";
pub const VALUE: &str = "value.vf";
pub const EPISODES: &str = "episodes.csv";
pub const RANDOM_EPISODES: &str = "random_episodes.csv";
pub const SUMMARY: &str = "summary.txt";

/// Per-step rewards stored next to a trajectory file: `<path>.rewards`,
/// one line per trajectory.
pub fn rewards_path(trajectories: &Path) -> PathBuf {
    let mut s = trajectories.as_os_str().to_owned();
    s.push(".rewards");
    PathBuf::from(s)
}

pub fn write_dataset(path: &Path, data: &Dataset, obs_dim: usize, num_actions: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trajectories(&mut w, &data.trajectories, obs_dim, num_actions)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(rewards_path(path))?);
    for r in &data.rewards {
        let line: Vec<String> = r.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads trajectories and, when `need_rewards`, their reward companion.
/// Without it missing rewards read as zeros.
pub fn read_dataset(path: &Path, env: &Environment, need_rewards: bool) -> Result<Dataset> {
    let (hdr, trajectories) = read_trajectories(BufReader::new(File::open(path)?), env.id())?;
    if hdr.obs_dim != env.obs_dim() || hdr.num_actions != env.num_actions() {
        return Err(Error::InvalidArgument(format!(
            "{} holds {}-dim observations and {} actions; the environment has {} and {}",
            path.display(),
            hdr.obs_dim,
            hdr.num_actions,
            env.obs_dim(),
            env.num_actions()
        )));
    }
    let rpath = rewards_path(path);
    let rewards = if rpath.exists() || need_rewards {
        parse_rewards(&fs::read_to_string(&rpath)?, &trajectories)
            .map_err(|e| Error::Format(format!("{}: {e}", rpath.display())))?
    } else {
        trajectories.iter().map(|t| vec![0.0; t.len()]).collect()
    };
    Ok(Dataset { trajectories, rewards })
}

fn parse_rewards(text: &str, trajs: &[tpsr_core::envs::Trajectory]) -> std::result::Result<Vec<Vec<f64>>, String> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| format!("line {}: bad number {t:?}", i + 1)))
                .collect()
        })
        .collect::<std::result::Result<_, _>>()?;
    if rows.len() != trajs.len() {
        return Err(format!("{} reward rows for {} trajectories", rows.len(), trajs.len()));
    }
    for (i, (r, t)) in rows.iter().zip(trajs).enumerate() {
        if r.len() != t.len() {
            return Err(format!("line {}: {} rewards for {} steps", i + 1, r.len(), t.len()));
        }
    }
    Ok(rows)
}

pub struct CollectReport {
    pub trajectories: usize,
    pub steps: usize,
    pub goal_steps: usize,
    pub path: PathBuf,
}

pub fn collect(cfg: &ExperimentConfig, out: &Path) -> Result<CollectReport> {
    let env = Environment::from_config(cfg)?;
    fs::create_dir_all(out)?;
    let data = pipeline::collect(cfg, &env)?;
    let path = out.join(TRAJECTORIES);
    write_dataset(&path, &data, env.obs_dim(), env.num_actions())?;
    let steps = data.rewards.iter().map(Vec::len).sum();
    let goal_steps = data
        .rewards
        .iter()
        .flatten()
        .filter(|&&r| r == cfg.reward.goal_reward)
        .count();
    eprintln!(
        "collect: {} trajectories, {steps} steps, {goal_steps} goal steps -> {}",
        data.trajectories.len(),
        path.display()
    );
    Ok(CollectReport {
        trajectories: data.trajectories.len(),
        steps,
        goal_steps,
        path,
    })
}

pub fn learn(cfg: &ExperimentConfig, trajectories: &Path, out: &Path) -> Result<LearnOutput> {
    let env = Environment::from_config(cfg)?;
    let data = read_dataset(trajectories, &env, false)?;
    fs::create_dir_all(out)?;
    let l = pipeline::learn(cfg, &data.trajectories, env.obs_dim(), env.num_actions())?;
    if l.rank_deficient {
        eprintln!("learn: warning: spectrum falls below 1e-10 of its top value within the kept rank");
    }
    let mut sidecar = ModelSidecar::new(l.model.feature_map_ref())
        .with_feature_map(&l.feature_map)
        .with_embedding(&l.embedding);
    sidecar
        .provenance
        .insert("tool".into(), format!("tpsr {}", env!("CARGO_PKG_VERSION")));
    sidecar.provenance.insert("seed.learn".into(), cfg.seeds.learn.to_string());
    sidecar
        .provenance
        .insert("trajectories".into(), trajectories.display().to_string());
    let model_path = out.join(MODEL);
    save_model(&model_path, &l.model, &sidecar)?;
    write_spectrum_csv(BufWriter::new(File::create(out.join(SPECTRUM))?), &l.spectrum)?;
    let hist = pipeline::embed_histories(cfg, &data, &l.feature_map, &l.model, &l.embedding)?;
    let states: Vec<DVector<f64>> = hist.iter().map(|h| h.state.vector.clone()).collect();
    let tags: Vec<[f64; 3]> = hist.iter().map(|h| h.tag).collect();
    write_embedding_csv(BufWriter::new(File::create(out.join(EMBEDDING))?), &states, &tags)?;
    let top: Vec<String> = l.spectrum.iter().take(8).map(|s| format!("{s:.3e}")).collect();
    eprintln!(
        "learn: rank {} model -> {} (leading singular values {})",
        l.model.rank(),
        model_path.display(),
        top.join(" ")
    );
    Ok(l)
}

/// A model with the feature map and history embedding from its sidecar.
pub struct LoadedModel {
    pub model: TpsrModel,
    pub feature_map: FeatureMap,
    pub embedding: DMatrix<f64>,
}

pub fn load_model_bundle(path: &Path) -> Result<LoadedModel> {
    let (model, sidecar) = load_model(path)?;
    let missing = |what: &str| Error::Format(format!("{}: sidecar has no {what}", path.display()));
    let feature_map = sidecar.feature_map()?.ok_or_else(|| missing("feature map"))?;
    let embedding = sidecar.embedding()?.ok_or_else(|| missing("embedding"))?;
    Ok(LoadedModel {
        model,
        feature_map,
        embedding,
    })
}

pub fn plan(cfg: &ExperimentConfig, model_path: &Path, trajectories: &Path, out: &Path) -> Result<pipeline::PlanOutput> {
    let env = Environment::from_config(cfg)?;
    let m = load_model_bundle(model_path)?;
    if m.feature_map.obs_dim != env.obs_dim() || m.feature_map.num_actions != env.num_actions() {
        return Err(Error::FeatureMapMismatch(format!(
            "{} was trained on {}-dim observations and {} actions",
            model_path.display(),
            m.feature_map.obs_dim,
            m.feature_map.num_actions
        )));
    }
    let data = read_dataset(trajectories, &env, true)?;
    fs::create_dir_all(out)?;
    let hist = pipeline::embed_histories(cfg, &data, &m.feature_map, &m.model, &m.embedding)?;
    let p = pipeline::plan(cfg, &m.model, &hist)?;
    let mut sidecar = ValueSidecar::new(m.model.feature_map_ref(), cfg.planner.gamma, &p.reward_model);
    sidecar.provenance.insert("seed.plan".into(), cfg.seeds.plan.to_string());
    sidecar.provenance.insert("belief_points".into(), hist.len().to_string());
    sidecar.provenance.insert("stages".into(), p.stages.len().to_string());
    let path = out.join(VALUE);
    save_value_function(&path, &p.value_function, &sidecar)?;
    let last = p.stages.last().map_or(0.0, |s| s.max_change);
    eprintln!(
        "plan: {} belief points, {} stages (last change {last:.3e}), {} alpha vectors -> {}",
        hist.len(),
        p.stages.len(),
        p.value_function.len(),
        path.display()
    );
    Ok(p)
}

pub fn eval(cfg: &ExperimentConfig, model_path: &Path, value_path: &Path, out: &Path) -> Result<EvalSummary> {
    let env = Environment::from_config(cfg)?;
    let m = load_model_bundle(model_path)?;
    let (vf, sidecar) = load_value_function(value_path)?;
    if sidecar.feature_map_ref != m.model.feature_map_ref() {
        return Err(Error::FeatureMapMismatch(format!(
            "{} was planned for a different model",
            value_path.display()
        )));
    }
    let rm = sidecar.reward_model()?;
    let agent = Agent {
        model: &m.model,
        feature_map: &m.feature_map,
        value_function: &vf,
        reward_model: &rm,
        gamma: sidecar.gamma,
    };
    let e = pipeline::evaluate(cfg, &env, &agent)?;
    fs::create_dir_all(out)?;
    write_episode_csv(BufWriter::new(File::create(out.join(EPISODES))?), &e.rows)?;
    write_episode_csv(BufWriter::new(File::create(out.join(RANDOM_EPISODES))?), &e.random_rows)?;
    fs::write(out.join(SUMMARY), e.summary.to_text())?;
    eprint!("eval:\n{}", e.summary.to_text());
    Ok(e.summary)
}

/// Parses `a:o a:o ...` (commas also separate pairs).
pub fn parse_discrete_sequence(text: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut acts = Vec::new();
    let mut obs = Vec::new();
    for tok in text.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
        let (a, o) = tok
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("expected action:observation, got {tok:?}")))?;
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad index {s:?} in {tok:?}")))
        };
        acts.push(num(a)?);
        obs.push(num(o)?);
    }
    Ok((acts, obs))
}

/// Probability of a discrete action-observation sequence from the model's
/// start state.
pub fn predict_discrete(model_path: &Path, sequence: &str) -> Result<f64> {
    let (model, _) = load_model(model_path)?;
    let (acts, obs) = parse_discrete_sequence(sequence)?;
    model.sequence_probability_discrete(&acts, &obs)
}

/// Probability of every trajectory in a file, observations mapped through
/// the model's observation kernels.
pub fn predict_trajectories(model_path: &Path, trajectories: &Path) -> Result<Vec<f64>> {
    let m = load_model_bundle(model_path)?;
    let (hdr, trajs) = read_trajectories(BufReader::new(File::open(trajectories)?), "predict")?;
    if hdr.obs_dim != m.feature_map.obs_dim {
        return Err(Error::FeatureMapMismatch(format!(
            "{} holds {}-dim observations, the model expects {}",
            trajectories.display(),
            hdr.obs_dim,
            m.feature_map.obs_dim
        )));
    }
    trajs
        .iter()
        .map(|t| {
            let weights = t
                .records
                .iter()
                .map(|(_, o)| m.feature_map.observation.eval(o))
                .collect::<Result<Vec<_>>>()?;
            m.model.sequence_probability(&t.actions(), &weights)
        })
        .collect()
}
