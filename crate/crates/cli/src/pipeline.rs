//! The collect → learn → plan → eval pipeline on in-memory data.
//!
//! Every random draw comes from a ChaCha stream keyed by a stage seed and a
//! per-item counter, so results do not depend on evaluation order.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tpsr_core::envs::arena::{arena_rollout, is_goal_image, random_pose, NUM_ACTIONS};
use tpsr_core::envs::astar::AstarOracle;
use tpsr_core::envs::{pomdp_rollout, ArenaConfig, Policy, Pomdp, Pose, Trajectory, VisionArena};
use tpsr_core::features::{concat_window, discrete_index, Bandwidth, KernelFit, KernelSet, ObservationFeatures, WindowFeatures};
use tpsr_core::io::EpisodeRow;
use tpsr_core::learn::{embed_history, learn_tpsr, training_samples};
use tpsr_core::planner::{
    action_values, argmax, learn_reward, perseus, AntiStall, ObsSupport, PerseusSubset, StageReport, SupportOperators,
};
use tpsr_core::{BeliefState, Error, FeatureMap, PlannerConfig, Result, RewardModel, TpsrModel, ValueFunction};

use crate::config::{EnvKind, ExperimentConfig, FeatureMode};

/// A ChaCha stream for item `index` of a stage.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone)]
pub enum Environment {
    Arena(ArenaConfig),
    Pomdp(Pomdp),
}

impl Environment {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        match cfg.env.kind {
            EnvKind::Arena => Ok(Environment::Arena(cfg.env.arena())),
            EnvKind::Pomdp => {
                let path = cfg
                    .env
                    .spec
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("env.spec is required for pomdp".into()))?;
                let text = std::fs::read_to_string(path)?;
                Ok(Environment::Pomdp(tpsr_core::envs::parse_pomdp_spec(&text)?))
            }
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Environment::Arena(_) => "arena",
            Environment::Pomdp(_) => "pomdp",
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Environment::Arena(a) => a.obs_dim(),
            Environment::Pomdp(p) => p.num_obs,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            Environment::Arena(_) => NUM_ACTIONS,
            Environment::Pomdp(p) => p.num_actions,
        }
    }
}

/// Exploration data with per-step rewards aligned to the records.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<Vec<f64>>,
}

/// Uniform-random exploration from independent resets.
pub fn collect(cfg: &ExperimentConfig, env: &Environment) -> Result<Dataset> {
    let n = cfg.collect.num_trajectories;
    let len = cfg.collect.trajectory_len;
    let seed = cfg.seeds.collect;
    let mut trajectories = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream_rng(seed, i as u64);
        match env {
            Environment::Arena(a) => {
                let r = arena_rollout(a, len, seed, &mut rng)?;
                let rw = r
                    .trajectory
                    .records
                    .iter()
                    .zip(&r.collisions)
                    .map(|((_, img), &c)| cfg.reward.reward(is_goal_image(a, img), c))
                    .collect();
                trajectories.push(r.trajectory);
                rewards.push(rw);
            }
            Environment::Pomdp(p) => {
                let (t, rw) = pomdp_rollout(p, &Policy::Uniform, len, seed, &mut rng)?;
                trajectories.push(t);
                rewards.push(rw);
            }
        }
    }
    Ok(Dataset { trajectories, rewards })
}

/// Output of [`learn`].
#[derive(Debug, Clone)]
pub struct LearnOutput {
    pub model: TpsrModel,
    pub feature_map: FeatureMap,
    pub spectrum: Vec<f64>,
    pub rank_deficient: bool,
    /// `Uᵀ P_T,H`, mapping indicative features to unnormalized states.
    pub embedding: DMatrix<f64>,
}

/// Splits off the kernel-center trajectories (a prefix) from the estimation set.
pub fn split_trajectories<'a>(cfg: &ExperimentConfig, trajs: &'a [Trajectory]) -> (&'a [Trajectory], &'a [Trajectory]) {
    if cfg.features.mode == FeatureMode::Indicator {
        return (&[], trajs);
    }
    let k = cfg.collect.center_count().min(trajs.len());
    trajs.split_at(k)
}

pub fn fit_feature_map(
    cfg: &ExperimentConfig,
    centers: &[Trajectory],
    obs_dim: usize,
    num_actions: usize,
) -> Result<FeatureMap> {
    let f = &cfg.features;
    if f.mode == FeatureMode::Indicator {
        return Ok(FeatureMap::indicator(num_actions, obs_dim, f.past_len, f.future_len));
    }
    let mut rng = stream_rng(cfg.seeds.learn, 0);
    let fit = |mult: f64| KernelFit {
        bandwidth: match f.bandwidth {
            Some(h) => Bandwidth::Fixed(h * mult),
            None => Bandwidth::Median {
                scale: f.bandwidth_scale * mult,
            },
        },
        eigen_floor: f.whitening_floor,
    };
    // Histories come from the start of a trajectory, tests from its end.
    let windows = |from_end: bool, len: usize| -> Vec<DVector<f64>> {
        centers
            .iter()
            .filter(|t| t.len() >= len)
            .map(|t| {
                let obs = t.observations();
                let start = if from_end { obs.len() - len } else { 0 };
                concat_window(&obs[start..start + len])
            })
            .collect()
    };
    let hist = windows(false, f.past_len);
    let test = windows(true, f.future_len);
    let singles: Vec<DVector<f64>> = centers
        .iter()
        .flat_map(|t| t.records.iter().map(|(_, o)| o.clone()))
        .collect();
    let indicative = KernelSet::fit(&hist, &hist, f.indicative_kernels, f.past_len, fit(f.window_bandwidth_scale), &mut rng)?;
    let characteristic = KernelSet::fit(&test, &test, f.characteristic_kernels, f.future_len, fit(f.window_bandwidth_scale), &mut rng)?;
    let observation = KernelSet::fit(&singles, &singles, f.observation_kernels, 1, fit(1.0), &mut rng)?;
    Ok(FeatureMap {
        obs_dim,
        num_actions,
        indicative: WindowFeatures::Kernel(indicative),
        characteristic: WindowFeatures::Kernel(characteristic),
        observation: ObservationFeatures::Kernel(observation),
    })
}

/// Fits features on the center trajectories and learns a TPSR from the rest.
pub fn learn(cfg: &ExperimentConfig, trajs: &[Trajectory], obs_dim: usize, num_actions: usize) -> Result<LearnOutput> {
    let (centers, estimation) = split_trajectories(cfg, trajs);
    let fm = fit_feature_map(cfg, centers, obs_dim, num_actions)?;
    let lc = cfg.learn.learn_config();
    let mut samples = Vec::new();
    for t in estimation {
        samples.extend(training_samples(&fm, &t.records, lc.stride, lc.burn_in)?);
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training windows in the estimation trajectories".into()));
    }
    let learned = learn_tpsr(&samples, num_actions, fm.num_obs_kernels(), &lc)?;
    let model = learned.model.with_feature_map_ref(fm.reference());
    Ok(LearnOutput {
        model,
        feature_map: fm,
        spectrum: learned.spectrum,
        rank_deficient: learned.rank_deficient,
        embedding: learned.embedding,
    })
}

/// One embedded training history with the action and reward that followed it.
#[derive(Debug, Clone)]
pub struct EmbeddedHistory {
    pub state: BeliefState,
    pub action: usize,
    pub reward: f64,
    /// Mean RGB of the last history observation (zeros for non-image data).
    pub tag: [f64; 3],
}

/// Embeds every estimation window's history; windows whose normalizer
/// vanishes are skipped.
pub fn embed_histories(
    cfg: &ExperimentConfig,
    data: &Dataset,
    fm: &FeatureMap,
    model: &TpsrModel,
    embedding: &DMatrix<f64>,
) -> Result<Vec<EmbeddedHistory>> {
    let (centers, _) = split_trajectories(cfg, &data.trajectories);
    let lc = cfg.learn.learn_config();
    let past = fm.past_len();
    let mut out = Vec::new();
    for (t, rewards) in data.trajectories.iter().zip(&data.rewards).skip(centers.len()) {
        let samples = training_samples(fm, &t.records, lc.stride, lc.burn_in)?;
        for (k, s) in samples.iter().enumerate() {
            let pivot = lc.burn_in + k * lc.stride + past;
            let Some(state) = embed_history(embedding, model.b_inf(), &s.indicative_features) else {
                continue;
            };
            let last = &t.records[pivot - 1].1;
            out.push(EmbeddedHistory {
                state: BeliefState::new(state),
                action: s.middle_action,
                reward: rewards[pivot],
                tag: mean_rgb(last),
            });
        }
    }
    Ok(out)
}

fn mean_rgb(obs: &DVector<f64>) -> [f64; 3] {
    if obs.len() % 3 != 0 || obs.is_empty() {
        return [0.0; 3];
    }
    let px = obs.len() / 3;
    let mut c = [0.0; 3];
    for p in 0..px {
        for (k, ck) in c.iter_mut().enumerate() {
            *ck += obs[3 * p + k];
        }
    }
    c.map(|x| x / px as f64)
}

#[derive(Debug, Clone)]
pub struct PlanOutput {
    pub value_function: ValueFunction,
    pub reward_model: RewardModel,
    pub stages: Vec<StageReport>,
}

/// Reward regression on embedded histories, then Perseus over them.
pub fn plan(cfg: &ExperimentConfig, model: &TpsrModel, histories: &[EmbeddedHistory]) -> Result<PlanOutput> {
    let states: Vec<BeliefState> = histories.iter().map(|h| h.state.clone()).collect();
    let actions: Vec<usize> = histories.iter().map(|h| h.action).collect();
    let rewards: Vec<f64> = histories.iter().map(|h| h.reward).collect();
    let vectors: Vec<DVector<f64>> = states.iter().map(|b| b.vector.clone()).collect();
    let rm = learn_reward(&vectors, &actions, &rewards, model.num_actions())?;
    let p = &cfg.planner;
    let pc = PlannerConfig {
        gamma: p.gamma,
        horizon: p.horizon,
        belief_points: states,
        perseus_subset: if p.perseus_subset == 0 {
            PerseusSubset::All
        } else {
            PerseusSubset::Count(p.perseus_subset)
        },
        improvement_tol: p.improvement_tol,
        seed: cfg.seeds.plan,
    };
    let init = ValueFunction::lower_bound(model, &rm, &pc.belief_points, p.gamma);
    let (vf, stages) = perseus(init, &pc, model, &rm, &ObsSupport::Kernels)?;
    Ok(PlanOutput {
        value_function: vf,
        reward_model: rm,
        stages,
    })
}

/// Aggregate evaluation results: the policy, a random baseline from the
/// same starts, and the A* optimum for the policy's successful starts.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub successes: usize,
    pub mean_steps: Option<f64>,
    pub random_successes: usize,
    pub random_mean_steps: Option<f64>,
    pub astar_mean_steps: Option<f64>,
    /// Successful starts for which A* gave up or found no path.
    pub astar_failures: usize,
    pub degenerate_resets: usize,
}

impl EvalSummary {
    pub fn to_text(&self) -> String {
        let f = |x: Option<f64>| x.map_or_else(|| "nan".to_string(), |v| format!("{v}"));
        format!(
            "episodes {}\nsuccesses {}\nmean_steps {}\nrandom_successes {}\nrandom_mean_steps {}\nastar_mean_steps {}\nastar_failures {}\ndegenerate_resets {}\n",
            self.episodes,
            self.successes,
            f(self.mean_steps),
            self.random_successes,
            f(self.random_mean_steps),
            f(self.astar_mean_steps),
            self.astar_failures,
            self.degenerate_resets,
        )
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub rows: Vec<EpisodeRow>,
    pub random_rows: Vec<EpisodeRow>,
    pub summary: EvalSummary,
}

/// Everything the greedy executor needs.
pub struct Agent<'a> {
    pub model: &'a TpsrModel,
    pub feature_map: &'a FeatureMap,
    pub value_function: &'a ValueFunction,
    pub reward_model: &'a RewardModel,
    pub gamma: f64,
}

struct EpisodeResult {
    row: EpisodeRow,
    degenerate_resets: usize,
}

/// `b1` filtered through `pairs`, or `b1` itself if that degenerates.
fn recovery_state(model: &TpsrModel, pairs: &[(usize, DVector<f64>)]) -> BeliefState {
    let mut b = model.normalized_initial_state();
    for (a, w) in pairs {
        match model.filter_update(&b, *a, w) {
            Ok(next) => b = next,
            Err(_) => return model.normalized_initial_state(),
        }
    }
    b
}

const RECOVERY_PAIRS: usize = 3;

fn run_agent<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    agent: &Agent,
    ops: &SupportOperators,
    arena: &ArenaConfig,
    start: Pose,
    prefix: &[(usize, DVector<f64>)],
    episode: usize,
    rng: &mut R,
) -> Result<(EpisodeResult, Pose)> {
    let model = agent.model;
    let mut env = VisionArena::new(arena.clone(), start)?;
    let mut resets = 0;
    let mut recent: Vec<(usize, DVector<f64>)> = Vec::new();
    let mut b = model.normalized_initial_state();
    // The prefix was executed before `start`; only its images are replayed.
    for (a, img) in prefix {
        let w = agent.feature_map.observation.eval(img)?;
        b = match model.filter_update(&b, *a, &w) {
            Ok(next) => next,
            Err(Error::DegenerateUpdate { .. }) => {
                resets += 1;
                recovery_state(model, &recent)
            }
            Err(e) => return Err(e),
        };
        recent.push((*a, w));
    }
    let mut stall = AntiStall::new();
    let mut discounted = 0.0;
    let mut steps = 0;
    let mut success = false;
    for t in 0..cfg.eval.max_steps {
        let q = action_values(model, &b, agent.value_function, agent.reward_model, agent.gamma, ops)?;
        let greedy = if q.iter().all(|v| *v == f64::NEG_INFINITY) {
            let r: Vec<f64> = (0..model.num_actions()).map(|a| agent.reward_model.reward(a, &b.vector)).collect();
            argmax(&r)
        } else {
            argmax(&q)
        };
        let a = if cfg.planner.anti_stall { stall.choose(&q, greedy, rng) } else { greedy };
        let (img, collided) = env.step(a, rng)?;
        steps = t + 1;
        let goal = is_goal_image(arena, &img);
        discounted += agent.gamma.powi(t as i32) * cfg.reward.reward(goal, collided);
        if goal {
            success = true;
            break;
        }
        let w = agent.feature_map.observation.eval(&img)?;
        stall.record(a, discrete_index(&w));
        recent.push((a, w.clone()));
        if recent.len() > RECOVERY_PAIRS {
            recent.remove(0);
        }
        b = match model.filter_update(&b, a, &w) {
            Ok(next) => next,
            Err(Error::DegenerateUpdate { .. }) => {
                resets += 1;
                recovery_state(model, &recent)
            }
            Err(e) => return Err(e),
        };
    }
    let row = EpisodeRow {
        episode,
        steps,
        success,
        discounted_return: discounted,
    };
    Ok((
        EpisodeResult {
            row,
            degenerate_resets: resets,
        },
        env.pose,
    ))
}

fn run_random<R: Rng + ?Sized>(cfg: &ExperimentConfig, arena: &ArenaConfig, start: Pose, episode: usize, rng: &mut R) -> Result<EpisodeRow> {
    let mut env = VisionArena::new(arena.clone(), start)?;
    let mut discounted = 0.0;
    let mut steps = 0;
    let mut success = false;
    for t in 0..cfg.eval.max_steps {
        let a = rng.random_range(0..NUM_ACTIONS);
        let (img, collided) = env.step(a, rng)?;
        steps = t + 1;
        let goal = is_goal_image(arena, &img);
        discounted += cfg.planner.gamma.powi(t as i32) * cfg.reward.reward(goal, collided);
        if goal {
            success = true;
            break;
        }
    }
    Ok(EpisodeRow {
        episode,
        steps,
        success,
        discounted_return: discounted,
    })
}

/// A random start followed by `warmup_steps` random actions; returns the
/// pose reached and the executed pairs.
fn warmup<R: Rng + ?Sized>(cfg: &ExperimentConfig, arena: &ArenaConfig, rng: &mut R) -> Result<(Pose, Vec<(usize, DVector<f64>)>)> {
    let start = random_pose(arena, rng);
    let mut env = VisionArena::new(arena.clone(), start)?;
    let mut pairs = Vec::with_capacity(cfg.eval.warmup_steps);
    for _ in 0..cfg.eval.warmup_steps {
        let a = rng.random_range(0..NUM_ACTIONS);
        let (img, _) = env.step(a, rng)?;
        pairs.push((a, img));
    }
    Ok((env.pose, pairs))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Greedy execution in the arena with the random and A* baselines.
pub fn evaluate(cfg: &ExperimentConfig, env: &Environment, agent: &Agent) -> Result<EvalOutput> {
    let Environment::Arena(arena) = env else {
        return Err(Error::InvalidArgument("evaluation needs the arena environment".into()));
    };
    if agent.model.feature_map_ref() != agent.feature_map.reference() {
        return Err(Error::FeatureMapMismatch("model and feature map disagree".into()));
    }
    let ops = SupportOperators::new(agent.model, &ObsSupport::Kernels)?;
    let oracle = cfg.eval.astar.then(|| AstarOracle::new(arena));
    let mut rows = Vec::new();
    let mut random_rows = Vec::new();
    let mut astar = Vec::new();
    let mut astar_failures = 0;
    let mut resets = 0;
    let seed = cfg.seeds.eval;
    for e in 0..cfg.eval.episodes {
        let mut rng = stream_rng(seed, 3 * e as u64);
        let (start, pairs) = warmup(cfg, arena, &mut rng)?;
        let mut rng = stream_rng(seed, 3 * e as u64 + 1);
        let (res, _) = run_agent(cfg, agent, &ops, arena, start, &pairs, e, &mut rng)?;
        let mut rng = stream_rng(seed, 3 * e as u64 + 2);
        random_rows.push(run_random(cfg, arena, start, e, &mut rng)?);
        if res.row.success {
            if let Some(o) = &oracle {
                match o.optimal_steps(start) {
                    Ok(s) => astar.push(s as f64),
                    Err(Error::Unreachable) => astar_failures += 1,
                    Err(err) => return Err(err),
                }
            }
        }
        resets += res.degenerate_resets;
        rows.push(res.row);
    }
    let summary = EvalSummary {
        episodes: rows.len(),
        successes: rows.iter().filter(|r| r.success).count(),
        mean_steps: mean(rows.iter().filter(|r| r.success).map(|r| r.steps as f64)),
        random_successes: random_rows.iter().filter(|r| r.success).count(),
        random_mean_steps: mean(random_rows.iter().filter(|r| r.success).map(|r| r.steps as f64)),
        astar_mean_steps: mean(astar.into_iter()),
        astar_failures,
        degenerate_resets: resets,
    };
    Ok(EvalOutput {
        rows,
        random_rows,
        summary,
    })
}
