//! Discrete POMDPs with exact oracles: the forward algorithm, the belief-basis
//! PSR, and analytic moment matrices for indicator features.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::trajectory::{Trajectory, TrajectoryMeta};
use crate::features::indicator_index;
use crate::learn::{estimate_parameters, history_embedding, truncated_svd, EmpiricalEstimates, LearnConfig, LearnedModel, ProjectedOperators};
use crate::model::{one_hot, TpsrModel};
use crate::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// A finite POMDP. The observation after taking action `a` is drawn from
/// `emission[a]` at the post-transition state.
#[derive(Debug, Clone, PartialEq)]
pub struct Pomdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub num_obs: usize,
    /// `transition[a][(s, s')]`, row-stochastic.
    pub transition: Vec<DMatrix<f64>>,
    /// `emission[a][(s', o)]`, row-stochastic.
    pub emission: Vec<DMatrix<f64>>,
    pub initial_belief: DVector<f64>,
    /// `reward[(s, a)]` for taking `a` in `s`.
    pub reward: DMatrix<f64>,
}

/// Action selection used when sampling.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Uniform,
    /// Fixed distribution over actions.
    Stochastic(Vec<f64>),
    /// Open-loop action sequence (cycled if shorter than the trajectory).
    Sequence(Vec<usize>),
}

impl Pomdp {
    pub fn new(
        transition: Vec<DMatrix<f64>>,
        emission: Vec<DMatrix<f64>>,
        initial_belief: DVector<f64>,
        reward: DMatrix<f64>,
    ) -> Result<Self> {
        let num_actions = transition.len();
        if num_actions == 0 || emission.len() != num_actions {
            return Err(Error::dims("need one transition and one emission matrix per action"));
        }
        let num_states = initial_belief.len();
        let num_obs = emission[0].ncols();
        if num_states == 0 || num_obs == 0 {
            return Err(Error::invalid("POMDP needs states and observations"));
        }
        let row_check = |m: &DMatrix<f64>, what: &str| -> Result<()> {
            for r in 0..m.nrows() {
                let s: f64 = m.row(r).iter().sum();
                if (s - 1.0).abs() > STOCHASTIC_TOL || m.row(r).iter().any(|&x| x < 0.0 || !x.is_finite()) {
                    return Err(Error::invalid(format!("{what} row {r} is not a probability vector (sum {s})")));
                }
            }
            Ok(())
        };
        for (a, (t, o)) in transition.iter().zip(&emission).enumerate() {
            if t.shape() != (num_states, num_states) {
                return Err(Error::dims(format!("transition {a} has shape {:?}", t.shape())));
            }
            if o.shape() != (num_states, num_obs) {
                return Err(Error::dims(format!("emission {a} has shape {:?}", o.shape())));
            }
            row_check(t, "transition")?;
            row_check(o, "emission")?;
        }
        let s: f64 = initial_belief.iter().sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL || initial_belief.iter().any(|&x| x < 0.0) {
            return Err(Error::invalid("initial belief is not a probability vector"));
        }
        if reward.shape() != (num_states, num_actions) {
            return Err(Error::dims(format!("reward has shape {:?}", reward.shape())));
        }
        Ok(Self {
            num_states,
            num_actions,
            num_obs,
            transition,
            emission,
            initial_belief,
            reward,
        })
    }

    /// Random POMDP with dense rows (entries bounded away from zero).
    pub fn random<R: Rng + ?Sized>(num_states: usize, num_actions: usize, num_obs: usize, rng: &mut R) -> Self {
        let mut stochastic = |rows: usize, cols: usize| {
            let mut m = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(0.05..1.0));
            for r in 0..rows {
                let s: f64 = m.row(r).iter().sum();
                m.row_mut(r).scale_mut(1.0 / s);
                // Push the rounding residue into the largest entry so rows
                // sum to one within the validation tolerance.
                let residue = 1.0 - m.row(r).iter().sum::<f64>();
                m[(r, 0)] += residue;
            }
            m
        };
        let transition = (0..num_actions).map(|_| stochastic(num_states, num_states)).collect();
        let emission = (0..num_actions).map(|_| stochastic(num_states, num_obs)).collect();
        let b0 = stochastic(1, num_states).row(0).transpose();
        let reward = DMatrix::from_fn(num_states, num_actions, |_, _| rng.random_range(-1.0..1.0));
        Pomdp::new(transition, emission, b0, reward).expect("random POMDP is valid")
    }

    /// The classic two-door tiger problem: listen (0), open left (1), open
    /// right (2); observations hear-left (0), hear-right (1).
    pub fn tiger() -> Self {
        let listen_t = DMatrix::identity(2, 2);
        let reset_t = DMatrix::from_element(2, 2, 0.5);
        let listen_o = DMatrix::from_row_slice(2, 2, &[0.85, 0.15, 0.15, 0.85]);
        let open_o = DMatrix::from_element(2, 2, 0.5);
        let reward = DMatrix::from_row_slice(2, 3, &[-1.0, -100.0, 10.0, -1.0, 10.0, -100.0]);
        Pomdp::new(
            vec![listen_t, reset_t.clone(), reset_t],
            vec![listen_o, open_o.clone(), open_o],
            DVector::from_element(2, 0.5),
            reward,
        )
        .expect("tiger is valid")
    }

    /// Observable operator in the belief basis: `diag(O_a[:,o]) T_aᵀ`.
    pub fn belief_operator(&self, action: usize, obs: usize) -> DMatrix<f64> {
        let diag = DMatrix::from_diagonal(&self.emission[action].column(obs).into_owned());
        diag * self.transition[action].transpose()
    }

    /// Bayes update of a belief; `None` if the observation has probability 0.
    pub fn bayes_update(&self, belief: &DVector<f64>, action: usize, obs: usize) -> Option<DVector<f64>> {
        let next = self.belief_operator(action, obs) * belief;
        let z: f64 = next.iter().sum();
        (z > 0.0).then(|| next / z)
    }

    /// Belief after `steps` uniformly random actions from the initial belief,
    /// marginalizing observations.
    pub fn propagated_belief(&self, steps: usize) -> DVector<f64> {
        let mut mean_t = DMatrix::zeros(self.num_states, self.num_states);
        for t in &self.transition {
            mean_t += t;
        }
        mean_t /= self.num_actions as f64;
        let mut b = self.initial_belief.clone();
        for _ in 0..steps {
            b = mean_t.tr_mul(&b);
        }
        b
    }

    pub fn with_initial_belief(&self, belief: DVector<f64>) -> Result<Self> {
        Pomdp::new(
            self.transition.clone(),
            self.emission.clone(),
            belief,
            self.reward.clone(),
        )
    }
}

fn sample_index<R: Rng + ?Sized>(probs: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Samples an initial state, then alternates action choice, transition and
/// emission. Observations are stored as one-hot payloads.
pub fn pomdp_sample<R: Rng + ?Sized>(p: &Pomdp, policy: &Policy, length: usize, seed: u64, rng: &mut R) -> Result<Trajectory> {
    pomdp_rollout(p, policy, length, seed, rng).map(|(t, _)| t)
}

/// [`pomdp_sample`] that also returns the reward `R(s, a)` of every step,
/// with `s` the state the action was taken in.
pub fn pomdp_rollout<R: Rng + ?Sized>(
    p: &Pomdp,
    policy: &Policy,
    length: usize,
    seed: u64,
    rng: &mut R,
) -> Result<(Trajectory, Vec<f64>)> {
    if length == 0 {
        return Err(Error::invalid("trajectory length must be at least 1"));
    }
    let mut state = sample_index(p.initial_belief.iter().cloned(), rng);
    let mut records = Vec::with_capacity(length);
    let mut rewards = Vec::with_capacity(length);
    for t in 0..length {
        let action = match policy {
            Policy::Uniform => rng.random_range(0..p.num_actions),
            Policy::Stochastic(d) => sample_index(d.iter().cloned(), rng),
            Policy::Sequence(seq) => {
                if seq.is_empty() {
                    return Err(Error::invalid("empty action sequence"));
                }
                seq[t % seq.len()]
            }
        };
        if action >= p.num_actions {
            return Err(Error::invalid(format!("policy chose action {action}")));
        }
        rewards.push(p.reward[(state, action)]);
        state = sample_index(p.transition[action].row(state).iter().cloned(), rng);
        let obs = sample_index(p.emission[action].row(state).iter().cloned(), rng);
        records.push((action, one_hot(p.num_obs, obs)));
    }
    let traj = Trajectory {
        records,
        meta: TrajectoryMeta {
            env_id: "pomdp".into(),
            seed,
            reset: true,
        },
    };
    Ok((traj, rewards))
}

/// Exact `Pr[o_{1:t} ‖ a_{1:t}]` by belief propagation.
pub fn forward_probability(p: &Pomdp, actions: &[usize], observations: &[usize]) -> Result<f64> {
    if actions.len() != observations.len() {
        return Err(Error::dims("action and observation sequences differ in length"));
    }
    let mut alpha = p.initial_belief.clone();
    for (&a, &o) in actions.iter().zip(observations) {
        if a >= p.num_actions || o >= p.num_obs {
            return Err(Error::invalid(format!("pair ({a}, {o}) out of range")));
        }
        // alpha'(s') = Σ_s alpha(s) T_a(s, s') O_a(s', o)
        let moved = p.transition[a].tr_mul(&alpha);
        alpha = moved.component_mul(&p.emission[a].column(o));
    }
    Ok(alpha.iter().sum())
}

/// A PSR in the belief basis of a POMDP, with test and history matrices for
/// indicator features over (action, observation) windows of fixed length
/// under the uniform random policy.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePsr {
    pub num_actions: usize,
    pub num_obs: usize,
    /// `M_ao`, indexed by `a * num_obs + o`.
    pub m_ao: Vec<DMatrix<f64>>,
    pub m1: DVector<f64>,
    pub m_inf: DVector<f64>,
    /// Rows `r_τ` for every test window (policy probability included).
    pub r: DMatrix<f64>,
    /// Columns `s_h`: state after every history window.
    pub s: DMatrix<f64>,
    /// History probabilities `π`.
    pub pi: DVector<f64>,
}

/// Belief-basis PSR with `R` and `S` realized for windows of the given lengths.
pub fn pomdp_to_psr(p: &Pomdp, history_len: usize, test_len: usize) -> OraclePsr {
    let m_ao: Vec<DMatrix<f64>> = (0..p.num_actions)
        .flat_map(|a| (0..p.num_obs).map(move |o| (a, o)))
        .map(|(a, o)| p.belief_operator(a, o))
        .collect();
    let mut psr = OraclePsr {
        num_actions: p.num_actions,
        num_obs: p.num_obs,
        m_ao,
        m1: p.initial_belief.clone(),
        m_inf: DVector::from_element(p.num_states, 1.0),
        r: DMatrix::zeros(0, 0),
        s: DMatrix::zeros(0, 0),
        pi: DVector::zeros(0),
    };
    psr.r = psr.test_matrix(test_len);
    let joint = psr.history_joint(history_len);
    let pi = DVector::from_fn(joint.ncols(), |h, _| joint.column(h).sum());
    let mut s = joint.clone();
    for (h, &ph) in pi.iter().enumerate() {
        if ph > 0.0 {
            s.column_mut(h).scale_mut(1.0 / ph);
        }
    }
    psr.s = s;
    psr.pi = pi;
    psr
}

fn enumerate_windows(num_actions: usize, num_obs: usize, len: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let base = num_actions * num_obs;
    let count = base.pow(len as u32);
    (0..count)
        .map(|mut idx| {
            let mut acts = vec![0; len];
            let mut obs = vec![0; len];
            for k in (0..len).rev() {
                let d = idx % base;
                idx /= base;
                acts[k] = d / num_obs;
                obs[k] = d % num_obs;
            }
            (acts, obs)
        })
        .collect()
}

impl OraclePsr {
    pub fn op(&self, action: usize, obs: usize) -> &DMatrix<f64> {
        &self.m_ao[action * self.num_obs + obs]
    }

    /// `m_infᵀ M_{a_t o_t} ⋯ M_{a_1 o_1} m1`.
    pub fn sequence_probability(&self, actions: &[usize], observations: &[usize]) -> f64 {
        let mut s = self.m1.clone();
        for (&a, &o) in actions.iter().zip(observations) {
            s = self.op(a, o) * s;
        }
        self.m_inf.dot(&s)
    }

    /// Rows `(1/|A|)^L · m_infᵀ M_τ` for all tests τ of length `len`, in
    /// indicator order.
    pub fn test_matrix(&self, len: usize) -> DMatrix<f64> {
        let windows = enumerate_windows(self.num_actions, self.num_obs, len);
        let n = self.m1.len();
        let scale = (self.num_actions as f64).powi(-(len as i32));
        let mut r = DMatrix::zeros(windows.len(), n);
        for (acts, obs) in windows {
            let idx = indicator_index(&acts, &obs, self.num_actions, self.num_obs).unwrap();
            let mut row = self.m_inf.transpose();
            // Test operators apply in order a_1 first, so the row is built
            // by right-multiplying from the last pair backwards.
            for (&a, &o) in acts.iter().zip(&obs).rev() {
                row *= self.op(a, o);
            }
            r.set_row(idx, &(row * scale));
        }
        r
    }

    /// Columns `ρ_h = Pr[h] s_h` for all histories of length `len` drawn by
    /// the uniform random policy from `m1`.
    pub fn history_joint(&self, len: usize) -> DMatrix<f64> {
        let windows = enumerate_windows(self.num_actions, self.num_obs, len);
        let scale = (self.num_actions as f64).powi(-(len as i32));
        let mut out = DMatrix::zeros(self.m1.len(), windows.len());
        for (acts, obs) in windows {
            let idx = indicator_index(&acts, &obs, self.num_actions, self.num_obs).unwrap();
            let mut s = self.m1.clone();
            for (&a, &o) in acts.iter().zip(&obs) {
                s = self.op(a, o) * s;
            }
            out.set_column(idx, &(s * scale));
        }
        out
    }

    /// The oracle as a [`TpsrModel`] (identity projection, belief coordinates).
    pub fn to_model(&self) -> TpsrModel {
        let ops = (0..self.num_actions)
            .map(|a| (0..self.num_obs).map(|o| self.op(a, o).clone()).collect())
            .collect();
        let n = self.m1.len();
        TpsrModel::new(
            self.m1.clone(),
            self.m_inf.clone(),
            ops,
            DMatrix::identity(n, n),
            "oracle",
        )
        .expect("oracle model is valid")
    }
}

/// Exact moment matrices for indicator features over history windows of
/// length `past_len` and test windows of length `future_len`, under the
/// uniform random exploration policy.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticMoments {
    pub num_actions: usize,
    pub num_obs: usize,
    pub p_h: DVector<f64>,
    pub p_th: DMatrix<f64>,
    /// Raw `P_T,ao,H`, indexed by `a * num_obs + o`.
    pub p_taoh: Vec<DMatrix<f64>>,
}

pub fn analytic_moments(p: &Pomdp, past_len: usize, future_len: usize) -> AnalyticMoments {
    let psr = pomdp_to_psr(p, past_len, future_len);
    let joint = psr.history_joint(past_len);
    let p_h = psr.pi.clone();
    let p_th = &psr.r * &joint;
    let p_taoh = psr.m_ao.iter().map(|m| &psr.r * m * &joint).collect();
    AnalyticMoments {
        num_actions: p.num_actions,
        num_obs: p.num_obs,
        p_h,
        p_th,
        p_taoh,
    }
}

impl AnalyticMoments {
    /// Pass-one estimates with unit action weights.
    pub fn estimates(&self) -> EmpiricalEstimates {
        EmpiricalEstimates {
            p_h: self.p_h.clone(),
            p_th: self.p_th.clone(),
            proj_p_taoh: None,
            raw_counts: vec![1.0 / self.num_actions as f64; self.num_actions],
            total_samples: 1.0,
        }
    }

    pub fn project(&self, u: &DMatrix<f64>) -> ProjectedOperators {
        ProjectedOperators {
            num_actions: self.num_actions,
            num_obs: self.num_obs,
            sums: self.p_taoh.iter().map(|m| u.tr_mul(m)).collect(),
        }
    }

    /// Estimates with projected operator moments attached.
    pub fn projected_estimates(&self, u: &DMatrix<f64>) -> EmpiricalEstimates {
        let mut est = self.estimates();
        est.proj_p_taoh = Some(self.project(u));
        est
    }
}

/// Relative cutoff used by [`numerical_rank`] for exact moments.
pub const EXACT_RANK_TOL: f64 = 1e-9;

/// Number of singular values above `rel_tol` times the largest.
pub fn numerical_rank(spectrum: &[f64], rel_tol: f64) -> usize {
    let smax = spectrum.iter().cloned().fold(0.0, f64::max);
    spectrum.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Shortest window length whose indicator basis has at least twice as many
/// elements as the system has states.
pub fn indicator_window_len(p: &Pomdp) -> usize {
    let base = p.num_actions * p.num_obs;
    let mut len = 1;
    while base.pow(len as u32) < 2 * p.num_states && base > 1 {
        len += 1;
    }
    len
}

impl AnalyticMoments {
    /// Spectral recovery from the exact moments. With `rank = None` the
    /// numerical rank of `P_T,H` is used.
    pub fn learn(&self, rank: Option<usize>) -> Result<LearnedModel> {
        let probe = truncated_svd(&self.p_th, 1)?;
        let n = rank.unwrap_or_else(|| numerical_rank(&probe.spectrum, EXACT_RANK_TOL).max(1));
        let svd = truncated_svd(&self.p_th, n)?;
        let est = self.projected_estimates(&svd.u);
        let cfg = LearnConfig {
            rank: n,
            ..LearnConfig::default()
        };
        let model = estimate_parameters(&est, &svd.u, &cfg)?;
        Ok(LearnedModel {
            model,
            spectrum: svd.spectrum,
            rank_deficient: svd.rank_deficient,
            embedding: history_embedding(&est, &svd.u),
            estimates: est,
        })
    }

    /// Parameters recovered with a caller-supplied projection `U` in place
    /// of the left singular vectors.
    pub fn learn_with_projection(&self, u: &DMatrix<f64>) -> Result<TpsrModel> {
        let est = self.projected_estimates(u);
        let cfg = LearnConfig {
            rank: u.ncols(),
            ..LearnConfig::default()
        };
        estimate_parameters(&est, u, &cfg)
    }
}

/// Every (actions, observations) pair of sequences with length ≤ `max_len`.
pub fn all_sequences(num_actions: usize, num_obs: usize, max_len: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..=max_len)
        .flat_map(|len| enumerate_windows(num_actions, num_obs, len))
        .collect()
}

/// Every (actions, observations) pair of sequences of exactly `len`.
pub fn sequences_of_length(num_actions: usize, num_obs: usize, len: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    enumerate_windows(num_actions, num_obs, len)
}
