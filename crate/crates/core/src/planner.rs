//! Linear reward models over TPSR states and point-based value iteration
//! (PBVI backups and Perseus sweeps), plus greedy policy execution.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{all_finite, ridge_least_squares};
use crate::model::{clamp_probability, BeliefState, TpsrModel, DEFAULT_PROBABILITY_FLOOR};
use crate::{Error, Result};

/// Ridge term added to the reward regression.
pub const REWARD_RIDGE: f64 = 1e-8;

/// Slack allowed when checking that a backup does not lower a point's value.
pub const MONOTONE_TOL: f64 = 1e-9;

/// `r(b, a) ≈ η_a · b`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub eta: Vec<DVector<f64>>,
    /// Root-mean-square training residual per action.
    pub residuals: Vec<f64>,
}

impl RewardModel {
    pub fn new(eta: Vec<DVector<f64>>) -> Result<Self> {
        if eta.is_empty() {
            return Err(Error::invalid("reward model needs at least one action"));
        }
        let n = eta[0].len();
        if eta.iter().any(|e| e.len() != n) {
            return Err(Error::dims("reward vectors differ in length"));
        }
        if eta.iter().any(|e| !all_finite(e.iter())) {
            return Err(Error::NonFinite("reward vector"));
        }
        let residuals = vec![0.0; eta.len()];
        Ok(Self { eta, residuals })
    }

    pub fn num_actions(&self) -> usize {
        self.eta.len()
    }

    pub fn reward(&self, action: usize, b: &DVector<f64>) -> f64 {
        self.eta[action].dot(b)
    }

    /// Same model with every η multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            eta: self.eta.iter().map(|e| e * c).collect(),
            residuals: self.residuals.iter().map(|r| r * c.abs()).collect(),
        }
    }
}

/// Fits one ridge regression per action on the states where that action was
/// taken.
pub fn learn_reward(
    states: &[DVector<f64>],
    actions: &[usize],
    rewards: &[f64],
    num_actions: usize,
) -> Result<RewardModel> {
    if states.len() != actions.len() || states.len() != rewards.len() {
        return Err(Error::dims("states, actions and rewards differ in length"));
    }
    let n = states
        .first()
        .map(|s| s.len())
        .ok_or(Error::InsufficientSamples { action: 0, needed: 1, got: 0 })?;
    let mut eta = Vec::with_capacity(num_actions);
    let mut residuals = Vec::with_capacity(num_actions);
    for a in 0..num_actions {
        let idx: Vec<usize> = (0..states.len()).filter(|&i| actions[i] == a).collect();
        if idx.len() < n {
            return Err(Error::InsufficientSamples {
                action: a,
                needed: n,
                got: idx.len(),
            });
        }
        let x = DMatrix::from_fn(idx.len(), n, |r, c| states[idx[r]][c]);
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| rewards[i]));
        if !all_finite(x.iter()) || !all_finite(y.iter()) {
            return Err(Error::NonFinite("reward regression data"));
        }
        let w = ridge_least_squares(&x, &y, REWARD_RIDGE)?;
        let resid = (&x * &w - &y).norm() / (idx.len() as f64).sqrt();
        eta.push(w);
        residuals.push(resid);
    }
    let mut rm = RewardModel::new(eta)?;
    rm.residuals = residuals;
    Ok(rm)
}

/// A set of alpha vectors, each tagged with the action it was backed up for.
/// The value of a state is the maximum inner product.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub alphas: Vec<DVector<f64>>,
    pub actions: Vec<usize>,
}

impl ValueFunction {
    pub fn new(alphas: Vec<DVector<f64>>, actions: Vec<usize>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::invalid("value function needs at least one alpha vector"));
        }
        if alphas.len() != actions.len() {
            return Err(Error::dims("alpha vectors and action tags differ in count"));
        }
        let n = alphas[0].len();
        if alphas.iter().any(|a| a.len() != n) {
            return Err(Error::dims("alpha vectors differ in length"));
        }
        if alphas.iter().any(|a| !all_finite(a.iter())) {
            return Err(Error::NonFinite("alpha vector"));
        }
        Ok(Self { alphas, actions })
    }

    /// `Γ = {0}`.
    pub fn zero(dim: usize) -> Self {
        Self {
            alphas: vec![DVector::zeros(dim)],
            actions: vec![0],
        }
    }

    /// A single alpha `c · b_inf`, worth `c` at every normalized state.
    pub fn constant(model: &TpsrModel, c: f64) -> Self {
        Self {
            alphas: vec![model.b_inf() * c],
            actions: vec![0],
        }
    }

    /// Constant lower bound from the best blind policy: always repeating the
    /// action whose worst reward over `points` is largest. Capped at zero so
    /// it also bounds every finite-horizon value from below.
    pub fn lower_bound(model: &TpsrModel, rm: &RewardModel, points: &[BeliefState], gamma: f64) -> Self {
        let best_worst = rm
            .eta
            .iter()
            .map(|eta| points.iter().map(|b| eta.dot(&b.vector)).fold(f64::INFINITY, f64::min))
            .fold(f64::NEG_INFINITY, f64::max);
        let r = if best_worst.is_finite() { best_worst.min(0.0) } else { 0.0 };
        Self::constant(model, r / (1.0 - gamma))
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.alphas[0].len()
    }

    /// Index and value of the maximizing alpha; ties go to the lowest index.
    pub fn best(&self, b: &DVector<f64>) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, a) in self.alphas.iter().enumerate() {
            let v = a.dot(b);
            if v > best.1 {
                best = (i, v);
            }
        }
        best
    }

    pub fn value(&self, b: &DVector<f64>) -> f64 {
        self.best(b).1
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            alphas: self.alphas.iter().map(|a| a * c).collect(),
            actions: self.actions.clone(),
        }
    }

    fn push_unique(&mut self, alpha: DVector<f64>, action: usize) {
        if !self
            .alphas
            .iter()
            .zip(&self.actions)
            .any(|(a, &t)| t == action && *a == alpha)
        {
            self.alphas.push(alpha);
            self.actions.push(action);
        }
    }
}

/// How many unimproved points Perseus backs up before re-checking which
/// points have improved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerseusSubset {
    Count(usize),
    /// Back up every unimproved point in order: one full PBVI backup.
    All,
}

#[derive(Debug, Clone)]
pub struct PlannerConfig {
    pub gamma: f64,
    /// Maximum number of Perseus stages.
    pub horizon: usize,
    pub belief_points: Vec<BeliefState>,
    pub perseus_subset: PerseusSubset,
    pub improvement_tol: f64,
    pub seed: u64,
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!("gamma {} must lie in (0, 1)", self.gamma)));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be positive"));
        }
        if self.belief_points.is_empty() {
            return Err(Error::invalid("no belief points"));
        }
        if let PerseusSubset::Count(0) = self.perseus_subset {
            return Err(Error::invalid("perseus subset must be positive"));
        }
        if !(self.improvement_tol > 0.0) {
            return Err(Error::invalid("improvement tolerance must be positive"));
        }
        Ok(())
    }
}

/// The observations summed over in backups and lookahead.
#[derive(Debug, Clone, PartialEq)]
pub enum ObsSupport {
    /// One-hot weight per observation kernel (or discrete observation).
    Kernels,
    /// Explicit kernel weight vectors.
    Weights(Vec<DVector<f64>>),
}

/// Composed operators `B(a, o)` for every action and support element.
#[derive(Debug, Clone)]
pub struct SupportOperators {
    ops: Vec<Vec<DMatrix<f64>>>,
}

impl SupportOperators {
    pub fn new(model: &TpsrModel, support: &ObsSupport) -> Result<Self> {
        let ops = (0..model.num_actions())
            .map(|a| match support {
                ObsSupport::Kernels => Ok((0..model.num_obs()).map(|j| model.operator(a, j).clone()).collect()),
                ObsSupport::Weights(ws) => ws.iter().map(|w| model.compose(a, w)).collect(),
            })
            .collect::<Result<Vec<Vec<_>>>>()?;
        if ops.iter().any(|o| o.is_empty()) {
            return Err(Error::invalid("empty observation support"));
        }
        Ok(Self { ops })
    }

    pub fn num_actions(&self) -> usize {
        self.ops.len()
    }

    pub fn support_len(&self) -> usize {
        self.ops[0].len()
    }

    pub fn get(&self, action: usize, o: usize) -> &DMatrix<f64> {
        &self.ops[action][o]
    }
}

/// `B_aoᵀ α` for every alpha and (action, observation), stacked so that one
/// matrix-vector product scores all alphas against `B_ao b`.
struct BackProjected {
    /// `[a][o]`: |Γ| × n with row k = (B_aoᵀ α_k)ᵀ.
    g: Vec<Vec<DMatrix<f64>>>,
}

impl BackProjected {
    fn new(vf: &ValueFunction, ops: &SupportOperators) -> Self {
        let k = vf.len();
        let n = vf.dim();
        let mut gamma_mat = DMatrix::zeros(k, n);
        for (i, a) in vf.alphas.iter().enumerate() {
            gamma_mat.set_row(i, &a.transpose());
        }
        let g = ops
            .ops
            .iter()
            .map(|per_a| per_a.iter().map(|b| &gamma_mat * b).collect())
            .collect();
        Self { g }
    }

    /// Backed-up alpha for one point and the action it belongs to.
    fn backup(&self, b: &DVector<f64>, rm: &RewardModel, gamma: f64) -> (DVector<f64>, usize) {
        let mut best: Option<(DVector<f64>, usize, f64)> = None;
        for (a, per_a) in self.g.iter().enumerate() {
            let mut acc = DVector::zeros(b.len());
            for g in per_a {
                let scores = g * b;
                let mut k_best = 0;
                for k in 1..scores.len() {
                    if scores[k] > scores[k_best] {
                        k_best = k;
                    }
                }
                acc += g.row(k_best).transpose();
            }
            let alpha = &rm.eta[a] + acc * gamma;
            let v = alpha.dot(b);
            if best.as_ref().is_none_or(|(_, _, bv)| v > *bv) {
                best = Some((alpha, a, v));
            }
        }
        let (alpha, a, _) = best.expect("at least one action");
        (alpha, a)
    }
}

fn check_planning_inputs(vf: &ValueFunction, model: &TpsrModel, rm: &RewardModel) -> Result<()> {
    if rm.num_actions() != model.num_actions() {
        return Err(Error::dims("reward model and TPSR have different action counts"));
    }
    if vf.dim() != model.rank() || rm.eta[0].len() != model.rank() {
        return Err(Error::dims("alpha or reward dimension differs from the model rank"));
    }
    Ok(())
}

/// One synchronous point-based backup of `vf` at every point. A point keeps
/// its old best alpha when the backup would lower its value.
pub fn pbvi_backup(
    gamma: f64,
    vf: &ValueFunction,
    model: &TpsrModel,
    rm: &RewardModel,
    support: &ObsSupport,
    points: &[BeliefState],
) -> Result<ValueFunction> {
    check_planning_inputs(vf, model, rm)?;
    let ops = SupportOperators::new(model, support)?;
    let bp = BackProjected::new(vf, &ops);
    let mut out = ValueFunction {
        alphas: Vec::new(),
        actions: Vec::new(),
    };
    for b in points {
        let (alpha, a) = bp.backup(&b.vector, rm, gamma);
        let (k, old) = vf.best(&b.vector);
        if alpha.dot(&b.vector) >= old {
            out.push_unique(alpha, a);
        } else {
            out.push_unique(vf.alphas[k].clone(), vf.actions[k]);
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("no belief points"));
    }
    Ok(out)
}

/// Summary of one Perseus stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub backups: usize,
    pub num_alphas: usize,
    pub max_change: f64,
}

/// One Perseus stage: back up randomly chosen unimproved points until every
/// point has either been backed up or strictly improved by another point's
/// backup. No point's value drops below its value under `vf`.
pub fn perseus_sweep<R: Rng + ?Sized>(
    vf: &ValueFunction,
    cfg: &PlannerConfig,
    model: &TpsrModel,
    rm: &RewardModel,
    ops: &SupportOperators,
    rng: &mut R,
) -> Result<(ValueFunction, StageReport)> {
    check_planning_inputs(vf, model, rm)?;
    let points = &cfg.belief_points;
    let bp = BackProjected::new(vf, ops);
    let old: Vec<f64> = points.iter().map(|b| vf.value(&b.vector)).collect();
    let mut current = vec![f64::NEG_INFINITY; points.len()];
    let mut unimproved: Vec<usize> = (0..points.len()).collect();
    let mut backed_up = vec![false; points.len()];
    let mut out = ValueFunction {
        alphas: Vec::new(),
        actions: Vec::new(),
    };
    let mut backups = 0;
    while !unimproved.is_empty() {
        let batch: Vec<usize> = match cfg.perseus_subset {
            PerseusSubset::All => unimproved.clone(),
            PerseusSubset::Count(k) => unimproved.choose_multiple(rng, k.min(unimproved.len())).cloned().collect(),
        };
        let before = out.len();
        for &i in &batch {
            let b = &points[i].vector;
            let (alpha, a) = bp.backup(b, rm, cfg.gamma);
            backups += 1;
            if alpha.dot(b) >= old[i] {
                out.push_unique(alpha, a);
            } else {
                let (k, _) = vf.best(b);
                out.push_unique(vf.alphas[k].clone(), vf.actions[k]);
            }
        }
        for alpha in &out.alphas[before..] {
            for &i in &unimproved {
                let v = alpha.dot(&points[i].vector);
                if v > current[i] {
                    current[i] = v;
                }
            }
        }
        for &i in &batch {
            backed_up[i] = true;
        }
        unimproved.retain(|&i| !backed_up[i] && current[i] <= old[i]);
    }
    let max_change = current
        .iter()
        .zip(&old)
        .map(|(c, o)| (c - o).abs())
        .fold(0.0, f64::max);
    let report = StageReport {
        backups,
        num_alphas: out.len(),
        max_change,
    };
    Ok((out, report))
}

/// Runs Perseus stages from `init` until the largest value change at the
/// belief points drops below `improvement_tol` or `horizon` stages elapse.
pub fn perseus(
    init: ValueFunction,
    cfg: &PlannerConfig,
    model: &TpsrModel,
    rm: &RewardModel,
    support: &ObsSupport,
) -> Result<(ValueFunction, Vec<StageReport>)> {
    cfg.validate()?;
    let ops = SupportOperators::new(model, support)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vf = init;
    let mut reports = Vec::new();
    for _ in 0..cfg.horizon {
        let (next, report) = perseus_sweep(&vf, cfg, model, rm, &ops, &mut rng)?;
        let done = report.max_change < cfg.improvement_tol;
        vf = next;
        reports.push(report);
        if done {
            break;
        }
    }
    Ok((vf, reports))
}

/// One-step lookahead values `Q(b, a) = η_a·b + γ Σ_o p̂(o|b,a) V(b_ao)` with
/// clamped likelihoods renormalized over the support. An action whose update
/// is degenerate for some support element gets `-∞`.
pub fn action_values(
    model: &TpsrModel,
    b: &BeliefState,
    vf: &ValueFunction,
    rm: &RewardModel,
    gamma: f64,
    ops: &SupportOperators,
) -> Result<Vec<f64>> {
    if !all_finite(b.vector.iter()) {
        return Err(Error::NonFinite("belief state"));
    }
    if b.vector.len() != model.rank() {
        return Err(Error::dims("belief dimension differs from the model rank"));
    }
    let b_inf = model.b_inf();
    let mut q = Vec::with_capacity(ops.num_actions());
    for a in 0..ops.num_actions() {
        let mut total_p = 0.0;
        let mut weighted = 0.0;
        let mut degenerate = false;
        for o in 0..ops.support_len() {
            let next = ops.get(a, o) * &b.vector;
            let z = b_inf.dot(&next);
            if !z.is_finite() || z.abs() < crate::model::DEGENERATE_THRESHOLD {
                degenerate = true;
                break;
            }
            let p = clamp_probability(z, DEFAULT_PROBABILITY_FLOOR);
            total_p += p;
            weighted += p * vf.value(&(next / z));
        }
        q.push(if degenerate {
            f64::NEG_INFINITY
        } else {
            rm.reward(a, &b.vector) + gamma * weighted / total_p
        });
    }
    Ok(q)
}

/// Lowest index among the maximal entries.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy action under one-step lookahead. Falls back to the immediate
/// reward when every action's lookahead is degenerate.
pub fn greedy_action(
    model: &TpsrModel,
    b: &BeliefState,
    vf: &ValueFunction,
    rm: &RewardModel,
    gamma: f64,
    ops: &SupportOperators,
) -> Result<usize> {
    let q = action_values(model, b, vf, rm, gamma, ops)?;
    if q.iter().all(|v| *v == f64::NEG_INFINITY) {
        let r: Vec<f64> = (0..rm.num_actions()).map(|a| rm.reward(a, &b.vector)).collect();
        return Ok(argmax(&r));
    }
    Ok(argmax(&q))
}

/// Breaks action-observation 2-cycles: after the same pair of steps has
/// repeated `REPEATS` times, the next `ESCAPE_STEPS` actions are drawn
/// uniformly from the two best actions.
#[derive(Debug, Clone, Default)]
pub struct AntiStall {
    recent: VecDeque<(usize, usize)>,
    escape_left: usize,
}

impl AntiStall {
    pub const REPEATS: usize = 6;
    pub const ESCAPE_STEPS: usize = 3;

    pub fn new() -> Self {
        Self::default()
    }

    /// Records an executed action and a discrete observation label.
    pub fn record(&mut self, action: usize, obs_label: usize) {
        self.recent.push_back((action, obs_label));
        if self.recent.len() > 2 * Self::REPEATS {
            self.recent.pop_front();
        }
        if self.escape_left == 0 && self.recent.len() == 2 * Self::REPEATS {
            let cyclic = (2..self.recent.len()).all(|i| self.recent[i] == self.recent[i - 2]);
            if cyclic {
                self.escape_left = Self::ESCAPE_STEPS;
                self.recent.clear();
            }
        }
    }

    /// Overrides the greedy choice while escaping.
    pub fn choose<R: Rng + ?Sized>(&mut self, q: &[f64], greedy: usize, rng: &mut R) -> usize {
        if self.escape_left == 0 || q.len() < 2 {
            return greedy;
        }
        self.escape_left -= 1;
        let mut order: Vec<usize> = (0..q.len()).collect();
        order.sort_by(|&x, &y| q[y].total_cmp(&q[x]).then(x.cmp(&y)));
        order[rng.random_range(0..2)]
    }

    pub fn escaping(&self) -> bool {
        self.escape_left > 0
    }
}
