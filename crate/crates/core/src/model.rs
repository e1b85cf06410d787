//! The transformed PSR model: parameters, filtering and prediction.
//!
//! A model of rank `n` carries an initial state `b1`, a normalizer `b_inf`,
//! one `n × n` base operator per (action, observation-kernel) pair and the
//! projection `U` from states to characteristic-feature expectations.
//! Discrete observations are the special case of one-hot kernel weights.

use nalgebra::{DMatrix, DVector};

use crate::linalg::all_finite;
use crate::{Error, Result};

/// Floor applied where a predicted probability is consumed (division, logs,
/// likelihoods). Raw linear algebra is never clamped.
pub const DEFAULT_PROBABILITY_FLOOR: f64 = 1e-9;

/// Normalizers below this magnitude make a state update degenerate.
pub const DEGENERATE_THRESHOLD: f64 = 1e-12;

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Learned (or oracle) TPSR parameters. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsrModel {
    rank: usize,
    num_actions: usize,
    num_obs: usize,
    b1: DVector<f64>,
    b_inf: DVector<f64>,
    /// Base operators indexed by `action * num_obs + kernel`.
    operators: Vec<DMatrix<f64>>,
    projection: DMatrix<f64>,
    feature_map_ref: String,
}

/// Normalized internal state `b_t` together with the number of updates that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    pub vector: DVector<f64>,
    pub step_index: usize,
}

impl BeliefState {
    pub fn new(vector: DVector<f64>) -> Self {
        Self { vector, step_index: 0 }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

impl TpsrModel {
    /// Assembles a model. `operators[a][j]` is the base operator for action
    /// `a` and observation kernel `j`.
    pub fn new(
        b1: DVector<f64>,
        b_inf: DVector<f64>,
        operators: Vec<Vec<DMatrix<f64>>>,
        projection: DMatrix<f64>,
        feature_map_ref: impl Into<String>,
    ) -> Result<Self> {
        let rank = b1.len();
        if rank == 0 {
            return Err(Error::invalid("model rank must be positive"));
        }
        if b_inf.len() != rank {
            return Err(Error::dims(format!("b_inf has length {}, expected {rank}", b_inf.len())));
        }
        if projection.ncols() != rank {
            return Err(Error::dims(format!(
                "projection has {} columns, expected {rank}",
                projection.ncols()
            )));
        }
        let num_actions = operators.len();
        if num_actions == 0 {
            return Err(Error::invalid("model needs at least one action"));
        }
        let num_obs = operators[0].len();
        if num_obs == 0 {
            return Err(Error::invalid("model needs at least one observation kernel"));
        }
        let mut flat = Vec::with_capacity(num_actions * num_obs);
        for (a, ops) in operators.into_iter().enumerate() {
            if ops.len() != num_obs {
                return Err(Error::dims(format!(
                    "action {a} has {} operators, expected {num_obs}",
                    ops.len()
                )));
            }
            for op in ops {
                if op.nrows() != rank || op.ncols() != rank {
                    return Err(Error::dims(format!(
                        "operator is {}x{}, expected {rank}x{rank}",
                        op.nrows(),
                        op.ncols()
                    )));
                }
                flat.push(op);
            }
        }
        if !all_finite(b1.iter()) {
            return Err(Error::NonFinite("b1"));
        }
        if !all_finite(b_inf.iter()) {
            return Err(Error::NonFinite("b_inf"));
        }
        if !all_finite(projection.iter()) {
            return Err(Error::NonFinite("projection"));
        }
        if flat.iter().any(|m| !all_finite(m.iter())) {
            return Err(Error::NonFinite("operators"));
        }
        Ok(Self {
            rank,
            num_actions,
            num_obs,
            b1,
            b_inf,
            operators: flat,
            projection,
            feature_map_ref: feature_map_ref.into(),
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Number of observation kernels (discrete observations for one-hot models).
    pub fn num_obs(&self) -> usize {
        self.num_obs
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn b1(&self) -> &DVector<f64> {
        &self.b1
    }

    pub fn b_inf(&self) -> &DVector<f64> {
        &self.b_inf
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn feature_map_ref(&self) -> &str {
        &self.feature_map_ref
    }

    /// Base operator `B_{a,j}`.
    pub fn operator(&self, action: usize, kernel: usize) -> &DMatrix<f64> {
        assert!(action < self.num_actions && kernel < self.num_obs);
        &self.operators[action * self.num_obs + kernel]
    }

    /// All base operators in (action, kernel) order.
    pub fn operators(&self) -> &[DMatrix<f64>] {
        &self.operators
    }

    pub fn with_feature_map_ref(mut self, r: impl Into<String>) -> Self {
        self.feature_map_ref = r.into();
        self
    }

    /// The raw initial state `b1` at step 0.
    pub fn initial_state(&self) -> BeliefState {
        BeliefState::new(self.b1.clone())
    }

    /// `b1` rescaled so that `b_inf · b = 1`; falls back to the raw `b1` when
    /// its normalizer vanishes.
    pub fn normalized_initial_state(&self) -> BeliefState {
        let z = self.b_inf.dot(&self.b1);
        if z.abs() < DEGENERATE_THRESHOLD {
            self.initial_state()
        } else {
            BeliefState::new(&self.b1 / z)
        }
    }

    fn check_action(&self, action: usize) -> Result<()> {
        if action >= self.num_actions {
            return Err(Error::invalid(format!(
                "action {action} out of range (model has {})",
                self.num_actions
            )));
        }
        Ok(())
    }

    fn check_weights(&self, weights: &DVector<f64>) -> Result<()> {
        if weights.len() != self.num_obs {
            return Err(Error::dims(format!(
                "observation weights have length {}, model has {} kernels",
                weights.len(),
                self.num_obs
            )));
        }
        let s: f64 = weights.iter().sum();
        if !s.is_finite() || (s - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!("observation weights sum to {s}, expected 1")));
        }
        Ok(())
    }

    /// `B(a,o) = Σ_j w_j B_{a,j}`.
    pub fn compose(&self, action: usize, weights: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_action(action)?;
        if weights.len() != self.num_obs {
            return Err(Error::dims(format!(
                "observation weights have length {}, model has {} kernels",
                weights.len(),
                self.num_obs
            )));
        }
        let mut out = DMatrix::zeros(self.rank, self.rank);
        for (j, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                out.zip_apply(self.operator(action, j), |o, x| *o += w * x);
            }
        }
        Ok(out)
    }

    /// One recursive state update `b' = B(a,o) b / (b_inf · B(a,o) b)`.
    pub fn filter_update(
        &self,
        b: &BeliefState,
        action: usize,
        obs_weights: &DVector<f64>,
    ) -> Result<BeliefState> {
        self.check_weights(obs_weights)?;
        let op = self.compose(action, obs_weights)?;
        self.apply_update(b, action, &op)
    }

    /// State update for a discrete observation (one-hot kernel `obs`), reading
    /// the base operator directly.
    pub fn filter_update_discrete(&self, b: &BeliefState, action: usize, obs: usize) -> Result<BeliefState> {
        self.check_action(action)?;
        if obs >= self.num_obs {
            return Err(Error::invalid(format!("observation {obs} out of range")));
        }
        let op = self.operator(action, obs);
        self.apply_update(b, action, op)
    }

    fn apply_update(&self, b: &BeliefState, action: usize, op: &DMatrix<f64>) -> Result<BeliefState> {
        if b.vector.len() != self.rank {
            return Err(Error::dims(format!("state has length {}, model rank {}", b.vector.len(), self.rank)));
        }
        if !all_finite(b.vector.iter()) {
            return Err(Error::NonFinite("belief state"));
        }
        let next = op * &b.vector;
        let denominator = self.b_inf.dot(&next);
        if !denominator.is_finite() || denominator.abs() < DEGENERATE_THRESHOLD {
            return Err(Error::DegenerateUpdate { action, denominator });
        }
        Ok(BeliefState {
            vector: next / denominator,
            step_index: b.step_index + 1,
        })
    }

    /// `b_inf · B(a_t,o_t) ⋯ B(a_1,o_1) · b1`. May be slightly negative for
    /// sampled models; see [`clamp_probability`].
    pub fn sequence_probability(&self, actions: &[usize], obs_weights: &[DVector<f64>]) -> Result<f64> {
        if actions.len() != obs_weights.len() {
            return Err(Error::dims(format!(
                "{} actions but {} observations",
                actions.len(),
                obs_weights.len()
            )));
        }
        let mut state = self.b1.clone();
        for (&a, w) in actions.iter().zip(obs_weights) {
            let op = self.compose(a, w)?;
            state = op * state;
        }
        Ok(self.b_inf.dot(&state))
    }

    /// Same quantity as [`Self::sequence_probability`] for discrete
    /// observation indices, multiplying base operators directly.
    pub fn sequence_probability_discrete(&self, actions: &[usize], observations: &[usize]) -> Result<f64> {
        if actions.len() != observations.len() {
            return Err(Error::dims(format!(
                "{} actions but {} observations",
                actions.len(),
                observations.len()
            )));
        }
        let mut state = self.b1.clone();
        for (&a, &o) in actions.iter().zip(observations) {
            self.check_action(a)?;
            if o >= self.num_obs {
                return Err(Error::invalid(format!("observation {o} out of range")));
            }
            state = self.operator(a, o) * state;
        }
        Ok(self.b_inf.dot(&state))
    }

    /// Characteristic-feature expectations `U b`.
    pub fn predict_tests(&self, b: &BeliefState) -> DVector<f64> {
        &self.projection * &b.vector
    }

    /// Applies an invertible change of basis `J`: `(J b1, J^-T b_inf, J B J^-1)`.
    /// Sequence probabilities are unchanged; the projection becomes `U J^-1`.
    pub fn transformed(&self, j: &DMatrix<f64>) -> Result<Self> {
        let j_inv = j
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::invalid("transform is singular"))?;
        let ops = (0..self.num_actions)
            .map(|a| {
                (0..self.num_obs)
                    .map(|o| j * self.operator(a, o) * &j_inv)
                    .collect()
            })
            .collect();
        TpsrModel::new(
            j * &self.b1,
            j_inv.transpose() * &self.b_inf,
            ops,
            &self.projection * &j_inv,
            self.feature_map_ref.clone(),
        )
    }
}

/// `max(p, floor)`.
pub fn clamp_probability(p: f64, floor: f64) -> f64 {
    debug_assert!(floor > 0.0);
    if p.is_nan() {
        floor
    } else {
        p.max(floor)
    }
}

/// One-hot weight vector of length `len`.
pub fn one_hot(len: usize, index: usize) -> DVector<f64> {
    let mut v = DVector::zeros(len);
    v[index] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model() -> TpsrModel {
        TpsrModel::new(
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![2.0]),
            vec![vec![DMatrix::from_element(1, 1, 0.5)]],
            DMatrix::identity(1, 1),
            "test",
        )
        .unwrap()
    }

    #[test]
    fn scalar_update() {
        let m = scalar_model();
        let b = BeliefState::new(DVector::from_vec(vec![1.0]));
        let next = m.filter_update(&b, 0, &one_hot(1, 0)).unwrap();
        assert!((next.vector[0] - 0.5).abs() < 1e-15);
        assert_eq!(next.step_index, 1);
    }

    #[test]
    fn identity_update_is_fixed_point() {
        let m = TpsrModel::new(
            DVector::from_vec(vec![0.3, 0.7]),
            DVector::from_element(2, 1.0),
            vec![vec![DMatrix::identity(2, 2)]],
            DMatrix::identity(2, 2),
            "id",
        )
        .unwrap();
        let b = BeliefState::new(DVector::from_vec(vec![0.25, 0.75]));
        let next = m.filter_update(&b, 0, &one_hot(1, 0)).unwrap();
        assert!((next.vector - b.vector).abs().max() < 1e-15);
    }

    #[test]
    fn degenerate_update_is_reported() {
        let m = TpsrModel::new(
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![1.0]),
            vec![vec![DMatrix::zeros(1, 1)]],
            DMatrix::identity(1, 1),
            "z",
        )
        .unwrap();
        let err = m.filter_update(&m.initial_state(), 0, &one_hot(1, 0)).unwrap_err();
        assert!(matches!(err, Error::DegenerateUpdate { action: 0, .. }));
    }

    #[test]
    fn weights_must_sum_to_one() {
        let m = scalar_model();
        let w = DVector::from_vec(vec![0.9]);
        assert!(m.filter_update(&m.initial_state(), 0, &w).is_err());
    }

    #[test]
    fn empty_sequence_probability() {
        let m = scalar_model();
        assert_eq!(m.sequence_probability(&[], &[]).unwrap(), 2.0);
    }

    #[test]
    fn predict_tests_identity_projection() {
        let m = TpsrModel::new(
            DVector::from_vec(vec![0.5, 0.5]),
            DVector::from_element(2, 1.0),
            vec![vec![DMatrix::identity(2, 2)]],
            DMatrix::identity(2, 2),
            "id",
        )
        .unwrap();
        let b = BeliefState::new(DVector::from_vec(vec![0.2, 0.8]));
        assert_eq!(m.predict_tests(&b).as_slice(), &[0.2, 0.8]);
    }

    #[test]
    fn clamp() {
        assert_eq!(clamp_probability(-1e-5, 1e-9), 1e-9);
        assert_eq!(clamp_probability(0.3, 1e-9), 0.3);
    }

    #[test]
    fn rejects_ragged_operators() {
        let r = TpsrModel::new(
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![1.0]),
            vec![vec![DMatrix::identity(1, 1)], vec![]],
            DMatrix::identity(1, 1),
            "x",
        );
        assert!(r.is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let r = TpsrModel::new(
            DVector::from_vec(vec![f64::NAN]),
            DVector::from_vec(vec![1.0]),
            vec![vec![DMatrix::identity(1, 1)]],
            DMatrix::identity(1, 1),
            "x",
        );
        assert!(matches!(r, Err(Error::NonFinite("b1"))));
    }
}
