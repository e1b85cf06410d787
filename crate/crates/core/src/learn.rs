//! Spectral parameter recovery from moment estimates.
//!
//! Learning is two-pass. Pass one accumulates the indicative-feature means
//! `P_H` and the test/history cross moments `P_T,H`, whose truncated SVD
//! fixes the projection `U`. Pass two accumulates the projected trivariate
//! moments `Uᵀ P_T,ao,H` per (action, observation kernel) directly, so the
//! full `P_T,ao,H` tensors are never materialized.

use nalgebra::{DMatrix, DVector};

use crate::features::FeatureMap;
use crate::linalg::{pseudo_inverse, sorted_svd};
use crate::model::TpsrModel;
use crate::{Error, Result};

const FEATURE_SUM_TOL: f64 = 1e-9;

/// Realized features for one (history, pivot, test) window.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// `φ^H` of the history.
    pub indicative_features: DVector<f64>,
    /// `φ^T` of the test that starts at the pivot step, i.e. immediately
    /// after the history. Feeds `P_T,H`.
    pub characteristic_features: DVector<f64>,
    /// `φ^T` of the test that starts after the pivot. Feeds `P_T,ao,H`.
    pub future_features: DVector<f64>,
    pub middle_action: usize,
    /// Normalized observation-kernel weights of the pivot observation.
    pub middle_obs_weights: DVector<f64>,
}

impl TrainingSample {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("indicative", &self.indicative_features),
            ("characteristic", &self.characteristic_features),
            ("future", &self.future_features),
            ("observation", &self.middle_obs_weights),
        ] {
            let s: f64 = v.iter().sum();
            if !s.is_finite() || (s - 1.0).abs() > FEATURE_SUM_TOL {
                return Err(Error::invalid(format!("{name} features sum to {s}, expected 1")));
            }
        }
        if self.characteristic_features.len() != self.future_features.len() {
            return Err(Error::dims("characteristic and future features differ in length"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnConfig {
    pub rank: usize,
    /// Emit the full singular-value spectrum alongside the model.
    pub svd_tail_report: bool,
    /// Relative singular-value cutoff for pseudoinverses.
    pub pinv_rel_tol: f64,
    /// Offset between consecutive suffix-history windows.
    pub stride: usize,
    /// Steps discarded from the start of each trajectory before slicing.
    pub burn_in: usize,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            rank: 5,
            svd_tail_report: true,
            pinv_rel_tol: 1e-12,
            stride: 1,
            burn_in: 0,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::invalid("rank must be at least 1"));
        }
        if !(self.pinv_rel_tol > 0.0 && self.pinv_rel_tol < 1.0) {
            return Err(Error::invalid("pinv_rel_tol must lie in (0, 1)"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        Ok(())
    }
}

/// A (past, pivot, future) slice of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window<'a, T> {
    pub offset: usize,
    records: &'a [T],
    past_len: usize,
    future_len: usize,
}

impl<'a, T> Window<'a, T> {
    pub fn past(&self) -> &'a [T] {
        &self.records[..self.past_len]
    }

    pub fn pivot(&self) -> &'a T {
        &self.records[self.past_len]
    }

    /// The `future_len` pairs after the pivot.
    pub fn future(&self) -> &'a [T] {
        &self.records[self.past_len + 1..]
    }

    /// The `future_len` pairs starting at the pivot.
    pub fn test_from_pivot(&self) -> &'a [T] {
        &self.records[self.past_len..self.past_len + self.future_len]
    }
}

/// Slices a trajectory into overlapping windows at offsets `0, stride, …`.
pub fn slice_suffix_histories<T>(
    trajectory: &[T],
    past_len: usize,
    future_len: usize,
    stride: usize,
) -> Result<Vec<Window<'_, T>>> {
    if stride == 0 || future_len == 0 {
        return Err(Error::invalid("stride and future length must be positive"));
    }
    let total = past_len + 1 + future_len;
    if trajectory.len() < total {
        return Err(Error::EmptyOutput {
            needed: total,
            got: trajectory.len(),
        });
    }
    Ok((0..=trajectory.len() - total)
        .step_by(stride)
        .map(|offset| Window {
            offset,
            records: &trajectory[offset..offset + total],
            past_len,
            future_len,
        })
        .collect())
}

/// Feature vectors for every window of one trajectory, skipping the first
/// `burn_in` records.
pub fn training_samples(
    fm: &FeatureMap,
    records: &[(usize, DVector<f64>)],
    stride: usize,
    burn_in: usize,
) -> Result<Vec<TrainingSample>> {
    let records = records.get(burn_in..).unwrap_or(&[]);
    let windows = slice_suffix_histories(records, fm.past_len(), fm.future_len(), stride)?;
    fn split(pairs: &[(usize, DVector<f64>)]) -> (Vec<usize>, Vec<&DVector<f64>>) {
        (pairs.iter().map(|(a, _)| *a).collect(), pairs.iter().map(|(_, o)| o).collect())
    }
    windows
        .iter()
        .map(|w| {
            let (ha, ho) = split(w.past());
            let (ta, to) = split(w.test_from_pivot());
            let (fa, fo) = split(w.future());
            let (a, o) = w.pivot();
            Ok(TrainingSample {
                indicative_features: fm.indicative.eval(&ha, &ho)?,
                characteristic_features: fm.characteristic.eval(&ta, &to)?,
                future_features: fm.characteristic.eval(&fa, &fo)?,
                middle_action: *a,
                middle_obs_weights: fm.observation.eval(o)?,
            })
        })
        .collect()
}

/// Projected trivariate moments `Uᵀ P_T,ao,H`, one `n × d_H` matrix per
/// (action, observation kernel).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedOperators {
    pub num_actions: usize,
    pub num_obs: usize,
    /// Indexed by `action * num_obs + kernel`.
    pub sums: Vec<DMatrix<f64>>,
}

impl ProjectedOperators {
    pub fn get(&self, action: usize, kernel: usize) -> &DMatrix<f64> {
        &self.sums[action * self.num_obs + kernel]
    }
}

/// Moment estimates accumulated from training samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalEstimates {
    pub p_h: DVector<f64>,
    pub p_th: DMatrix<f64>,
    /// Present once pass two has run against a fixed projection.
    pub proj_p_taoh: Option<ProjectedOperators>,
    /// Total sample weight per pivot action (`w_a`).
    pub raw_counts: Vec<f64>,
    /// Total sample weight (`w`).
    pub total_samples: f64,
}

/// Pass-one accumulator for `P_H` and `P_T,H`. Accumulation is an
/// associative reduction; partial accumulators can be merged.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    sum_h: DVector<f64>,
    sum_th: DMatrix<f64>,
    action_weight: Vec<f64>,
    total: f64,
}

impl MomentAccumulator {
    pub fn new(indicative_dim: usize, characteristic_dim: usize, num_actions: usize) -> Self {
        Self {
            sum_h: DVector::zeros(indicative_dim),
            sum_th: DMatrix::zeros(characteristic_dim, indicative_dim),
            action_weight: vec![0.0; num_actions],
            total: 0.0,
        }
    }

    pub fn add(&mut self, sample: &TrainingSample) -> Result<()> {
        self.add_weighted(sample, 1.0)
    }

    /// Adds a sample with an arbitrary nonnegative weight (exact probabilities
    /// when enumerating a known system).
    pub fn add_weighted(&mut self, sample: &TrainingSample, weight: f64) -> Result<()> {
        sample.validate()?;
        let phi_h = &sample.indicative_features;
        let phi_t = &sample.characteristic_features;
        if phi_h.len() != self.sum_h.len() || phi_t.len() != self.sum_th.nrows() {
            return Err(Error::dims("sample feature dimensions do not match the accumulator"));
        }
        if sample.middle_action >= self.action_weight.len() {
            return Err(Error::invalid(format!("action {} out of range", sample.middle_action)));
        }
        if weight == 0.0 {
            return Ok(());
        }
        self.sum_h.axpy(weight, phi_h, 1.0);
        for (k, &h) in phi_h.iter().enumerate() {
            if h != 0.0 {
                self.sum_th.column_mut(k).axpy(weight * h, phi_t, 1.0);
            }
        }
        self.action_weight[sample.middle_action] += weight;
        self.total += weight;
        Ok(())
    }

    pub fn merge(&mut self, other: &MomentAccumulator) -> Result<()> {
        if self.sum_th.shape() != other.sum_th.shape() || self.action_weight.len() != other.action_weight.len() {
            return Err(Error::dims("cannot merge accumulators of different shape"));
        }
        self.sum_h += &other.sum_h;
        self.sum_th += &other.sum_th;
        for (a, b) in self.action_weight.iter_mut().zip(&other.action_weight) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    pub fn finish(self) -> Result<EmpiricalEstimates> {
        let missing: Vec<usize> = self
            .action_weight
            .iter()
            .enumerate()
            .filter(|(_, &w)| w <= 0.0)
            .map(|(a, _)| a)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingAction(missing));
        }
        let w = self.total;
        Ok(EmpiricalEstimates {
            p_h: self.sum_h / w,
            p_th: self.sum_th / w,
            proj_p_taoh: None,
            raw_counts: self.action_weight,
            total_samples: w,
        })
    }
}

/// Pass one over a sample stream.
pub fn accumulate_estimates<'a>(
    samples: impl IntoIterator<Item = &'a TrainingSample>,
    num_actions: usize,
) -> Result<EmpiricalEstimates> {
    let mut it = samples.into_iter().peekable();
    let first = it.peek().ok_or_else(|| Error::MissingAction((0..num_actions).collect()))?;
    let mut acc = MomentAccumulator::new(
        first.indicative_features.len(),
        first.characteristic_features.len(),
        num_actions,
    );
    for s in it {
        acc.add(s)?;
    }
    acc.finish()
}

/// Pass-two accumulator for `Uᵀ P_T,ao,H` (Uᵀ φ^T (φ^H)ᵀ weighted by the
/// normalized observation-kernel weights, averaged per pivot action).
#[derive(Debug, Clone)]
pub struct OperatorAccumulator {
    projection_t: DMatrix<f64>,
    num_obs: usize,
    sums: Vec<DMatrix<f64>>,
    action_weight: Vec<f64>,
}

impl OperatorAccumulator {
    pub fn new(projection: &DMatrix<f64>, indicative_dim: usize, num_actions: usize, num_obs: usize) -> Self {
        let n = projection.ncols();
        Self {
            projection_t: projection.transpose(),
            num_obs,
            sums: vec![DMatrix::zeros(n, indicative_dim); num_actions * num_obs],
            action_weight: vec![0.0; num_actions],
        }
    }

    pub fn add(&mut self, sample: &TrainingSample) -> Result<()> {
        self.add_weighted(sample, 1.0)
    }

    pub fn add_weighted(&mut self, sample: &TrainingSample, weight: f64) -> Result<()> {
        sample.validate()?;
        let a = sample.middle_action;
        if a >= self.action_weight.len() {
            return Err(Error::invalid(format!("action {a} out of range")));
        }
        if sample.middle_obs_weights.len() != self.num_obs
            || sample.future_features.len() != self.projection_t.ncols()
            || sample.indicative_features.len() != self.sums[0].ncols()
        {
            return Err(Error::dims("sample feature dimensions do not match the accumulator"));
        }
        if weight == 0.0 {
            return Ok(());
        }
        let u = &self.projection_t * &sample.future_features;
        for (j, &wj) in sample.middle_obs_weights.iter().enumerate() {
            if wj == 0.0 {
                continue;
            }
            let target = &mut self.sums[a * self.num_obs + j];
            for (k, &h) in sample.indicative_features.iter().enumerate() {
                if h != 0.0 {
                    target.column_mut(k).axpy(weight * wj * h, &u, 1.0);
                }
            }
        }
        self.action_weight[a] += weight;
        Ok(())
    }

    pub fn merge(&mut self, other: &OperatorAccumulator) -> Result<()> {
        if self.sums.len() != other.sums.len() || self.projection_t != other.projection_t {
            return Err(Error::dims("cannot merge accumulators of different shape"));
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        for (a, b) in self.action_weight.iter_mut().zip(&other.action_weight) {
            *a += b;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<ProjectedOperators> {
        let missing: Vec<usize> = self
            .action_weight
            .iter()
            .enumerate()
            .filter(|(_, &w)| w <= 0.0)
            .map(|(a, _)| a)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingAction(missing));
        }
        let num_actions = self.action_weight.len();
        let mut sums = self.sums;
        for a in 0..num_actions {
            for j in 0..self.num_obs {
                sums[a * self.num_obs + j] /= self.action_weight[a];
            }
        }
        Ok(ProjectedOperators {
            num_actions,
            num_obs: self.num_obs,
            sums,
        })
    }
}

/// Pass two over a sample stream.
pub fn project_operator_sums<'a>(
    samples: impl IntoIterator<Item = &'a TrainingSample>,
    projection: &DMatrix<f64>,
    num_actions: usize,
    num_obs: usize,
) -> Result<ProjectedOperators> {
    let mut it = samples.into_iter().peekable();
    let first = it.peek().ok_or_else(|| Error::MissingAction((0..num_actions).collect()))?;
    let mut acc = OperatorAccumulator::new(projection, first.indicative_features.len(), num_actions, num_obs);
    for s in it {
        acc.add(s)?;
    }
    acc.finish()
}

/// Left singular subspace of `P_T,H` and its spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdProjection {
    /// `characteristic dim × rank`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// All singular values, descending.
    pub spectrum: Vec<f64>,
    /// Set when `σ_n / σ_1 < 1e-10`; not fatal.
    pub rank_deficient: bool,
}

pub const RANK_WARNING_RATIO: f64 = 1e-10;

pub fn truncated_svd(p_th: &DMatrix<f64>, rank: usize) -> Result<SvdProjection> {
    let max_rank = p_th.nrows().min(p_th.ncols());
    if rank == 0 || rank > max_rank {
        return Err(Error::invalid(format!(
            "rank {rank} must lie in 1..={max_rank} for a {}x{} moment matrix",
            p_th.nrows(),
            p_th.ncols()
        )));
    }
    let svd = sorted_svd(p_th)?;
    let spectrum: Vec<f64> = svd.singular_values.iter().cloned().collect();
    let u = svd.u.columns(0, rank).into_owned();
    let s1 = spectrum[0];
    let rank_deficient = s1 <= 0.0 || spectrum[rank - 1] / s1 < RANK_WARNING_RATIO;
    Ok(SvdProjection {
        u,
        spectrum,
        rank_deficient,
    })
}

/// Recovers `b1`, `b_inf` and the base operators from moment estimates that
/// already carry projected trivariate moments for `projection`.
///
/// The indicative features are required to sum to one, so the all-ones
/// combination plays the role of the constant feature: `b1 = Uᵀ P_T,H 1`.
pub fn estimate_parameters(
    est: &EmpiricalEstimates,
    projection: &DMatrix<f64>,
    cfg: &LearnConfig,
) -> Result<TpsrModel> {
    cfg.validate()?;
    let n = projection.ncols();
    if n != cfg.rank {
        return Err(Error::dims(format!("projection has {n} columns, config rank {}", cfg.rank)));
    }
    if projection.nrows() != est.p_th.nrows() {
        return Err(Error::dims("projection rows do not match the characteristic dimension"));
    }
    let ops = est
        .proj_p_taoh
        .as_ref()
        .ok_or_else(|| Error::invalid("estimates lack projected operator moments (run pass two)"))?;

    let ones = DVector::from_element(est.p_th.ncols(), 1.0);
    let b1 = projection.tr_mul(&(&est.p_th * ones));

    let utp = projection.tr_mul(&est.p_th);
    let (utp_pinv, kept) = pseudo_inverse(&utp, cfg.pinv_rel_tol)?;
    if kept < n {
        return Err(Error::RankDeficient(format!(
            "Uᵀ P_T,H retains rank {kept} of {n} at relative tolerance {:e}",
            cfg.pinv_rel_tol
        )));
    }
    // b_inf = (P_T,Hᵀ U)^† P_H = ((Uᵀ P_T,H)^†)ᵀ P_H.
    let b_inf = utp_pinv.tr_mul(&est.p_h);

    let operators = (0..ops.num_actions)
        .map(|a| (0..ops.num_obs).map(|j| ops.get(a, j) * &utp_pinv).collect())
        .collect();
    TpsrModel::new(b1, b_inf, operators, projection.clone(), "")
}

/// Linear map taking indicative features of a history to its (unnormalized)
/// TPSR state: `Uᵀ P_T,H`.
pub fn history_embedding(est: &EmpiricalEstimates, projection: &DMatrix<f64>) -> DMatrix<f64> {
    projection.tr_mul(&est.p_th)
}

/// Embeds a history's indicative features and normalizes by `b_inf`.
/// Returns `None` when the normalizer vanishes.
pub fn embed_history(embedding: &DMatrix<f64>, b_inf: &DVector<f64>, phi_h: &DVector<f64>) -> Option<DVector<f64>> {
    let raw = embedding * phi_h;
    let z = b_inf.dot(&raw);
    if !z.is_finite() || z.abs() < crate::model::DEGENERATE_THRESHOLD {
        None
    } else {
        Some(raw / z)
    }
}

/// Everything produced by a full two-pass learning run.
#[derive(Debug, Clone)]
pub struct LearnedModel {
    pub model: TpsrModel,
    pub spectrum: Vec<f64>,
    pub rank_deficient: bool,
    /// `Uᵀ P_T,H` for embedding histories.
    pub embedding: DMatrix<f64>,
    pub estimates: EmpiricalEstimates,
}

/// Runs both passes, the SVD and parameter recovery.
pub fn learn_tpsr(samples: &[TrainingSample], num_actions: usize, num_obs: usize, cfg: &LearnConfig) -> Result<LearnedModel> {
    cfg.validate()?;
    let mut est = accumulate_estimates(samples.iter(), num_actions)?;
    learn_from_estimates(&mut est, samples.iter(), num_obs, cfg)
}

/// SVD, pass two and parameter recovery given pass-one estimates.
pub fn learn_from_estimates<'a>(
    est: &mut EmpiricalEstimates,
    samples: impl IntoIterator<Item = &'a TrainingSample>,
    num_obs: usize,
    cfg: &LearnConfig,
) -> Result<LearnedModel> {
    let svd = truncated_svd(&est.p_th, cfg.rank)?;
    let ops = project_operator_sums(samples, &svd.u, est.raw_counts.len(), num_obs)?;
    est.proj_p_taoh = Some(ops);
    let model = estimate_parameters(est, &svd.u, cfg)?;
    let embedding = history_embedding(est, &svd.u);
    Ok(LearnedModel {
        model,
        spectrum: svd.spectrum,
        rank_deficient: svd.rank_deficient,
        embedding,
        estimates: est.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::one_hot;

    fn sample(h: &[f64], t: &[f64], a: usize, o: &[f64]) -> TrainingSample {
        TrainingSample {
            indicative_features: DVector::from_vec(h.to_vec()),
            characteristic_features: DVector::from_vec(t.to_vec()),
            future_features: DVector::from_vec(t.to_vec()),
            middle_action: a,
            middle_obs_weights: DVector::from_vec(o.to_vec()),
        }
    }

    #[test]
    fn window_counts() {
        let traj: Vec<usize> = (0..7).collect();
        let w = slice_suffix_histories(&traj, 3, 3, 1).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].past(), &[0, 1, 2]);
        assert_eq!(*w[0].pivot(), 3);
        assert_eq!(w[0].future(), &[4, 5, 6]);
        assert_eq!(w[0].test_from_pivot(), &[3, 4, 5]);

        let traj: Vec<usize> = (0..9).collect();
        let w = slice_suffix_histories(&traj, 3, 3, 1).unwrap();
        assert_eq!(w.iter().map(|w| w.offset).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(slice_suffix_histories(&traj, 3, 3, 2).unwrap().len(), 2);

        assert!(matches!(
            slice_suffix_histories(&traj[..6], 3, 3, 1),
            Err(Error::EmptyOutput { needed: 7, got: 6 })
        ));
    }

    #[test]
    fn single_outer_product() {
        let s = sample(&[1.0, 0.0], &[0.0, 1.0], 0, &[1.0]);
        let est = accumulate_estimates([&s], 1).unwrap();
        assert_eq!(est.p_th, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]));
        assert_eq!(est.p_h.as_slice(), &[1.0, 0.0]);

        let twice = accumulate_estimates([&s, &s], 1).unwrap();
        assert_eq!(twice.p_th, est.p_th);
        assert_eq!(twice.p_h, est.p_h);
    }

    #[test]
    fn missing_action_is_reported() {
        let s = sample(&[1.0], &[1.0], 0, &[1.0]);
        match accumulate_estimates([&s], 3) {
            Err(Error::MissingAction(a)) => assert_eq!(a, vec![1, 2]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unnormalized_features_are_rejected() {
        let s = sample(&[0.5, 0.2], &[1.0], 0, &[1.0]);
        assert!(accumulate_estimates([&s], 1).is_err());
    }

    #[test]
    fn diagonal_svd() {
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let svd = truncated_svd(&p, 2).unwrap();
        assert_eq!(&svd.spectrum[..2], &[3.0, 2.0]);
        let expected = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!((svd.u.abs() - expected).abs().max() < 1e-12);
        assert!(!svd.rank_deficient);
        assert!(truncated_svd(&p, 4).is_err());
    }

    #[test]
    fn rank_one_svd() {
        let u = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let v = DVector::from_vec(vec![0.5, -1.0]);
        let svd = truncated_svd(&(&u * v.transpose()), 1).unwrap();
        let unit = &u / u.norm();
        assert!((svd.u.column(0).dot(&unit).abs() - 1.0).abs() < 1e-12);
        let deficient = truncated_svd(&(&u * v.transpose()), 2).unwrap();
        assert!(deficient.rank_deficient);
    }

    #[test]
    fn projection_needs_pass_two() {
        let s = sample(&[1.0], &[1.0], 0, &[1.0]);
        let est = accumulate_estimates([&s], 1).unwrap();
        let cfg = LearnConfig {
            rank: 1,
            ..LearnConfig::default()
        };
        assert!(estimate_parameters(&est, &DMatrix::identity(1, 1), &cfg).is_err());
    }

    #[test]
    fn trivial_system_is_recovered() {
        // One action, one observation: every sequence has probability 1.
        let s = TrainingSample {
            indicative_features: one_hot(1, 0),
            characteristic_features: one_hot(1, 0),
            future_features: one_hot(1, 0),
            middle_action: 0,
            middle_obs_weights: one_hot(1, 0),
        };
        let cfg = LearnConfig {
            rank: 1,
            ..LearnConfig::default()
        };
        let learned = learn_tpsr(&[s], 1, 1, &cfg).unwrap();
        let p = learned.model.sequence_probability_discrete(&[0, 0, 0], &[0, 0, 0]).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
    }
}
