//! Learned and oracle models checked against exact POMDP computations.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tpsr_core::envs::exact_vi::exact_value_iteration;
use tpsr_core::envs::pomdp::{
    all_sequences, analytic_moments, indicator_window_len, pomdp_to_psr, sequences_of_length, Pomdp,
};
use tpsr_core::envs::forward_probability;
use tpsr_core::features::indicator_index;
use tpsr_core::learn::{MomentAccumulator, OperatorAccumulator};
use tpsr_core::model::one_hot;
use tpsr_core::planner::{greedy_action, perseus, ObsSupport, PerseusSubset, SupportOperators};
use tpsr_core::{BeliefState, PlannerConfig, RewardModel, TrainingSample, ValueFunction};

fn random_pomdp(seed: u64) -> Pomdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = rng.random_range(2..=5);
    let a = rng.random_range(1..=3);
    let o = rng.random_range(2..=4);
    Pomdp::random(s, a, o, &mut rng)
}

#[test]
fn analytic_recovery_reproduces_forward_probabilities() {
    for seed in 0..20 {
        let p = random_pomdp(seed);
        let len = indicator_window_len(&p);
        let learned = analytic_moments(&p, len, len).learn(None).unwrap();
        assert!(learned.model.rank() <= p.num_states);
        let q = p.with_initial_belief(p.propagated_belief(len)).unwrap();
        let mut worst: f64 = 0.0;
        for (acts, obs) in all_sequences(p.num_actions, p.num_obs, 4) {
            let truth = forward_probability(&q, &acts, &obs).unwrap();
            let got = learned.model.sequence_probability_discrete(&acts, &obs).unwrap();
            worst = worst.max((truth - got).abs());
        }
        assert!(worst <= 1e-8, "seed {seed}: max error {worst:e}");
    }
}

/// Every (history, pivot, future) window of a small POMDP with its exact
/// probability under uniformly random actions.
fn enumerate_samples(p: &Pomdp, len: usize) -> Vec<(TrainingSample, f64)> {
    let (na, no) = (p.num_actions, p.num_obs);
    let mut out = Vec::new();
    for (acts, obs) in sequences_of_length(na, no, 2 * len + 1) {
        let w = forward_probability(p, &acts, &obs).unwrap() * (na as f64).powi(-(2 * len as i32 + 1));
        let ind = |r: std::ops::Range<usize>| {
            let dim = (na * no).pow(len as u32);
            one_hot(dim, indicator_index(&acts[r.clone()], &obs[r], na, no).unwrap())
        };
        out.push((
            TrainingSample {
                indicative_features: ind(0..len),
                characteristic_features: ind(len..2 * len),
                future_features: ind(len + 1..2 * len + 1),
                middle_action: acts[len],
                middle_obs_weights: one_hot(no, obs[len]),
            },
            w,
        ));
    }
    out
}

#[test]
fn weighted_enumeration_matches_analytic_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let p = Pomdp::random(3, 2, 2, &mut rng);
    let len = 2;
    let exact = analytic_moments(&p, len, len);
    let samples = enumerate_samples(&p, len);
    let dim = (p.num_actions * p.num_obs).pow(len as u32);

    let mut acc = MomentAccumulator::new(dim, dim, p.num_actions);
    for (s, w) in &samples {
        acc.add_weighted(s, *w).unwrap();
    }
    let est = acc.finish().unwrap();
    assert!((&est.p_h - &exact.p_h).abs().max() < 1e-12);
    assert!((&est.p_th - &exact.p_th).abs().max() < 1e-12);

    let identity = DMatrix::identity(dim, dim);
    let mut ops = OperatorAccumulator::new(&identity, dim, p.num_actions, p.num_obs);
    for (s, w) in &samples {
        ops.add_weighted(s, *w).unwrap();
    }
    let ops = ops.finish().unwrap();
    for a in 0..p.num_actions {
        for o in 0..p.num_obs {
            let diff = (ops.get(a, o) - &exact.p_taoh[a * p.num_obs + o]).abs().max();
            assert!(diff < 1e-12, "P_T,ao,H mismatch {diff:e} at ({a}, {o})");
        }
    }
}

#[test]
fn oracle_prediction_after_one_step_is_conditional_test_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = Pomdp::random(3, 2, 2, &mut rng);
    let model = pomdp_to_psr(&p, 1, 1).to_model();
    let b = model.filter_update_discrete(&model.initial_state(), 1, 0).unwrap();
    let pr_h = forward_probability(&p, &[1], &[0]).unwrap();
    // Every length-2 test from the filtered state.
    for (acts, obs) in sequences_of_length(p.num_actions, p.num_obs, 2) {
        let mut s = b.vector.clone();
        for (&a, &o) in acts.iter().zip(&obs) {
            s = model.operator(a, o) * s;
        }
        let predicted = model.b_inf().dot(&s);
        let full_a: Vec<usize> = [1].iter().chain(&acts).cloned().collect();
        let full_o: Vec<usize> = [0].iter().chain(&obs).cloned().collect();
        let conditional = forward_probability(&p, &full_a, &full_o).unwrap() / pr_h;
        assert!((predicted - conditional).abs() < 1e-10);
    }
}

#[test]
fn oracle_likelihoods_sum_to_one_along_trajectories() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let p = Pomdp::random(rng.random_range(2..=5), 2, 3, &mut rng);
        let model = pomdp_to_psr(&p, 1, 1).to_model();
        let mut b = model.initial_state();
        for _ in 0..10 {
            let a = rng.random_range(0..2);
            let total: f64 = (0..3)
                .map(|o| model.b_inf().dot(&(model.operator(a, o) * &b.vector)))
                .sum();
            assert!((total - 1.0).abs() < 1e-10);
            let o = rng.random_range(0..3);
            b = model.filter_update_discrete(&b, a, o).unwrap();
        }
    }
}

#[test]
fn one_hot_kernel_path_matches_discrete_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = Pomdp::random(3, 2, 3, &mut rng);
    let model = pomdp_to_psr(&p, 1, 1).to_model();
    for (acts, obs) in all_sequences(2, 3, 4) {
        let w: Vec<DVector<f64>> = obs.iter().map(|&o| one_hot(3, o)).collect();
        let a = model.sequence_probability(&acts, &w).unwrap();
        let b = model.sequence_probability_discrete(&acts, &obs).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn tiger_perseus_lower_bounds_exact_values() {
    let p = Pomdp::tiger();
    let gamma = 0.8;
    let exact = exact_value_iteration(&p, gamma, 30).unwrap();
    let model = pomdp_to_psr(&p, 1, 1).to_model();
    let rm = RewardModel::new((0..3).map(|a| p.reward.column(a).into_owned()).collect()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let points: Vec<BeliefState> = (0..500)
        .map(|_| {
            let x: f64 = rng.random();
            BeliefState::new(DVector::from_vec(vec![1.0 - x, x]))
        })
        .collect();
    let cfg = PlannerConfig {
        gamma,
        horizon: 30,
        belief_points: points.clone(),
        perseus_subset: PerseusSubset::Count(1),
        improvement_tol: 1e-9,
        seed: 1,
    };
    let init = ValueFunction::lower_bound(&model, &rm, &points, gamma);
    let (vf, stages) = perseus(init, &cfg, &model, &rm, &ObsSupport::Kernels).unwrap();
    assert!(stages.len() <= 30);
    let ops = SupportOperators::new(&model, &ObsSupport::Kernels).unwrap();
    for b in &points {
        assert!(exact.value(&b.vector) - vf.value(&b.vector) >= -1e-6);
    }
    let agree = points
        .iter()
        .filter(|b| {
            greedy_action(&model, b, &vf, &rm, gamma, &ops).unwrap()
                == exact.actions[exact.best(&b.vector).0]
        })
        .count();
    assert!(agree >= 475, "greedy agreement {agree}/500");
}
