use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use tpsr_core::envs::arena::{arena_render, random_pose};
use tpsr_core::envs::pomdp::pomdp_to_psr;
use tpsr_core::envs::{pomdp_sample, ArenaConfig, Policy, Pomdp};
use tpsr_core::learn::{learn_tpsr, training_samples};
use tpsr_core::planner::{perseus_sweep, ObsSupport, PerseusSubset, SupportOperators};
use tpsr_core::{BeliefState, FeatureMap, LearnConfig, PlannerConfig, RewardModel, ValueFunction};

fn filtering(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = Pomdp::random(5, 3, 4, &mut rng);
    let m = pomdp_to_psr(&p, 1, 1).to_model();
    let w = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
    c.bench_function("filter_update rank 5", |b| {
        let s = m.normalized_initial_state();
        b.iter(|| m.filter_update(black_box(&s), 1, black_box(&w)).unwrap())
    });
}

fn learning(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = Pomdp::random(3, 2, 2, &mut rng);
    let fm = FeatureMap::indicator(2, 2, 2, 2);
    let samples: Vec<_> = (0..10_000)
        .flat_map(|_| {
            let t = pomdp_sample(&p, &Policy::Uniform, 5, 0, &mut rng).unwrap();
            training_samples(&fm, &t.records, 1, 0).unwrap()
        })
        .collect();
    let cfg = LearnConfig {
        rank: 3,
        ..LearnConfig::default()
    };
    c.bench_function("learn_tpsr 1e4 indicator windows", |b| {
        b.iter(|| learn_tpsr(black_box(&samples), 2, 2, &cfg).unwrap())
    });
}

fn planning(c: &mut Criterion) {
    let p = Pomdp::tiger();
    let m = pomdp_to_psr(&p, 1, 1).to_model();
    let rm = RewardModel::new((0..3).map(|a| p.reward.column(a).into_owned()).collect()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let points: Vec<BeliefState> = (0..500)
        .map(|_| {
            let x: f64 = rng.random();
            BeliefState::new(DVector::from_vec(vec![1.0 - x, x]))
        })
        .collect();
    let cfg = PlannerConfig {
        gamma: 0.8,
        horizon: 1,
        belief_points: points.clone(),
        perseus_subset: PerseusSubset::Count(1),
        improvement_tol: 1e-9,
        seed: 0,
    };
    let ops = SupportOperators::new(&m, &ObsSupport::Kernels).unwrap();
    let vf = ValueFunction::lower_bound(&m, &rm, &points, 0.8);
    c.bench_function("perseus_sweep tiger 500 points", |b| {
        b.iter(|| perseus_sweep(black_box(&vf), &cfg, &m, &rm, &ops, &mut ChaCha8Rng::seed_from_u64(4)).unwrap())
    });
}

fn rendering(c: &mut Criterion) {
    let cfg = ArenaConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pose = random_pose(&cfg, &mut rng);
    c.bench_function("arena_render 16x16", |b| b.iter(|| arena_render(&cfg, black_box(pose))));
}

criterion_group!(benches, filtering, learning, planning, rendering);
criterion_main!(benches);
