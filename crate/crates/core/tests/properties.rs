//! Invariants of learning, filtering, planning and the file formats, checked
//! on randomly generated systems.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tpsr_core::envs::arena::{arena_step, pixel_surface, random_pose, Surface, NUM_ACTIONS};
use tpsr_core::envs::pomdp::{all_sequences, analytic_moments, indicator_window_len, pomdp_to_psr, Pomdp};
use tpsr_core::envs::trajectory::{read_trajectories, write_trajectories};
use tpsr_core::envs::{format_pomdp_spec, parse_pomdp_spec, pomdp_sample, ArenaConfig, Policy, Pose};
use tpsr_core::features::fit_whitening;
use tpsr_core::io::{model_from_bytes, model_to_bytes, value_function_from_bytes, value_function_to_bytes};
use tpsr_core::learn::{truncated_svd, MomentAccumulator};
use tpsr_core::model::one_hot;
use tpsr_core::planner::{
    greedy_action, perseus_sweep, ObsSupport, PerseusSubset, SupportOperators,
};
use tpsr_core::{BeliefState, PlannerConfig, RewardModel, TpsrModel, TrainingSample, ValueFunction};

fn pomdp(seed: u64) -> Pomdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = rng.random_range(2..=5);
    let a = rng.random_range(1..=3);
    let o = rng.random_range(2..=4);
    Pomdp::random(s, a, o, &mut rng)
}

fn oracle(seed: u64) -> (Pomdp, TpsrModel) {
    let p = pomdp(seed);
    let m = pomdp_to_psr(&p, 1, 1).to_model();
    (p, m)
}

/// Well-conditioned random matrix: identity plus a small perturbation.
fn near_identity(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::identity(n, n) + DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.3..0.3))
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    m.qr().q()
}

fn random_sequence(p: &Pomdp, len: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let a = (0..len).map(|_| rng.random_range(0..p.num_actions)).collect();
    let o = (0..len).map(|_| rng.random_range(0..p.num_obs)).collect();
    (a, o)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn predictions_invariant_under_similarity_transform(seed in any::<u64>()) {
        let (p, m) = oracle(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let j = near_identity(m.rank(), &mut rng);
        let t = m.transformed(&j).unwrap();
        for _ in 0..10 {
            let (a, o) = random_sequence(&p, 5, &mut rng);
            let x = m.sequence_probability_discrete(&a, &o).unwrap();
            let y = t.sequence_probability_discrete(&a, &o).unwrap();
            prop_assert!(close(x, y, 1e-9), "{x} vs {y}");
        }
    }

    #[test]
    fn product_form_equals_iterated_filtering(seed in any::<u64>()) {
        let (p, m) = oracle(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let (acts, obs) = random_sequence(&p, 10, &mut rng);
        let product = m.sequence_probability_discrete(&acts, &obs).unwrap();
        let mut b = m.normalized_initial_state();
        let mut iterated = 1.0;
        for (&a, &o) in acts.iter().zip(&obs) {
            let total: f64 = (0..p.num_obs).map(|k| m.b_inf().dot(&(m.operator(a, k) * &b.vector))).sum();
            prop_assert!((total - 1.0).abs() <= 1e-10);
            iterated *= m.b_inf().dot(&(m.operator(a, o) * &b.vector));
            b = m.filter_update_discrete(&b, a, o).unwrap();
        }
        prop_assert!(close(product, iterated, 1e-10), "{product} vs {iterated}");
    }

    #[test]
    fn rotated_projection_gives_same_predictions(seed in any::<u64>()) {
        let p = pomdp(seed);
        let len = indicator_window_len(&p);
        let moments = analytic_moments(&p, len, len);
        let base = moments.learn(None).unwrap().model;
        let n = base.rank();
        let svd = truncated_svd(&moments.p_th, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let q = random_orthogonal(n, &mut rng);
        let rotated = moments.learn_with_projection(&(svd.u * q)).unwrap();
        for (a, o) in all_sequences(p.num_actions, p.num_obs, 2) {
            let x = base.sequence_probability_discrete(&a, &o).unwrap();
            let y = rotated.sequence_probability_discrete(&a, &o).unwrap();
            prop_assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn moment_estimates_pool_linearly(seed in any::<u64>(), split in 10usize..190) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Pomdp::random(3, 2, 2, &mut rng);
        let fm = tpsr_core::FeatureMap::indicator(2, 2, 1, 1);
        let mut samples: Vec<TrainingSample> = Vec::new();
        while samples.len() < 200 {
            let t = pomdp_sample(&p, &Policy::Uniform, 3, 0, &mut rng).unwrap();
            samples.extend(tpsr_core::learn::training_samples(&fm, &t.records, 1, 0).unwrap());
        }
        let estimate = |s: &[TrainingSample]| {
            let mut acc = MomentAccumulator::new(4, 4, 2);
            for x in s {
                acc.add(x).unwrap();
            }
            acc.finish()
        };
        let (Ok(left), Ok(right)) = (estimate(&samples[..split]), estimate(&samples[split..])) else {
            // One half lacks an action; nothing to pool.
            return Ok(());
        };
        let all = estimate(&samples).unwrap();
        let w = split as f64 / samples.len() as f64;
        let pooled = &left.p_th * w + &right.p_th * (1.0 - w);
        prop_assert!((&all.p_th - pooled).abs().max() <= 1e-12);
        let pooled_h = &left.p_h * w + &right.p_h * (1.0 - w);
        prop_assert!((&all.p_h - pooled_h).abs().max() <= 1e-12);
    }

    #[test]
    fn composed_operator_is_linear_in_weights(seed in any::<u64>(), t in 0.0f64..1.0) {
        let (p, m) = oracle(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
        let simplex = |rng: &mut ChaCha8Rng| {
            let v = DVector::from_fn(p.num_obs, |_, _| rng.random_range(0.0..1.0));
            &v / v.sum()
        };
        let (w1, w2) = (simplex(&mut rng), simplex(&mut rng));
        let a = rng.random_range(0..p.num_actions);
        let mixed = m.compose(a, &(&w1 * t + &w2 * (1.0 - t))).unwrap();
        let split = m.compose(a, &w1).unwrap() * t + m.compose(a, &w2).unwrap() * (1.0 - t);
        prop_assert!((mixed - split).abs().max() <= 1e-12);
    }

    #[test]
    fn whitening_ignores_translation(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let mix = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let xs: Vec<DVector<f64>> = (0..60)
            .map(|_| &mix * DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let c = DVector::from_fn(d, |i, _| shift * (i as f64 + 1.0));
        let moved: Vec<DVector<f64>> = xs.iter().map(|x| x + &c).collect();
        let w = fit_whitening(&xs).unwrap();
        let wm = fit_whitening(&moved).unwrap();
        // Eigenvector signs are arbitrary, so compare whitened distances.
        for i in 0..10 {
            let d = (w.apply(&xs[i]) - w.apply(&xs[i + 10])).norm();
            let dm = (wm.apply(&moved[i]) - wm.apply(&moved[i + 10])).norm();
            prop_assert!((d - dm).abs() <= 1e-6 * d.max(1.0), "{d} vs {dm}");
        }
    }

    #[test]
    fn greedy_action_ignores_common_rescaling(seed in any::<u64>()) {
        let (p, m) = oracle(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        let rm = RewardModel::new((0..p.num_actions).map(|a| p.reward.column(a).into_owned()).collect()).unwrap();
        let points: Vec<BeliefState> = (0..20).map(|_| random_belief(p.num_states, &mut rng)).collect();
        let mut vf = ValueFunction::lower_bound(&m, &rm, &points, 0.8);
        let cfg = planner_config(points.clone(), 0.8);
        let ops = SupportOperators::new(&m, &ObsSupport::Kernels).unwrap();
        for _ in 0..3 {
            vf = perseus_sweep(&vf, &cfg, &m, &rm, &ops, &mut rng).unwrap().0;
        }
        let (svf, srm) = (vf.scaled(7.3), rm.scaled(7.3));
        for b in &points {
            let x = greedy_action(&m, b, &vf, &rm, 0.8, &ops).unwrap();
            let y = greedy_action(&m, b, &svf, &srm, 0.8, &ops).unwrap();
            let q = tpsr_core::planner::action_values(&m, b, &vf, &rm, 0.8, &ops).unwrap();
            let mut sorted = q.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            // Near-ties may legitimately flip under rounding.
            if sorted.len() < 2 || sorted[0] - sorted[1] > 1e-9 * sorted[0].abs().max(1.0) {
                prop_assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn perseus_never_lowers_point_values(seed in any::<u64>()) {
        let (p, m) = oracle(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 6);
        let rm = RewardModel::new(
            (0..p.num_actions)
                .map(|_| DVector::from_fn(p.num_states, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap();
        let points: Vec<BeliefState> = (0..30).map(|_| random_belief(p.num_states, &mut rng)).collect();
        let cfg = planner_config(points.clone(), 0.9);
        let ops = SupportOperators::new(&m, &ObsSupport::Kernels).unwrap();
        let mut vf = ValueFunction::lower_bound(&m, &rm, &points, 0.9);
        for _ in 0..5 {
            let (next, report) = perseus_sweep(&vf, &cfg, &m, &rm, &ops, &mut rng).unwrap();
            prop_assert!(report.num_alphas <= points.len());
            for b in &points {
                prop_assert!(next.value(&b.vector) >= vf.value(&b.vector) - 1e-9);
            }
            vf = next;
        }
    }

    #[test]
    fn model_and_value_files_round_trip(seed in any::<u64>()) {
        let (p, m) = oracle(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let m = m.transformed(&near_identity(m.rank(), &mut rng)).unwrap().with_feature_map_ref("ref");
        let back = model_from_bytes(&model_to_bytes(&m).unwrap(), "ref").unwrap();
        prop_assert_eq!(&back, &m);
        let alphas: Vec<DVector<f64>> = (0..5)
            .map(|_| DVector::from_fn(p.num_states, |_, _| rng.random_range(-1e3..1e3)))
            .collect();
        let vf = ValueFunction::new(alphas, (0..5).map(|i| i % p.num_actions).collect()).unwrap();
        prop_assert_eq!(value_function_from_bytes(&value_function_to_bytes(&vf).unwrap()).unwrap(), vf);
    }

    #[test]
    fn trajectory_and_spec_files_round_trip(seed in any::<u64>()) {
        let p = pomdp(seed);
        prop_assert_eq!(&parse_pomdp_spec(&format_pomdp_spec(&p)).unwrap(), &p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 8);
        let trajs: Vec<_> = (0..4)
            .map(|i| {
                let mut t = pomdp_sample(&p, &Policy::Uniform, 1 + i, 0, &mut rng).unwrap();
                for (_, o) in &mut t.records {
                    // Arbitrary payload values, not just one-hot.
                    *o = o.map(|x| x + rng.random_range(-1.0..1.0) * 1e-3);
                }
                t.meta.env_id = "pomdp".into();
                t
            })
            .collect();
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &trajs, p.num_obs, p.num_actions).unwrap();
        let (hdr, back) = read_trajectories(buf.as_slice(), "pomdp").unwrap();
        prop_assert_eq!(hdr.obs_dim, p.num_obs);
        prop_assert_eq!(back.len(), trajs.len());
        for (x, y) in back.iter().zip(&trajs) {
            prop_assert_eq!(&x.records, &y.records);
        }
    }
}

fn random_belief(n: usize, rng: &mut ChaCha8Rng) -> BeliefState {
    let v = DVector::from_fn(n, |_, _| rng.random_range(0.01..1.0));
    BeliefState::new(&v / v.sum())
}

fn planner_config(points: Vec<BeliefState>, gamma: f64) -> PlannerConfig {
    PlannerConfig {
        gamma,
        horizon: 10,
        belief_points: points,
        perseus_subset: PerseusSubset::Count(1),
        improvement_tol: 1e-9,
        seed: 0,
    }
}

#[test]
fn robot_never_penetrates_scene() {
    let cfg = ArenaConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut pose = random_pose(&cfg, &mut rng);
    for step in 0..100_000 {
        let a = rng.random_range(0..NUM_ACTIONS);
        pose = arena_step(&cfg, pose, a, &mut rng).unwrap().pose;
        assert!(cfg.is_free(pose.x, pose.y), "step {step}: ({}, {}) intersects the scene", pose.x, pose.y);
        if step % 5000 == 0 {
            pose = random_pose(&cfg, &mut rng);
        }
    }
}

/// Surface visible along horizontal bearing `phi`, computed from angular
/// sectors instead of ray intersection: the arena corners split bearings
/// into four wall sectors, and the obstacle (convex, in front of every
/// wall) occludes the bearings between its extreme corners.
fn visible_by_sectors(cfg: &ArenaConfig, x: f64, y: f64, phi: f64) -> Surface {
    let wrap = |a: f64| a.rem_euclid(std::f64::consts::TAU);
    let bearing = |px: f64, py: f64| wrap((py - y).atan2(px - x));
    let (lo, hi) = (cfg.obstacle_min, cfg.obstacle_max);
    let corners = [(lo, lo), (hi, lo), (hi, hi), (lo, hi)];
    // Angular span of the obstacle relative to the bearing of its center.
    let c = bearing((lo + hi) / 2.0, (lo + hi) / 2.0);
    let rel = |a: f64| {
        let d = wrap(a - c);
        if d > std::f64::consts::PI {
            d - std::f64::consts::TAU
        } else {
            d
        }
    };
    let offsets: Vec<f64> = corners.iter().map(|&(px, py)| rel(bearing(px, py))).collect();
    let (min, max) = offsets.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &o| (a.min(o), b.max(o)));
    let r = rel(phi);
    if r > min && r < max {
        return Surface::Obstacle;
    }
    let s = cfg.side;
    let se = bearing(s, 0.0);
    let ne = bearing(s, s);
    let nw = bearing(0.0, s);
    let sw = bearing(0.0, 0.0);
    let within = |a: f64, from: f64, to: f64| wrap(a - from) < wrap(to - from);
    if within(phi, se, ne) {
        Surface::East
    } else if within(phi, ne, nw) {
        Surface::North
    } else if within(phi, nw, sw) {
        Surface::West
    } else {
        Surface::South
    }
}

#[test]
fn horizon_row_matches_visibility_sectors() {
    let cfg = ArenaConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = cfg.camera_res;
    let half = (cfg.fov_deg.to_radians() / 2.0).tan();
    let mut checked = 0;
    for _ in 0..20 {
        let pose = random_pose(&cfg, &mut rng);
        for col in 0..n {
            let u = half * (1.0 - 2.0 * (col as f64 + 0.5) / n as f64);
            let phi = pose.theta + u.atan();
            let want = visible_by_sectors(&cfg, pose.x, pose.y, phi);
            let got = pixel_surface(&cfg, pose, n / 2, col);
            assert_eq!(got, want, "pose {pose:?} column {col}");
            checked += 1;
        }
    }
    assert_eq!(checked, 20 * n);
}

fn dominant_walls(cfg: &ArenaConfig, pose: Pose) -> [Surface; 2] {
    let n = cfg.camera_res;
    let walls = [Surface::South, Surface::East, Surface::North, Surface::West];
    let mut counts: Vec<(usize, Surface)> = walls
        .iter()
        .map(|&w| {
            let c = (0..n)
                .flat_map(|r| (0..n).map(move |c| (r, c)))
                .filter(|&(r, c)| pixel_surface(cfg, pose, r, c) == w)
                .count();
            (c, w)
        })
        .collect();
    counts.sort_by(|a, b| b.0.cmp(&a.0));
    assert!(counts[1].0 > 0, "fewer than two walls visible from {pose:?}");
    let mut top = [counts[0].1, counts[1].1];
    top.sort_by_key(|s| *s as usize);
    top
}

#[test]
fn turning_away_from_a_corner_swaps_wall_colors() {
    let cfg = ArenaConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        // Near the south-west corner, on its diagonal so that the obstacle
        // leaves both far walls visible, facing the corner.
        let x = rng.random_range(3.0..8.0);
        let y = x + rng.random_range(-0.5..0.5);
        let facing = Pose::new(x, y, (-y).atan2(-x));
        let away = Pose::new(x, y, facing.theta + std::f64::consts::PI);
        assert_eq!(dominant_walls(&cfg, facing), [Surface::South, Surface::West]);
        assert_eq!(dominant_walls(&cfg, away), [Surface::East, Surface::North]);
    }
}

#[test]
fn one_hot_weights_match_discrete_likelihoods() {
    let (p, m) = oracle(21);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut b = m.normalized_initial_state();
    for _ in 0..20 {
        let a = rng.random_range(0..p.num_actions);
        let o = rng.random_range(0..p.num_obs);
        let via_weights = m.filter_update(&b, a, &one_hot(p.num_obs, o)).unwrap();
        let direct = m.filter_update_discrete(&b, a, o).unwrap();
        assert!((&via_weights.vector - &direct.vector).abs().max() <= 1e-12);
        b = direct;
    }
}
