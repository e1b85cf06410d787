//! Exact finite-horizon value iteration for small POMDPs over beliefs.
//!
//! Each step is a full cross-sum backup with incremental pruning. For two
//! states the pruning is exact (upper envelope of lines on `[0, 1]`); above
//! that, vectors are kept only if they win at some point of a regular belief
//! grid.

use nalgebra::DVector;

use super::pomdp::Pomdp;
use crate::planner::ValueFunction;
use crate::{Error, Result};

pub const MAX_STATES: usize = 6;
pub const MAX_OBS: usize = 4;
/// Grid resolution for witness pruning with more than two states.
pub const GRID_STEP: f64 = 0.01;
/// Upper bound on the number of grid points; the step is coarsened to fit.
pub const MAX_GRID_POINTS: usize = 50_000;

#[derive(Clone)]
struct Tagged {
    alpha: DVector<f64>,
    action: usize,
}

/// Optimal `horizon`-step value function starting from `V_0 = 0`.
pub fn exact_value_iteration(p: &Pomdp, gamma: f64, horizon: usize) -> Result<ValueFunction> {
    if p.num_states > MAX_STATES || p.num_obs > MAX_OBS {
        return Err(Error::SizeLimit(format!(
            "{} states and {} observations (limits {MAX_STATES} and {MAX_OBS})",
            p.num_states, p.num_obs
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma {gamma} must lie in [0, 1)")));
    }
    let pruner = Pruner::new(p.num_states);
    let mut gamma_set = vec![Tagged {
        alpha: DVector::zeros(p.num_states),
        action: 0,
    }];
    for _ in 0..horizon {
        let mut next = Vec::new();
        for a in 0..p.num_actions {
            let reward = p.reward.column(a).into_owned();
            // g_{a,o,k}(s) = Σ_s' T_a(s,s') O_a(s',o) α_k(s')
            let mut acc: Vec<DVector<f64>> = vec![reward];
            for o in 0..p.num_obs {
                let op = p.belief_operator(a, o).transpose();
                let projected: Vec<DVector<f64>> = gamma_set.iter().map(|t| &op * &t.alpha * gamma).collect();
                let projected = pruner.prune_plain(projected);
                let mut sum = Vec::with_capacity(acc.len() * projected.len());
                for x in &acc {
                    for y in &projected {
                        sum.push(x + y);
                    }
                }
                acc = pruner.prune_plain(sum);
            }
            next.extend(acc.into_iter().map(|alpha| Tagged { alpha, action: a }));
        }
        gamma_set = pruner.prune(next);
    }
    let (alphas, actions) = gamma_set.into_iter().map(|t| (t.alpha, t.action)).unzip();
    ValueFunction::new(alphas, actions)
}

struct Pruner {
    num_states: usize,
    grid: Vec<DVector<f64>>,
}

impl Pruner {
    fn new(num_states: usize) -> Self {
        let grid = if num_states > 2 { simplex_grid(num_states) } else { Vec::new() };
        Self { num_states, grid }
    }

    fn prune_plain(&self, v: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
        self.prune(v.into_iter().map(|alpha| Tagged { alpha, action: 0 }).collect())
            .into_iter()
            .map(|t| t.alpha)
            .collect()
    }

    fn prune(&self, v: Vec<Tagged>) -> Vec<Tagged> {
        let v = remove_dominated(v);
        match self.num_states {
            1 => {
                let best = v
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, t)| if t.alpha[0] > v[b].alpha[0] { i } else { b });
                vec![v[best].clone()]
            }
            2 => line_envelope(v),
            _ => grid_witness(v, &self.grid),
        }
    }
}

/// Drops vectors that are pointwise ≤ another (exact duplicates keep the first).
fn remove_dominated(v: Vec<Tagged>) -> Vec<Tagged> {
    let n = v.len();
    let mut keep = vec![true; n];
    for i in 0..n {
        if !keep[i] {
            continue;
        }
        for j in 0..n {
            if i == j || !keep[j] {
                continue;
            }
            let ge = v[j].alpha.iter().zip(v[i].alpha.iter()).all(|(a, b)| a >= b);
            if ge {
                let equal = v[j].alpha == v[i].alpha;
                if !equal || j < i {
                    keep[i] = false;
                    break;
                }
            }
        }
    }
    v.into_iter().zip(keep).filter(|(_, k)| *k).map(|(t, _)| t).collect()
}

/// Upper envelope of `c + m·p` over `p ∈ [0, 1]` for belief `(1-p, p)`.
fn line_envelope(v: Vec<Tagged>) -> Vec<Tagged> {
    if v.len() <= 1 {
        return v;
    }
    let line = |t: &Tagged| (t.alpha[1] - t.alpha[0], t.alpha[0]);
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| {
        let (mi, ci) = line(&v[i]);
        let (mj, cj) = line(&v[j]);
        mi.total_cmp(&mj).then(cj.total_cmp(&ci)).then(i.cmp(&j))
    });
    // Equal slopes: the first (largest intercept) wins.
    order.dedup_by(|b, a| line(&v[*b]).0 == line(&v[*a]).0);
    let cross = |i: usize, j: usize| {
        let (mi, ci) = line(&v[i]);
        let (mj, cj) = line(&v[j]);
        (ci - cj) / (mj - mi)
    };
    let mut hull: Vec<usize> = Vec::new();
    for &k in &order {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            if cross(a, k) <= cross(a, b) {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(k);
    }
    let mut out = Vec::new();
    for (pos, &k) in hull.iter().enumerate() {
        let lo = if pos == 0 { f64::NEG_INFINITY } else { cross(hull[pos - 1], k) };
        let hi = if pos + 1 == hull.len() { f64::INFINITY } else { cross(k, hull[pos + 1]) };
        if lo.max(0.0) < hi.min(1.0) {
            out.push(v[k].clone());
        }
    }
    out
}

fn grid_witness(v: Vec<Tagged>, grid: &[DVector<f64>]) -> Vec<Tagged> {
    let mut keep = vec![false; v.len()];
    for b in grid {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (i, t) in v.iter().enumerate() {
            let x = t.alpha.dot(b);
            if x > best_v {
                best_v = x;
                best = i;
            }
        }
        keep[best] = true;
    }
    v.into_iter().zip(keep).filter(|(_, k)| *k).map(|(t, _)| t).collect()
}

/// Regular grid on the probability simplex, as fine as `GRID_STEP` allows
/// within `MAX_GRID_POINTS`.
fn simplex_grid(dim: usize) -> Vec<DVector<f64>> {
    let count = |m: usize| -> usize {
        // C(m + dim - 1, dim - 1)
        let mut c: u128 = 1;
        for i in 0..(dim - 1) {
            c = c * (m + dim - 1 - i) as u128 / (i + 1) as u128;
        }
        c.min(usize::MAX as u128) as usize
    };
    let mut m = (1.0 / GRID_STEP).round() as usize;
    while m > 1 && count(m) > MAX_GRID_POINTS {
        m -= 1;
    }
    let mut out = Vec::new();
    let mut cur = vec![0usize; dim];
    fn rec(pos: usize, left: usize, cur: &mut Vec<usize>, m: usize, out: &mut Vec<DVector<f64>>) {
        let dim = cur.len();
        if pos == dim - 1 {
            cur[pos] = left;
            out.push(DVector::from_iterator(dim, cur.iter().map(|&c| c as f64 / m as f64)));
            return;
        }
        for k in 0..=left {
            cur[pos] = k;
            rec(pos + 1, left - k, cur, m, out);
        }
    }
    rec(0, m, &mut cur, m, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn zero_reward_gives_zero() {
        let mut p = Pomdp::tiger();
        p.reward = DMatrix::zeros(2, 3);
        let vf = exact_value_iteration(&p, 0.9, 10).unwrap();
        for x in [0.0, 0.3, 1.0] {
            assert_eq!(vf.value(&DVector::from_vec(vec![1.0 - x, x])), 0.0);
        }
    }

    #[test]
    fn single_state_geometric() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let p = Pomdp::new(
            vec![one.clone(), one.clone()],
            vec![one.clone(), one],
            DVector::from_element(1, 1.0),
            DMatrix::from_row_slice(1, 2, &[0.5, 2.0]),
        )
        .unwrap();
        let (gamma, h) = (0.8, 7);
        let vf = exact_value_iteration(&p, gamma, h).unwrap();
        let expected = 2.0 * (1.0 - gamma.powi(h as i32)) / (1.0 - gamma);
        assert!((vf.value(&DVector::from_element(1, 1.0)) - expected).abs() < 1e-12);
    }

    #[test]
    fn size_limit() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let p = Pomdp::random(7, 2, 2, &mut rng);
        assert!(matches!(exact_value_iteration(&p, 0.9, 2), Err(Error::SizeLimit(_))));
    }

    #[test]
    fn tiger_one_step() {
        // One step: listen (-1) unless confident enough to open.
        let vf = exact_value_iteration(&Pomdp::tiger(), 0.8, 1).unwrap();
        let v = |p: f64| vf.value(&DVector::from_vec(vec![1.0 - p, p]));
        assert_eq!(v(0.5), -1.0);
        assert_eq!(v(1.0), 10.0);
        assert_eq!(v(0.0), 10.0);
    }

    #[test]
    fn envelope_matches_brute_force_max() {
        let v: Vec<Tagged> = [[0.0, 1.0], [1.0, 0.0], [0.4, 0.4], [0.6, 0.6], [-1.0, 2.0]]
            .iter()
            .map(|a| Tagged {
                alpha: DVector::from_vec(a.to_vec()),
                action: 0,
            })
            .collect();
        let kept = line_envelope(remove_dominated(v.clone()));
        for i in 0..=100 {
            let p = i as f64 / 100.0;
            let b = DVector::from_vec(vec![1.0 - p, p]);
            let full = v.iter().map(|t| t.alpha.dot(&b)).fold(f64::NEG_INFINITY, f64::max);
            let pruned = kept.iter().map(|t| t.alpha.dot(&b)).fold(f64::NEG_INFINITY, f64::max);
            assert!((full - pruned).abs() < 1e-12);
        }
        assert!(kept.len() < v.len());
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(simplex_grid(3).len(), 5151);
        assert!(simplex_grid(6).len() <= MAX_GRID_POINTS);
    }
}
