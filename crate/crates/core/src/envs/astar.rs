//! Shortest action sequences in the noise-free arena by A* search.
//!
//! Poses stay continuous (motion is simulated exactly, including contact
//! truncation), but the closed set is keyed on unit position cells and the
//! 24 headings reachable from the start heading in 15° turns.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};

use ordered_float::OrderedFloat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::arena::{angle_diff, arena_step, is_goal_pose, ArenaConfig, Pose, NUM_ACTIONS, TURN_DEG};
use crate::{Error, Result};

/// Number of distinct headings reachable by 15° turns.
pub const NUM_HEADINGS: usize = 24;

/// Default cap on node expansions before giving up.
pub const MAX_EXPANSIONS: usize = 2_000_000;

fn cell_key(pose: Pose, theta0: f64) -> (i64, i64, usize) {
    let k = (angle_diff(pose.theta, theta0) / TURN_DEG.to_radians()).round() as i64;
    (
        pose.x.floor() as i64,
        pose.y.floor() as i64,
        k.rem_euclid(NUM_HEADINGS as i64) as usize,
    )
}

/// Minimum number of actions from `start` to a pose satisfying `goal`.
/// `heuristic` must not overestimate the remaining action count.
pub fn astar_optimal_steps(
    cfg: &ArenaConfig,
    start: Pose,
    goal: &dyn Fn(Pose) -> bool,
    heuristic: &dyn Fn(Pose) -> f64,
    max_expansions: usize,
) -> Result<usize> {
    let cfg = cfg.noise_free();
    // Noise-free steps never draw from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut open = BinaryHeap::new();
    let mut closed = HashSet::new();
    let mut counter = 0u64;
    open.push(Reverse((OrderedFloat(heuristic(start)), 0usize, counter, PoseKey(start))));
    let mut expansions = 0;
    while let Some(Reverse((_, g, _, PoseKey(pose)))) = open.pop() {
        if !closed.insert(cell_key(pose, start.theta)) {
            continue;
        }
        if goal(pose) {
            return Ok(g);
        }
        expansions += 1;
        if expansions > max_expansions {
            break;
        }
        for a in 0..NUM_ACTIONS {
            let next = arena_step(&cfg, pose, a, &mut rng)?.pose;
            if closed.contains(&cell_key(next, start.theta)) {
                continue;
            }
            counter += 1;
            let f = (g + 1) as f64 + heuristic(next);
            open.push(Reverse((OrderedFloat(f), g + 1, counter, PoseKey(next))));
        }
    }
    Err(Error::Unreachable)
}

/// Heap payload; ordering is decided by the preceding tuple fields.
#[derive(Debug, Clone, Copy)]
struct PoseKey(Pose);

impl PartialEq for PoseKey {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}
impl Eq for PoseKey {}
impl PartialOrd for PoseKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for PoseKey {
    fn cmp(&self, _: &Self) -> std::cmp::Ordering {
        std::cmp::Ordering::Equal
    }
}

/// A* for the blue-wall goal, with a distance heuristic built from the unit
/// cells whose centers see the goal at some heading.
#[derive(Debug, Clone)]
pub struct AstarOracle {
    cfg: ArenaConfig,
    side_cells: usize,
    /// Euclidean distance from each cell center to the nearest goal cell center.
    distance: Vec<f64>,
}

/// Headings sampled per cell when locating goal cells.
const GOAL_SCAN_HEADINGS: usize = 72;

impl AstarOracle {
    pub fn new(cfg: &ArenaConfig) -> Self {
        let cfg = cfg.noise_free();
        let side_cells = cfg.side.ceil() as usize;
        let mut goal_cells = Vec::new();
        for ix in 0..side_cells {
            for iy in 0..side_cells {
                let (x, y) = (ix as f64 + 0.5, iy as f64 + 0.5);
                if !cfg.is_free(x, y) {
                    continue;
                }
                let hit = (0..GOAL_SCAN_HEADINGS).any(|k| {
                    let theta = k as f64 * std::f64::consts::TAU / GOAL_SCAN_HEADINGS as f64;
                    is_goal_pose(&cfg, Pose::new(x, y, theta))
                });
                if hit {
                    goal_cells.push((x, y));
                }
            }
        }
        let mut distance = vec![f64::INFINITY; side_cells * side_cells];
        for ix in 0..side_cells {
            for iy in 0..side_cells {
                let (x, y) = (ix as f64 + 0.5, iy as f64 + 0.5);
                distance[ix * side_cells + iy] = goal_cells
                    .iter()
                    .map(|&(gx, gy)| (gx - x).hypot(gy - y))
                    .fold(f64::INFINITY, f64::min);
            }
        }
        Self {
            cfg,
            side_cells,
            distance,
        }
    }

    /// Lower bound on remaining actions: each action moves at most one unit,
    /// and a goal pose can sit up to a cell diagonal away from the nearest
    /// goal cell center, as can the current pose from its own center.
    pub fn heuristic(&self, pose: Pose) -> f64 {
        let ix = (pose.x.floor().max(0.0) as usize).min(self.side_cells - 1);
        let iy = (pose.y.floor().max(0.0) as usize).min(self.side_cells - 1);
        let d = self.distance[ix * self.side_cells + iy];
        if d.is_finite() {
            (d - 2.0 * std::f64::consts::SQRT_2).max(0.0)
        } else {
            0.0
        }
    }

    pub fn optimal_steps(&self, start: Pose) -> Result<usize> {
        let goal = |p: Pose| is_goal_pose(&self.cfg, p);
        let h = |p: Pose| self.heuristic(p);
        astar_optimal_steps(&self.cfg, start, &goal, &h, MAX_EXPANSIONS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn start_at_goal_is_zero() {
        let cfg = ArenaConfig {
            camera_res: 8,
            ..ArenaConfig::default()
        };
        let oracle = AstarOracle::new(&cfg);
        let p = Pose::new(20.0, cfg.side - 3.0, PI / 2.0);
        assert!(is_goal_pose(&cfg, p));
        assert_eq!(oracle.optimal_steps(p).unwrap(), 0);
    }

    #[test]
    fn straight_corridor() {
        let cfg = ArenaConfig {
            camera_res: 8,
            ..ArenaConfig::default()
        }
        .noise_free();
        // Find where the goal first holds when facing north at x = 10.
        let (mut lo, mut hi) = (10.0, cfg.side - 3.0);
        for _ in 0..60 {
            let m = 0.5 * (lo + hi);
            if is_goal_pose(&cfg, Pose::new(10.0, m, PI / 2.0)) {
                hi = m;
            } else {
                lo = m;
            }
        }
        let start = Pose::new(10.0, hi - 4.5, PI / 2.0);
        let goal = |p: Pose| is_goal_pose(&cfg, p);
        let steps = astar_optimal_steps(&cfg, start, &goal, &|_| 0.0, MAX_EXPANSIONS).unwrap();
        assert_eq!(steps, 5);
    }

    #[test]
    fn unreachable_goal() {
        let cfg = ArenaConfig {
            camera_res: 4,
            ..ArenaConfig::default()
        };
        let r = astar_optimal_steps(&cfg, Pose::new(5.0, 5.0, 0.0), &|_| false, &|_| 0.0, 500);
        assert!(matches!(r, Err(Error::Unreachable)));
    }
}
