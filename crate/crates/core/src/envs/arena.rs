//! Simulated mobile robot with a forward-facing camera in a square arena
//! with four colored walls and a central square obstacle.
//!
//! The robot is a disc. Each action optionally rotates by ±15° and
//! optionally drives one unit forward; both parts are perturbed by Gaussian
//! noise. Motion that would penetrate a wall or the obstacle stops just
//! before contact.
//!
//! Images are rendered by casting one ray per pixel through a focal plane
//! one unit ahead of the camera. Walls and obstacle have finite height; rays
//! that miss them hit the black floor or ceiling.

use std::f64::consts::{PI, TAU};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::trajectory::{Trajectory, TrajectoryMeta};
use crate::{Error, Result};

pub const NUM_ACTIONS: usize = 6;
pub const TURN_DEG: f64 = 15.0;

pub type Rgb = [f64; 3];
pub const RED: Rgb = [1.0, 0.0, 0.0];
pub const GREEN: Rgb = [0.0, 1.0, 0.0];
pub const BLUE: Rgb = [0.0, 0.0, 1.0];
pub const YELLOW: Rgb = [1.0, 1.0, 0.0];
pub const MAGENTA: Rgb = [1.0, 0.0, 1.0];
pub const BLACK: Rgb = [0.0, 0.0, 0.0];

/// Surfaces a camera ray can end on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Surface {
    /// y = 0
    South,
    /// x = side
    East,
    /// y = side
    North,
    /// x = 0
    West,
    Obstacle,
    FloorOrCeiling,
}

impl Surface {
    pub fn color(self) -> Rgb {
        match self {
            Surface::South => RED,
            Surface::East => GREEN,
            Surface::North => BLUE,
            Surface::West => YELLOW,
            Surface::Obstacle => MAGENTA,
            Surface::FloorOrCeiling => BLACK,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArenaConfig {
    pub side: f64,
    pub robot_radius: f64,
    /// Obstacle occupies `[obstacle_min, obstacle_max]²`.
    pub obstacle_min: f64,
    pub obstacle_max: f64,
    pub wall_height: f64,
    pub camera_height: f64,
    /// Camera is `camera_res × camera_res` RGB.
    pub camera_res: usize,
    pub fov_deg: f64,
    pub sigma_trans: f64,
    pub sigma_rot_deg: f64,
    /// Goal: mean per-pixel RGB distance to an all-blue image at most this.
    pub goal_threshold: f64,
}

impl Default for ArenaConfig {
    fn default() -> Self {
        Self {
            side: 45.0,
            robot_radius: 2.0,
            obstacle_min: 18.0,
            obstacle_max: 27.0,
            wall_height: 8.0,
            camera_height: 4.0,
            camera_res: 16,
            fov_deg: 45.0,
            sigma_trans: 0.1,
            sigma_rot_deg: 1.0,
            goal_threshold: 0.1,
        }
    }
}

impl ArenaConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.robot_radius;
        if !(self.side > 4.0 * r && r > 0.0) {
            return Err(Error::invalid("arena must be larger than the robot"));
        }
        if !(self.obstacle_min < self.obstacle_max && self.obstacle_min >= 0.0 && self.obstacle_max <= self.side) {
            return Err(Error::invalid("obstacle must be a nonempty square inside the arena"));
        }
        if self.camera_res == 0 || !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::invalid("camera needs pixels and a field of view in (0, 180)"));
        }
        if !(self.wall_height > 0.0 && self.camera_height > 0.0 && self.camera_height < self.wall_height) {
            return Err(Error::invalid("camera must sit between floor and wall top"));
        }
        if self.sigma_trans < 0.0 || self.sigma_rot_deg < 0.0 {
            return Err(Error::invalid("noise scales must be nonnegative"));
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.camera_res * self.camera_res * 3
    }

    /// Same arena without motion noise.
    pub fn noise_free(&self) -> Self {
        Self {
            sigma_trans: 0.0,
            sigma_rot_deg: 0.0,
            ..self.clone()
        }
    }

    /// Distance from a point to the obstacle square (0 inside).
    pub fn obstacle_distance(&self, x: f64, y: f64) -> f64 {
        let dx = (self.obstacle_min - x).max(0.0).max(x - self.obstacle_max);
        let dy = (self.obstacle_min - y).max(0.0).max(y - self.obstacle_max);
        dx.hypot(dy)
    }

    /// True if a robot centered at `(x, y)` overlaps nothing.
    pub fn is_free(&self, x: f64, y: f64) -> bool {
        let r = self.robot_radius;
        x >= r && x <= self.side - r && y >= r && y <= self.side - r && self.obstacle_distance(x, y) >= r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Heading in radians, in `[0, 2π)`; 0 faces east, π/2 faces north.
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: theta.rem_euclid(TAU),
        }
    }
}

/// Splits an action id into (drive forward, rotation in degrees).
pub fn decode_action(action: usize) -> Result<(bool, f64)> {
    if action >= NUM_ACTIONS {
        return Err(Error::invalid(format!("arena action {action} out of range")));
    }
    let forward = action >= 3;
    let rot = (action % 3) as f64 - 1.0;
    Ok((forward, rot * TURN_DEG))
}

/// Result of one simulated action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub pose: Pose,
    pub collided: bool,
}

/// Rotates, then translates along the new heading. Translation noise is
/// isotropic and applied even when not driving, rotation noise always.
pub fn arena_step<R: Rng + ?Sized>(cfg: &ArenaConfig, pose: Pose, action: usize, rng: &mut R) -> Result<StepOutcome> {
    let (forward, rot_deg) = decode_action(action)?;
    let rot_noise = if cfg.sigma_rot_deg > 0.0 {
        Normal::new(0.0, cfg.sigma_rot_deg).unwrap().sample(rng)
    } else {
        0.0
    };
    let theta = (pose.theta + (rot_deg + rot_noise).to_radians()).rem_euclid(TAU);
    let dist = if forward { 1.0 } else { 0.0 };
    let (nx, ny) = if cfg.sigma_trans > 0.0 {
        let n = Normal::new(0.0, cfg.sigma_trans).unwrap();
        (n.sample(rng), n.sample(rng))
    } else {
        (0.0, 0.0)
    };
    let dx = dist * theta.cos() + nx;
    let dy = dist * theta.sin() + ny;
    let (t, collided) = first_contact(cfg, pose.x, pose.y, dx, dy);
    Ok(StepOutcome {
        pose: Pose {
            x: pose.x + t * dx,
            y: pose.y + t * dy,
            theta,
        },
        collided,
    })
}

/// Gap kept between the robot and a surface after a truncated motion.
const CONTACT_EPS: f64 = 1e-6;

/// Largest fraction of the displacement `(dx, dy)` that keeps the robot free,
/// and whether the motion was cut short.
fn first_contact(cfg: &ArenaConfig, x: f64, y: f64, dx: f64, dy: f64) -> (f64, bool) {
    let len = dx.hypot(dy);
    if len == 0.0 {
        return (0.0, false);
    }
    let r = cfg.robot_radius;
    let mut t_hit = f64::INFINITY;
    // Outer walls: linear constraints.
    let lo = r;
    let hi = cfg.side - r;
    for (p, d) in [(x, dx), (y, dy)] {
        if d > 0.0 && p + d > hi {
            t_hit = t_hit.min((hi - p) / d);
        } else if d < 0.0 && p + d < lo {
            t_hit = t_hit.min((lo - p) / d);
        }
    }
    // Obstacle: distance to a convex set is convex along the segment, so the
    // clearance dips below r on at most one interval. Find its minimum, then
    // bisect for the first crossing before it.
    let clearance = |t: f64| cfg.obstacle_distance(x + t * dx, y + t * dy) - r;
    let (mut a, mut b) = (0.0f64, 1.0f64);
    for _ in 0..100 {
        let m1 = a + (b - a) / 3.0;
        let m2 = b - (b - a) / 3.0;
        if clearance(m1) <= clearance(m2) {
            b = m2;
        } else {
            a = m1;
        }
    }
    let t_min = 0.5 * (a + b);
    if clearance(t_min) < 0.0 {
        let (mut lo_t, mut hi_t) = (0.0, t_min);
        for _ in 0..100 {
            let m = 0.5 * (lo_t + hi_t);
            if clearance(m) >= 0.0 {
                lo_t = m;
            } else {
                hi_t = m;
            }
        }
        t_hit = t_hit.min(lo_t);
    }
    if t_hit >= 1.0 {
        return (1.0, false);
    }
    let t = (t_hit - CONTACT_EPS / len).max(0.0);
    (t, true)
}

/// Ray parameter and surface of the first wall or obstacle face hit by the
/// horizontal ray `p + s·d`, `s > 0`.
fn cast_2d(cfg: &ArenaConfig, px: f64, py: f64, dx: f64, dy: f64) -> (f64, Surface) {
    let mut best = (f64::INFINITY, Surface::FloorOrCeiling);
    let side = cfg.side;
    if dx > 0.0 {
        best = min_hit(best, ((side - px) / dx, Surface::East));
    } else if dx < 0.0 {
        best = min_hit(best, (-px / dx, Surface::West));
    }
    if dy > 0.0 {
        best = min_hit(best, ((side - py) / dy, Surface::North));
    } else if dy < 0.0 {
        best = min_hit(best, (-py / dy, Surface::South));
    }
    // Slab test against the obstacle.
    let (lo, hi) = (cfg.obstacle_min, cfg.obstacle_max);
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for (p, d) in [(px, dx), (py, dy)] {
        if d == 0.0 {
            if p < lo || p > hi {
                t_exit = f64::NEG_INFINITY;
            }
        } else {
            let t1 = (lo - p) / d;
            let t2 = (hi - p) / d;
            t_enter = t_enter.max(t1.min(t2));
            t_exit = t_exit.min(t1.max(t2));
        }
    }
    if t_enter <= t_exit && t_enter > 0.0 {
        best = min_hit(best, (t_enter, Surface::Obstacle));
    }
    best
}

fn min_hit(a: (f64, Surface), b: (f64, Surface)) -> (f64, Surface) {
    if b.0 < a.0 {
        b
    } else {
        a
    }
}

/// Surface seen by the pixel at `(row, col)`; row 0 is the top, column 0
/// the left edge.
pub fn pixel_surface(cfg: &ArenaConfig, pose: Pose, row: usize, col: usize) -> Surface {
    let n = cfg.camera_res as f64;
    let half = (cfg.fov_deg.to_radians() / 2.0).tan();
    let u = half * (1.0 - 2.0 * (col as f64 + 0.5) / n);
    let v = half * (1.0 - 2.0 * (row as f64 + 0.5) / n);
    let (s, c) = pose.theta.sin_cos();
    // Forward (c, s), left (-s, c).
    let dx = c - u * s;
    let dy = s + u * c;
    let (t, surface) = cast_2d(cfg, pose.x, pose.y, dx, dy);
    let h = cfg.camera_height + t * v;
    if h < 0.0 || h > cfg.wall_height {
        Surface::FloorOrCeiling
    } else {
        surface
    }
}

/// Row-major RGB image flattened as `[(row, col, channel)]`.
pub fn arena_render(cfg: &ArenaConfig, pose: Pose) -> DVector<f64> {
    let n = cfg.camera_res;
    let mut img = DVector::zeros(n * n * 3);
    for row in 0..n {
        for col in 0..n {
            let rgb = pixel_surface(cfg, pose, row, col).color();
            let base = (row * n + col) * 3;
            img[base] = rgb[0];
            img[base + 1] = rgb[1];
            img[base + 2] = rgb[2];
        }
    }
    img
}

/// Mean per-pixel Euclidean RGB distance to pure blue.
pub fn distance_to_blue(image: &DVector<f64>) -> f64 {
    let pixels = image.len() / 3;
    let total: f64 = (0..pixels)
        .map(|p| {
            let r = image[3 * p];
            let g = image[3 * p + 1];
            let b = image[3 * p + 2] - 1.0;
            (r * r + g * g + b * b).sqrt()
        })
        .sum();
    total / pixels as f64
}

pub fn is_goal_image(cfg: &ArenaConfig, image: &DVector<f64>) -> bool {
    distance_to_blue(image) <= cfg.goal_threshold
}

pub fn is_goal_pose(cfg: &ArenaConfig, pose: Pose) -> bool {
    is_goal_image(cfg, &arena_render(cfg, pose))
}

/// Reward attached to a step: reaching the goal view beats everything,
/// otherwise collisions cost one.
pub fn step_reward(goal: bool, collided: bool) -> f64 {
    if goal {
        GOAL_REWARD
    } else if collided {
        COLLISION_REWARD
    } else {
        0.0
    }
}

pub const GOAL_REWARD: f64 = 1000.0;
pub const COLLISION_REWARD: f64 = -1.0;

/// Uniformly random collision-free pose.
pub fn random_pose<R: Rng + ?Sized>(cfg: &ArenaConfig, rng: &mut R) -> Pose {
    loop {
        let x = rng.random_range(0.0..cfg.side);
        let y = rng.random_range(0.0..cfg.side);
        let theta = rng.random_range(0.0..TAU);
        if cfg.is_free(x, y) {
            return Pose::new(x, y, theta);
        }
    }
}

/// Simulator state for one episode.
#[derive(Debug, Clone)]
pub struct VisionArena {
    pub config: ArenaConfig,
    pub pose: Pose,
}

impl VisionArena {
    pub fn new(config: ArenaConfig, pose: Pose) -> Result<Self> {
        config.validate()?;
        if !config.is_free(pose.x, pose.y) {
            return Err(Error::invalid(format!("pose ({}, {}) intersects the scene", pose.x, pose.y)));
        }
        Ok(Self { config, pose })
    }

    pub fn observe(&self) -> DVector<f64> {
        arena_render(&self.config, self.pose)
    }

    /// Acts, then returns the new image and the collision flag.
    pub fn step<R: Rng + ?Sized>(&mut self, action: usize, rng: &mut R) -> Result<(DVector<f64>, bool)> {
        let out = arena_step(&self.config, self.pose, action, rng)?;
        self.pose = out.pose;
        Ok((self.observe(), out.collided))
    }
}

/// One exploration trajectory with per-step collision flags and rewards.
#[derive(Debug, Clone)]
pub struct ArenaRollout {
    pub trajectory: Trajectory,
    pub collisions: Vec<bool>,
    pub rewards: Vec<f64>,
    pub start: Pose,
}

/// Uniformly random actions from a uniformly random pose.
pub fn arena_rollout<R: Rng + ?Sized>(cfg: &ArenaConfig, length: usize, seed: u64, rng: &mut R) -> Result<ArenaRollout> {
    if length == 0 {
        return Err(Error::invalid("trajectory length must be at least 1"));
    }
    let start = random_pose(cfg, rng);
    let mut env = VisionArena::new(cfg.clone(), start)?;
    let mut records = Vec::with_capacity(length);
    let mut collisions = Vec::with_capacity(length);
    let mut rewards = Vec::with_capacity(length);
    for _ in 0..length {
        let a = rng.random_range(0..NUM_ACTIONS);
        let (img, collided) = env.step(a, rng)?;
        rewards.push(step_reward(is_goal_image(cfg, &img), collided));
        collisions.push(collided);
        records.push((a, img));
    }
    Ok(ArenaRollout {
        trajectory: Trajectory {
            records,
            meta: TrajectoryMeta {
                env_id: "arena".into(),
                seed,
                reset: true,
            },
        },
        collisions,
        rewards,
        start,
    })
}

/// Wraps an angle difference into `(-π, π]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    if d > PI {
        d - TAU
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quiet() -> ArenaConfig {
        ArenaConfig::default().noise_free()
    }

    #[test]
    fn facing_wall_up_close_fills_frame() {
        let cfg = quiet();
        let img = arena_render(&cfg, Pose::new(10.0, cfg.side - 3.0, PI / 2.0));
        assert_eq!(distance_to_blue(&img), 0.0);
        assert!(is_goal_image(&cfg, &img));
        let img = arena_render(&cfg, Pose::new(3.0, 10.0, PI));
        assert!(img.as_slice().chunks(3).all(|p| p == YELLOW));
    }

    #[test]
    fn render_is_deterministic_and_partitioned() {
        let cfg = quiet();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let colors = [RED, GREEN, BLUE, YELLOW, MAGENTA, BLACK];
        for _ in 0..50 {
            let p = random_pose(&cfg, &mut rng);
            let a = arena_render(&cfg, p);
            assert_eq!(a, arena_render(&cfg, p));
            for px in a.as_slice().chunks(3) {
                assert!(colors.iter().any(|c| c == px));
            }
        }
    }

    #[test]
    fn zero_motion_keeps_pose() {
        let cfg = quiet();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Pose::new(10.0, 10.0, 1.0);
        let out = arena_step(&cfg, p, 1, &mut rng).unwrap();
        assert_eq!(out.pose, p);
        assert!(!out.collided);
    }

    #[test]
    fn forward_in_open_space() {
        let cfg = quiet();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Pose::new(10.0, 10.0, 0.3);
        let out = arena_step(&cfg, p, 4, &mut rng).unwrap();
        assert!((out.pose.x - (10.0 + 0.3f64.cos())).abs() < 1e-12);
        assert!((out.pose.y - (10.0 + 0.3f64.sin())).abs() < 1e-12);
        assert!(!out.collided);
        let turned = arena_step(&cfg, p, 5, &mut rng).unwrap();
        assert!((angle_diff(turned.pose.theta, 0.3) - 15f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn driving_into_wall_stops_at_radius() {
        let cfg = quiet();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Pose::new(10.0, 30.0, PI / 2.0);
        let mut last = false;
        for _ in 0..30 {
            let out = arena_step(&cfg, p, 4, &mut rng).unwrap();
            p = out.pose;
            last = out.collided;
        }
        assert!(last);
        assert!((cfg.side - p.y - cfg.robot_radius).abs() < 1e-5);
        assert!(cfg.is_free(p.x, p.y));
    }

    #[test]
    fn obstacle_blocks_motion() {
        let cfg = quiet();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Pose::new(10.0, 22.5, 0.0);
        for _ in 0..20 {
            p = arena_step(&cfg, p, 4, &mut rng).unwrap().pose;
        }
        assert!((cfg.obstacle_min - p.x - cfg.robot_radius).abs() < 1e-5);
    }
}
