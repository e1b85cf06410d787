//! Ground-truth environments: discrete POMDPs with exact oracles and the
//! simulated vision robot arena.

pub mod arena;
pub mod astar;
pub mod exact_vi;
pub mod pomdp;
pub mod pomdp_spec;
pub mod trajectory;

pub use arena::{ArenaConfig, Pose, VisionArena};
pub use pomdp::{forward_probability, pomdp_rollout, pomdp_sample, pomdp_to_psr, OraclePsr, Policy, Pomdp};
pub use pomdp_spec::{format_pomdp_spec, parse_pomdp_spec};
pub use trajectory::{Trajectory, TrajectoryMeta};
