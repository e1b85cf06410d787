//! Action-observation trajectories and their text file format.
//!
//! ```text
//! PSRTRAJ v1 <obs_dim> <num_actions>
//! <action>, <o_1>, ..., <o_d>
//! ...
//!
//! <action>, <o_1>, ..., <o_d>
//! ```
//!
//! A blank line separates trajectories. Floats are written in Rust's
//! shortest round-trip form, so reading back is exact.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::DVector;

use crate::{Error, Result};

pub const TRAJECTORY_MAGIC: &str = "PSRTRAJ";
pub const TRAJECTORY_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrajectoryMeta {
    pub env_id: String,
    pub seed: u64,
    /// The trajectory starts from a reset rather than continuing the previous one.
    pub reset: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<(usize, DVector<f64>)>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn actions(&self) -> Vec<usize> {
        self.records.iter().map(|(a, _)| *a).collect()
    }

    pub fn observations(&self) -> Vec<&DVector<f64>> {
        self.records.iter().map(|(_, o)| o).collect()
    }

    /// Observation indices for one-hot payloads.
    pub fn discrete_observations(&self) -> Vec<usize> {
        self.records
            .iter()
            .map(|(_, o)| crate::features::discrete_index(o))
            .collect()
    }
}

/// Writes trajectories; every payload must have length `obs_dim` and every
/// action must be below `num_actions`.
pub fn write_trajectories<W: Write>(mut w: W, trajs: &[Trajectory], obs_dim: usize, num_actions: usize) -> Result<()> {
    writeln!(w, "{TRAJECTORY_MAGIC} {TRAJECTORY_VERSION} {obs_dim} {num_actions}")?;
    let mut line = String::new();
    for (i, t) in trajs.iter().enumerate() {
        if t.is_empty() {
            return Err(Error::invalid(format!("trajectory {i} is empty")));
        }
        if i > 0 {
            writeln!(w)?;
        }
        for (a, o) in &t.records {
            if *a >= num_actions {
                return Err(Error::invalid(format!("action {a} out of range in trajectory {i}")));
            }
            if o.len() != obs_dim {
                return Err(Error::dims(format!(
                    "payload of length {} in trajectory {i}, expected {obs_dim}",
                    o.len()
                )));
            }
            line.clear();
            write!(line, "{a}").unwrap();
            for x in o.iter() {
                if !x.is_finite() {
                    return Err(Error::NonFinite("trajectory payload"));
                }
                write!(line, ", {x}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

/// Header fields of a trajectory file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrajectoryHeader {
    pub obs_dim: usize,
    pub num_actions: usize,
}

pub fn read_trajectories<R: BufRead>(r: R, env_id: &str) -> Result<(TrajectoryHeader, Vec<Trajectory>)> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::format("empty trajectory file"))??;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != TRAJECTORY_MAGIC || parts[1] != TRAJECTORY_VERSION {
        return Err(Error::format(format!("bad trajectory header {header:?}")));
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(format!("bad header field {s:?}")))
    };
    let hdr = TrajectoryHeader {
        obs_dim: parse_dim(parts[2])?,
        num_actions: parse_dim(parts[3])?,
    };
    let mut trajs = Vec::new();
    let mut current = Vec::new();
    let finish = |current: &mut Vec<(usize, DVector<f64>)>, trajs: &mut Vec<Trajectory>| {
        if !current.is_empty() {
            trajs.push(Trajectory {
                records: std::mem::take(current),
                meta: TrajectoryMeta {
                    env_id: env_id.to_string(),
                    seed: 0,
                    reset: true,
                },
            });
        }
    };
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            finish(&mut current, &mut trajs);
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let bad = || Error::format(format!("line {}: malformed record", lineno + 2));
        let action: usize = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if action >= hdr.num_actions {
            return Err(Error::format(format!("line {}: action {action} out of range", lineno + 2)));
        }
        let obs: Vec<f64> = fields
            .map(|f| f.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if obs.len() != hdr.obs_dim {
            return Err(Error::format(format!(
                "line {}: payload has {} values, header says {}",
                lineno + 2,
                obs.len(),
                hdr.obs_dim
            )));
        }
        current.push((action, DVector::from_vec(obs)));
    }
    finish(&mut current, &mut trajs);
    Ok((hdr, trajs))
}
