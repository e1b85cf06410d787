//! Experiment configuration: TOML with one table per pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tpsr_core::envs::ArenaConfig;
use tpsr_core::{Error, LearnConfig, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Paper,
    Desk,
}

impl std::str::FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            _ => Err(format!("unknown scale {s:?} (expected paper or desk)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Arena,
    Pomdp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub kind: EnvKind,
    /// POMDP spec file, relative paths resolved against the config file.
    pub spec: Option<PathBuf>,
    pub camera_res: usize,
    pub sigma_trans: f64,
    pub sigma_rot_deg: f64,
    pub goal_threshold: f64,
    pub obstacle_min: f64,
    pub obstacle_max: f64,
    pub wall_height: f64,
    pub camera_height: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        let a = ArenaConfig::default();
        Self {
            kind: EnvKind::Arena,
            spec: None,
            camera_res: a.camera_res,
            sigma_trans: a.sigma_trans,
            sigma_rot_deg: a.sigma_rot_deg,
            goal_threshold: a.goal_threshold,
            obstacle_min: a.obstacle_min,
            obstacle_max: a.obstacle_max,
            wall_height: a.wall_height,
            camera_height: a.camera_height,
        }
    }
}

impl EnvSection {
    pub fn arena(&self) -> ArenaConfig {
        ArenaConfig {
            camera_res: self.camera_res,
            sigma_trans: self.sigma_trans,
            sigma_rot_deg: self.sigma_rot_deg,
            goal_threshold: self.goal_threshold,
            obstacle_min: self.obstacle_min,
            obstacle_max: self.obstacle_max,
            wall_height: self.wall_height,
            camera_height: self.camera_height,
            ..ArenaConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    pub collect: u64,
    pub learn: u64,
    pub plan: u64,
    pub eval: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        Self {
            collect: 1,
            learn: 2,
            plan: 3,
            eval: 4,
        }
    }
}

impl SeedSection {
    /// Derives every stage seed from one root.
    pub fn from_root(root: u64) -> Self {
        Self {
            collect: root,
            learn: root.wrapping_add(1),
            plan: root.wrapping_add(2),
            eval: root.wrapping_add(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectSection {
    pub num_trajectories: usize,
    pub trajectory_len: usize,
    /// Share of trajectories (taken from the front) reserved for kernel centers.
    pub center_fraction: f64,
    /// Share used for moment estimation; with `center_fraction` sums to one.
    pub estimation_fraction: f64,
}

impl Default for CollectSection {
    fn default() -> Self {
        Self {
            num_trajectories: 10_000,
            trajectory_len: 7,
            center_fraction: 0.2,
            estimation_fraction: 0.8,
        }
    }
}

impl CollectSection {
    pub fn center_count(&self) -> usize {
        (self.num_trajectories as f64 * self.center_fraction).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Gaussian kernels over observation windows.
    Kernel,
    /// Exact indicators of discrete (action, observation) windows.
    Indicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSection {
    pub mode: FeatureMode,
    pub past_len: usize,
    pub future_len: usize,
    pub indicative_kernels: usize,
    pub characteristic_kernels: usize,
    pub observation_kernels: usize,
    /// Multiplier on the median-heuristic bandwidth.
    pub bandwidth_scale: f64,
    /// Fixed whitened-space bandwidth for every kernel set, overriding the
    /// heuristic.
    pub bandwidth: Option<f64>,
    /// Extra bandwidth multiplier for the indicative and characteristic
    /// kernels only.
    pub window_bandwidth_scale: f64,
    /// Relative eigenvalue floor of the PCA whitening.
    pub whitening_floor: f64,
}

impl Default for FeatureSection {
    fn default() -> Self {
        Self {
            mode: FeatureMode::Kernel,
            past_len: 3,
            future_len: 3,
            indicative_kernels: 2000,
            characteristic_kernels: 2000,
            observation_kernels: 500,
            bandwidth_scale: 1.0,
            bandwidth: None,
            window_bandwidth_scale: 1.0,
            whitening_floor: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnSection {
    pub rank: usize,
    pub pinv_rel_tol: f64,
    pub stride: usize,
    pub burn_in: usize,
}

impl Default for LearnSection {
    fn default() -> Self {
        let d = LearnConfig::default();
        Self {
            rank: d.rank,
            pinv_rel_tol: d.pinv_rel_tol,
            stride: d.stride,
            burn_in: d.burn_in,
        }
    }
}

impl LearnSection {
    pub fn learn_config(&self) -> LearnConfig {
        LearnConfig {
            rank: self.rank,
            svd_tail_report: true,
            pinv_rel_tol: self.pinv_rel_tol,
            stride: self.stride,
            burn_in: self.burn_in,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerSection {
    pub gamma: f64,
    /// Maximum number of Perseus stages.
    pub horizon: usize,
    /// Points backed up per draw: `0` means every point (plain PBVI).
    pub perseus_subset: usize,
    pub improvement_tol: f64,
    pub anti_stall: bool,
}

impl Default for PlannerSection {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            horizon: 10,
            perseus_subset: 1,
            improvement_tol: 1e-6,
            anti_stall: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub goal: String,
    pub goal_reward: f64,
    pub collision_reward: f64,
    pub default_reward: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            goal: "blue_wall".into(),
            goal_reward: 1000.0,
            collision_reward: -1.0,
            default_reward: 0.0,
        }
    }
}

impl RewardSection {
    pub fn reward(&self, goal: bool, collided: bool) -> f64 {
        if goal {
            self.goal_reward
        } else if collided {
            self.collision_reward
        } else {
            self.default_reward
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub episodes: usize,
    pub max_steps: usize,
    /// Random action-observation pairs folded into `b1` before acting.
    pub warmup_steps: usize,
    pub astar: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: 100,
            max_steps: 100,
            warmup_steps: 3,
            astar: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvSection,
    pub seeds: SeedSection,
    pub collect: CollectSection,
    pub features: FeatureSection,
    pub learn: LearnSection,
    pub planner: PlannerSection,
    pub reward: RewardSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Scale::Paper)
    }
}

impl ExperimentConfig {
    pub fn preset(scale: Scale) -> Self {
        let paper = Self {
            env: EnvSection::default(),
            seeds: SeedSection::default(),
            collect: CollectSection::default(),
            features: FeatureSection::default(),
            learn: LearnSection::default(),
            planner: PlannerSection::default(),
            reward: RewardSection::default(),
            eval: EvalSection::default(),
        };
        match scale {
            Scale::Paper => paper,
            Scale::Desk => Self {
                env: EnvSection {
                    camera_res: 8,
                    ..paper.env
                },
                // Longer runs give more windows per trajectory; broad window
                // kernels without whitening keep the small model plannable.
                collect: CollectSection {
                    num_trajectories: 5000,
                    trajectory_len: 14,
                    ..paper.collect
                },
                features: FeatureSection {
                    indicative_kernels: 800,
                    characteristic_kernels: 800,
                    observation_kernels: 200,
                    window_bandwidth_scale: 5.0,
                    whitening_floor: 1.0,
                    ..paper.features
                },
                ..paper
            },
        }
    }

    /// Parses TOML on top of the preset for `scale`: keys absent from the
    /// text keep the preset value.
    pub fn from_toml(text: &str, scale: Scale) -> Result<Self> {
        let base = toml::Value::try_from(Self::preset(scale)).map_err(|e| Error::Format(e.to_string()))?;
        let over: toml::Value = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        let merged = merge(base, over);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, scale: Scale) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text, scale)?;
        if let (Some(spec), Some(dir)) = (cfg.env.spec.as_mut(), path.parent()) {
            if spec.is_relative() {
                *spec = dir.join(&*spec);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.env.kind == EnvKind::Pomdp && self.env.spec.is_none() {
            return bad("env.kind = \"pomdp\" needs env.spec");
        }
        if self.env.kind == EnvKind::Arena {
            self.env.arena().validate()?;
            if self.features.mode == FeatureMode::Indicator {
                return bad("indicator features need a discrete (pomdp) environment");
            }
        }
        let c = &self.collect;
        if c.num_trajectories == 0 || c.trajectory_len == 0 {
            return bad("collect counts must be positive");
        }
        if c.center_fraction < 0.0 || c.estimation_fraction <= 0.0 {
            return bad("collect fractions must be nonnegative, estimation positive");
        }
        if (c.center_fraction + c.estimation_fraction - 1.0).abs() > 1e-9 {
            return bad("collect.center_fraction + collect.estimation_fraction must equal 1");
        }
        let f = &self.features;
        if f.past_len == 0 || f.future_len == 0 {
            return bad("feature windows must be at least one step");
        }
        if f.past_len + 1 + f.future_len > c.trajectory_len {
            return bad("trajectories are shorter than past + pivot + future");
        }
        if f.mode == FeatureMode::Kernel {
            if f.indicative_kernels == 0 || f.characteristic_kernels == 0 || f.observation_kernels == 0 {
                return bad("kernel counts must be positive");
            }
            if c.center_count() == 0 {
                return bad("kernel features need center trajectories");
            }
            if !(f.bandwidth_scale > 0.0 && f.window_bandwidth_scale > 0.0) || f.bandwidth.is_some_and(|h| !(h > 0.0)) {
                return bad("bandwidths must be positive");
            }
            if !(f.whitening_floor > 0.0 && f.whitening_floor <= 1.0) {
                return bad("features.whitening_floor must lie in (0, 1]");
            }
        }
        self.learn.learn_config().validate()?;
        let p = &self.planner;
        if !(p.gamma > 0.0 && p.gamma < 1.0) {
            return bad("planner.gamma must lie in (0, 1)");
        }
        if p.horizon == 0 || !(p.improvement_tol > 0.0) {
            return bad("planner.horizon and planner.improvement_tol must be positive");
        }
        if self.env.kind == EnvKind::Arena && self.reward.goal != "blue_wall" {
            return bad("the only arena goal is \"blue_wall\"");
        }
        if self.eval.episodes == 0 {
            return bad("eval.episodes must be positive");
        }
        Ok(())
    }
}

fn merge(base: toml::Value, over: toml::Value) -> toml::Value {
    match (base, over) {
        (toml::Value::Table(mut b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, o) => o,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ExperimentConfig::preset(Scale::Paper).validate().unwrap();
        ExperimentConfig::preset(Scale::Desk).validate().unwrap();
    }

    #[test]
    fn toml_overrides_preset() {
        let cfg = ExperimentConfig::from_toml("[learn]\nrank = 7\n", Scale::Desk).unwrap();
        assert_eq!(cfg.learn.rank, 7);
        assert_eq!(cfg.features.indicative_kernels, 800);
        assert_eq!(cfg.env.camera_res, 8);
    }

    #[test]
    fn round_trip() {
        let cfg = ExperimentConfig::preset(Scale::Desk);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text, Scale::Paper).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_split() {
        let err = ExperimentConfig::from_toml("[collect]\ncenter_fraction = 0.5\n", Scale::Desk).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(ExperimentConfig::from_toml("[learn]\nrnak = 3\n", Scale::Desk).is_err());
    }
}
