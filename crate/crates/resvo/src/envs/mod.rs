//! The three intertemporal-social-dilemma environments behind one interface:
//! reset, step with a joint action, render.

mod cleanup;
mod escape_room;
mod ipd;
pub mod render;

pub use cleanup::{apple_spawn_rate, parse_layout, CleanupEnv, CleanupState, Facing, Layout, Region, ACT_DOWN, ACT_FIRE_CLEAN, ACT_LEFT, ACT_RIGHT, ACT_STAY, ACT_UP};
pub use escape_room::{EscapeRoomEnv, Position, EXIT_REWARD, MOVE_COST};
pub use ipd::{IpdEnv, COOPERATE, DEFECT, IPD_PAYOFFS};
pub use render::Frame;

use crate::core::{GridShape, Observation, RngStream};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called on a finished episode")]
    StepAfterDone,
    #[error("joint action has {got} entries, environment has {expected} agents")]
    JointActionLength { expected: usize, got: usize },
    #[error("agent {agent} chose action {action}, action space has {n_actions}")]
    ActionOutOfRange { agent: usize, action: usize, n_actions: usize },
    #[error("invalid environment config: {0}")]
    BadConfig(String),
    #[error("bad map layout: {0}")]
    BadLayout(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Ipd,
    EscapeRoom,
    Cleanup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanupMap {
    Small,
    Big,
}

/// Everything needed to construct one environment instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub num_agents: usize,
    pub horizon: usize,
    /// Escape room: agents that must hold the lever for the door to open.
    #[serde(default)]
    pub required_pullers: usize,
    #[serde(default = "default_map")]
    pub cleanup_map: CleanupMap,
    /// Inline map layout; overrides the built-in map when present.
    #[serde(default)]
    pub cleanup_layout: Option<String>,
    #[serde(default)]
    pub view_size: usize,
    #[serde(default)]
    pub apple_respawn_prob: f64,
    #[serde(default)]
    pub depletion_threshold: f64,
    #[serde(default)]
    pub restoration_threshold: f64,
    #[serde(default)]
    pub waste_spawn_prob: f64,
    #[serde(default)]
    pub apple_reward: f64,
}

fn default_map() -> CleanupMap {
    CleanupMap::Small
}

impl EnvConfig {
    pub fn ipd(horizon: usize) -> Self {
        EnvConfig {
            kind: EnvKind::Ipd,
            num_agents: 2,
            horizon,
            required_pullers: 0,
            cleanup_map: CleanupMap::Small,
            cleanup_layout: None,
            view_size: 0,
            apple_respawn_prob: 0.0,
            depletion_threshold: 0.0,
            restoration_threshold: 0.0,
            waste_spawn_prob: 0.0,
            apple_reward: 0.0,
        }
    }

    pub fn escape_room(num_agents: usize, required_pullers: usize, horizon: usize) -> Self {
        EnvConfig { kind: EnvKind::EscapeRoom, num_agents, required_pullers, ..Self::ipd(horizon) }
    }

    /// Small 10x10 map presets: view 7, 50 steps, respawn 0.3, depletion 0.4,
    /// restoration 0.0, waste spawn 0.5, apple reward 1.
    pub fn cleanup_small(num_agents: usize) -> Self {
        EnvConfig {
            kind: EnvKind::Cleanup,
            num_agents,
            horizon: 50,
            required_pullers: 0,
            cleanup_map: CleanupMap::Small,
            cleanup_layout: None,
            view_size: 7,
            apple_respawn_prob: 0.3,
            depletion_threshold: 0.4,
            restoration_threshold: 0.0,
            waste_spawn_prob: 0.5,
            apple_reward: 1.0,
        }
    }

    /// Big 48x18 map presets: view 15, 400 steps, respawn 0.15, depletion
    /// 0.99, restoration 0.0, waste spawn 0.15, apple reward 0.25.
    pub fn cleanup_big(num_agents: usize) -> Self {
        EnvConfig {
            kind: EnvKind::Cleanup,
            num_agents,
            horizon: 400,
            required_pullers: 0,
            cleanup_map: CleanupMap::Big,
            cleanup_layout: None,
            view_size: 15,
            apple_respawn_prob: 0.15,
            depletion_threshold: 0.99,
            restoration_threshold: 0.0,
            waste_spawn_prob: 0.15,
            apple_reward: 0.25,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.num_agents < 2 {
            return Err(EnvError::BadConfig("need at least 2 agents".into()));
        }
        if self.horizon == 0 {
            return Err(EnvError::BadConfig("horizon must be positive".into()));
        }
        match self.kind {
            EnvKind::Ipd => {
                if self.num_agents != 2 {
                    return Err(EnvError::BadConfig("ipd is a 2-agent game".into()));
                }
            }
            EnvKind::EscapeRoom => {
                if self.required_pullers == 0 || self.required_pullers >= self.num_agents {
                    return Err(EnvError::BadConfig(format!(
                        "escape room needs 0 < M < N, got M={} N={}",
                        self.required_pullers, self.num_agents
                    )));
                }
            }
            EnvKind::Cleanup => {
                if self.view_size == 0 || self.view_size % 2 == 0 {
                    return Err(EnvError::BadConfig("view_size must be odd and positive".into()));
                }
                if !(self.depletion_threshold > self.restoration_threshold) {
                    return Err(EnvError::BadConfig(
                        "depletion threshold must exceed restoration threshold".into(),
                    ));
                }
                for (name, p) in [
                    ("apple_respawn_prob", self.apple_respawn_prob),
                    ("waste_spawn_prob", self.waste_spawn_prob),
                ] {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(EnvError::BadConfig(format!("{name} must be in [0,1]")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-episode activity counters, one slot per agent.
#[derive(Debug, Clone, Default)]
pub struct EnvCounters {
    pub levers_pulled: Vec<f64>,
    pub door_exits: Vec<f64>,
    pub waste_cleaned: Vec<f64>,
    pub apples_collected: Vec<f64>,
}

impl EnvCounters {
    pub fn zeros(n: usize) -> Self {
        EnvCounters {
            levers_pulled: vec![0.0; n],
            door_exits: vec![0.0; n],
            waste_cleaned: vec![0.0; n],
            apples_collected: vec![0.0; n],
        }
    }
}

/// Result of one environment transition.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observations: Vec<Observation>,
    pub rewards: Vec<f64>,
    pub done: bool,
}

pub trait Environment {
    fn num_agents(&self) -> usize;
    fn num_actions(&self) -> usize;
    /// Length of the flat observation feature vector.
    fn obs_dim(&self) -> usize;
    /// Grid layout of the leading observation features, if convolutional.
    fn grid_shape(&self) -> Option<GridShape> {
        None
    }
    /// Size of the discrete observation space, if tabular-friendly.
    fn num_obs_states(&self) -> Option<usize> {
        None
    }
    fn reset(&mut self, rng: &mut RngStream) -> Vec<Observation>;
    fn step(&mut self, joint_action: &[usize], rng: &mut RngStream)
        -> Result<StepOutcome, EnvError>;
    fn render(&self) -> Frame;
    fn counters(&self) -> EnvCounters;
    fn is_done(&self) -> bool;
}

/// Builds the configured environment.
pub fn make_env(config: &EnvConfig) -> Result<Box<dyn Environment>, EnvError> {
    config.validate()?;
    Ok(match config.kind {
        EnvKind::Ipd => Box::new(IpdEnv::new(config.horizon)),
        EnvKind::EscapeRoom => Box::new(EscapeRoomEnv::new(
            config.num_agents,
            config.required_pullers,
            config.horizon,
        )),
        EnvKind::Cleanup => Box::new(CleanupEnv::new(config)?),
    })
}

pub(crate) fn validate_joint_action(
    joint: &[usize],
    num_agents: usize,
    num_actions: usize,
) -> Result<(), EnvError> {
    if joint.len() != num_agents {
        return Err(EnvError::JointActionLength { expected: num_agents, got: joint.len() });
    }
    for (agent, &a) in joint.iter().enumerate() {
        if a >= num_actions {
            return Err(EnvError::ActionOutOfRange { agent, action: a, n_actions: num_actions });
        }
    }
    Ok(())
}
