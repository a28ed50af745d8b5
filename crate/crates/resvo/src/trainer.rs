//! Interleaved role-based policy optimization and reward-sharing emergence.
//!
//! Each iteration follows the same shape: collect on-policy episodes, update
//! every policy with shaped returns *on the tape*, collect fresh episodes
//! under the updated policies, then step each orientation function along the
//! gradient of its extrinsic objective. Because the policy update stayed on
//! the tape, that gradient flows through three paths at once: through the
//! updated policy parameters, through the embeddings the policies condition
//! on, and through the low-rank penalty. The information regularizer adds
//! its own contribution, and everything is committed atomically at the end.

use crate::autodiff::{backward, NodeId, Shape, Tape};
use crate::checkpoint::{push_params, Checkpoint, CheckpointError};
use crate::core::{
    compute_returns, AgentId, CoreError, JointTrajectory, Observation, ReplayBuffer, RngStream,
    StepRecord, Trajectory,
};
use crate::envs::{make_env, EnvConfig, EnvCounters, EnvError, EnvKind, Environment, Frame};
use crate::mi::{mi_update, MiError, PosteriorNet};
use crate::params::Adam;
use crate::policy::{
    policy_gradient_update, sample_action_explored, value_update, ExplorationSchedule,
    PolicyArch, PolicyError, PolicyNet, PolicyNodes, PolicySpec, UpdateStep, ValueNet,
};
use crate::svo::{
    numerical_rank, rank_deltas, role_embedding_node, shape_rewards, shape_rewards_node,
    sharing_columns_to_wt, OrientationNet, OrientationNodes, RoleHistory, SvoError, SvoMatrix,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Svo(#[from] SvoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Mi(#[from] MiError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("metrics sink failed: {0}")]
    Sink(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyArchChoice {
    /// Dense nets for the matrix games, convolutional for the gridworld.
    Auto,
    Tabular,
    Dense,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Sharing frozen at the identity: everyone keeps its own reward.
    NoSharing,
    /// Sharing frozen at uniform ratios 1/N: everyone gets the mean reward.
    FixedProsocial,
}

impl std::str::FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no_sharing" => Ok(BaselineKind::NoSharing),
            "fixed_prosocial" => Ok(BaselineKind::FixedProsocial),
            other => Err(format!("unknown baseline '{other}'")),
        }
    }
}

/// All training hyperparameters for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_rank_k")]
    pub rank_k: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_one")]
    pub lambda_svo: f64,
    #[serde(default = "d_lambda_mi")]
    pub lambda_mi: f64,
    #[serde(default = "d_one")]
    pub lambda_p: f64,
    /// Role-embedding history length fed to policies.
    #[serde(default = "d_history_m")]
    pub history_m: usize,
    #[serde(default = "d_policy_lr")]
    pub policy_lr: f64,
    #[serde(default = "d_orientation_lr")]
    pub orientation_lr: f64,
    #[serde(default = "d_value_lr")]
    pub value_lr: f64,
    #[serde(default = "d_posterior_lr")]
    pub posterior_lr: f64,
    #[serde(default = "d_w_max")]
    pub w_max: f64,
    #[serde(default = "d_exploration")]
    pub exploration: ExplorationSchedule,
    #[serde(default = "d_episodes")]
    pub episodes_per_iteration: usize,
    #[serde(default = "d_iterations")]
    pub total_iterations: usize,
    #[serde(default = "d_buffer")]
    pub buffer_capacity: usize,
    #[serde(default = "d_mi_batch")]
    pub mi_batch: usize,
    #[serde(default = "d_mi_window")]
    pub mi_history_window: usize,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_conv_channels")]
    pub conv_channels: usize,
    #[serde(default = "d_arch")]
    pub policy_arch: PolicyArchChoice,
    /// Use a learned state-value baseline (defaults to on for the gridworld).
    #[serde(default)]
    pub critic: Option<bool>,
    #[serde(default = "d_rank_tolerance")]
    pub rank_tolerance: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_gamma() -> f64 {
    0.99
}
fn d_rank_k() -> usize {
    2
}
fn d_alpha() -> f64 {
    1e-2
}
fn d_one() -> f64 {
    1.0
}
fn d_lambda_mi() -> f64 {
    1e-2
}
fn d_history_m() -> usize {
    4
}
fn d_policy_lr() -> f64 {
    0.1
}
fn d_orientation_lr() -> f64 {
    1e-2
}
fn d_value_lr() -> f64 {
    1e-2
}
fn d_posterior_lr() -> f64 {
    1e-3
}
fn d_w_max() -> f64 {
    2.0
}
fn d_exploration() -> ExplorationSchedule {
    ExplorationSchedule { eps_start: 0.5, eps_end: 0.05, eps_div: 5000 }
}
fn d_episodes() -> usize {
    16
}
fn d_iterations() -> usize {
    100
}
fn d_buffer() -> usize {
    1000
}
fn d_mi_batch() -> usize {
    32
}
fn d_mi_window() -> usize {
    64
}
fn d_hidden() -> usize {
    32
}
fn d_conv_channels() -> usize {
    6
}
fn d_arch() -> PolicyArchChoice {
    PolicyArchChoice::Auto
}
fn d_rank_tolerance() -> f64 {
    1e-6
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults parse")
    }
}

impl TrainConfig {
    /// Per-task recommended settings: rank 1 and bound 3 for the two-player
    /// dilemma, rank 2 and bound 2 elsewhere.
    pub fn for_env(kind: EnvKind) -> Self {
        let mut cfg = TrainConfig::default();
        match kind {
            EnvKind::Ipd => {
                cfg.rank_k = 1;
                cfg.w_max = 3.0;
            }
            EnvKind::EscapeRoom | EnvKind::Cleanup => {
                cfg.rank_k = 2;
                cfg.w_max = 2.0;
            }
        }
        cfg
    }

    pub fn validate(&self, env: &EnvConfig) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0,1], got {}", self.gamma));
        }
        if self.rank_k == 0 || self.rank_k > env.num_agents {
            return bad(format!(
                "rank_k must be in [1, {}], got {}",
                env.num_agents, self.rank_k
            ));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda_svo", self.lambda_svo),
            ("lambda_mi", self.lambda_mi),
            ("lambda_p", self.lambda_p),
        ] {
            if v < 0.0 {
                return bad(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if self.history_m == 0 {
            return bad("history_m must be positive".into());
        }
        if self.episodes_per_iteration == 0 {
            return bad("episodes_per_iteration must be positive".into());
        }
        if self.w_max <= 0.0 {
            return bad(format!("w_max must be positive, got {}", self.w_max));
        }
        if self.rank_tolerance <= 0.0 {
            return bad("rank_tolerance must be positive".into());
        }
        self.exploration.validate().map_err(TrainError::BadConfig)?;
        Ok(())
    }

    fn resolve_arch(&self, kind: EnvKind) -> PolicyArch {
        match self.policy_arch {
            PolicyArchChoice::Tabular => PolicyArch::Tabular,
            PolicyArchChoice::Dense => PolicyArch::Dense,
            PolicyArchChoice::Conv => PolicyArch::Conv,
            PolicyArchChoice::Auto => match kind {
                EnvKind::Cleanup => PolicyArch::Conv,
                _ => PolicyArch::Dense,
            },
        }
    }

    fn resolve_critic(&self, kind: EnvKind) -> bool {
        self.critic.unwrap_or(kind == EnvKind::Cleanup)
    }
}

/// Per-iteration training metrics (means over the first rollout phase).
#[derive(Debug, Clone)]
pub struct IterationReport {
    pub iteration: usize,
    pub extrinsic_mean: Vec<f64>,
    pub shaped_mean: Vec<f64>,
    pub given_mean: Vec<f64>,
    pub received_mean: Vec<f64>,
    pub svo_rank_mean: f64,
    pub mi_loss: f64,
    pub steps_per_episode: f64,
    pub levers_pulled: Vec<f64>,
    pub door_exits: Vec<f64>,
    pub waste_cleaned: Vec<f64>,
    pub apples_collected: Vec<f64>,
}

impl IterationReport {
    pub fn assert_finite(&self) {
        let all = self
            .extrinsic_mean
            .iter()
            .chain(&self.shaped_mean)
            .chain(&self.given_mean)
            .chain(&self.received_mean)
            .chain([&self.svo_rank_mean, &self.mi_loss, &self.steps_per_episode]);
        for v in all {
            assert!(v.is_finite(), "non-finite metric in iteration {}", self.iteration);
        }
    }
}

/// One collected episode plus the sharing matrix used at every step.
#[derive(Debug, Clone)]
pub struct RolloutEpisode {
    pub traj: JointTrajectory,
    pub ws: Vec<SvoMatrix>,
    pub counters: EnvCounters,
}

#[derive(Debug, Clone)]
enum WMode {
    Learned,
    Fixed(SvoMatrix),
}

pub struct Trainer {
    pub env_config: EnvConfig,
    pub config: TrainConfig,
    baseline: Option<BaselineKind>,
    env: Box<dyn Environment>,
    policies: Vec<PolicyNet>,
    orientations: Vec<OrientationNet>,
    values: Option<Vec<ValueNet>>,
    posterior: PosteriorNet,
    buffer: ReplayBuffer,
    w_mode: WMode,
    orientation_opts: Vec<Adam>,
    value_opts: Vec<Adam>,
    posterior_opt: Adam,
    rng_env: RngStream,
    rng_explore: RngStream,
    rng_buffer: RngStream,
    episodes_seen: usize,
}

impl Trainer {
    pub fn new(
        env_config: EnvConfig,
        config: TrainConfig,
        baseline: Option<BaselineKind>,
    ) -> Result<Self, TrainError> {
        env_config.validate()?;
        config.validate(&env_config)?;
        let env = make_env(&env_config)?;
        let n = env.num_agents();
        let seed = config.seed;
        let rng_init = RngStream::new(seed, "policy-init");

        let arch = config.resolve_arch(env_config.kind);
        let spec = PolicySpec {
            arch,
            n_actions: env.num_actions(),
            obs_dim: env.obs_dim(),
            n_agents: n,
            m: config.history_m,
            hidden: config.hidden,
            grid: env.grid_shape(),
            n_obs_states: env.num_obs_states(),
            conv_channels: config.conv_channels,
        };
        let policies: Vec<PolicyNet> = (0..n)
            .map(|i| {
                let mut r = rng_init.fork(&format!("policy/{i}"));
                PolicyNet::init(spec.clone(), Some(&mut r))
            })
            .collect();
        let orientations: Vec<OrientationNet> = (0..n)
            .map(|i| {
                let mut r = rng_init.fork(&format!("orientation/{i}"));
                OrientationNet::random(
                    n,
                    env.obs_dim(),
                    env.num_actions(),
                    config.hidden,
                    config.w_max,
                    &mut r,
                )
            })
            .collect();
        let values: Option<Vec<ValueNet>> = if config.resolve_critic(env_config.kind) {
            Some(
                (0..n)
                    .map(|i| {
                        let mut r = rng_init.fork(&format!("value/{i}"));
                        ValueNet::init(
                            arch,
                            env.obs_dim(),
                            env.grid_shape(),
                            config.hidden,
                            config.conv_channels,
                            &mut r,
                        )
                    })
                    .collect(),
            )
        } else {
            None
        };
        let mut rng_post = rng_init.fork("posterior");
        let posterior = PosteriorNet::random(
            n,
            env.obs_dim(),
            env.num_actions(),
            config.mi_history_window,
            &mut rng_post,
        );

        let w_mode = match baseline {
            Some(BaselineKind::NoSharing) => WMode::Fixed(SvoMatrix::identity(n)),
            Some(BaselineKind::FixedProsocial) => WMode::Fixed(SvoMatrix::prosocial(n)),
            None => WMode::Learned,
        };

        let orientation_opts: Vec<Adam> =
            orientations.iter().map(|o| Adam::new(&o.params, config.orientation_lr)).collect();
        let value_opts: Vec<Adam> = match &values {
            Some(vs) => vs.iter().map(|v| Adam::new(&v.params, config.value_lr)).collect(),
            None => Vec::new(),
        };
        let posterior_opt = Adam::new(&posterior.params, config.posterior_lr);
        let buffer = ReplayBuffer::new(config.buffer_capacity, n)?;

        Ok(Trainer {
            env,
            policies,
            orientations,
            values,
            posterior,
            buffer,
            w_mode,
            orientation_opts,
            value_opts,
            posterior_opt,
            rng_env: RngStream::new(seed, "env"),
            rng_explore: RngStream::new(seed, "exploration"),
            rng_buffer: RngStream::new(seed, "buffer-sampling"),
            episodes_seen: 0,
            baseline,
            env_config,
            config,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.policies.len()
    }

    pub fn policies(&self) -> &[PolicyNet] {
        &self.policies
    }

    pub fn orientations(&self) -> &[OrientationNet] {
        &self.orientations
    }

    pub fn posterior(&self) -> &PosteriorNet {
        &self.posterior
    }

    pub fn baseline(&self) -> Option<BaselineKind> {
        self.baseline
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    fn previous_other_actions(
        episode_actions: &[Vec<usize>],
        t: usize,
        agent: usize,
        n: usize,
    ) -> Vec<Option<usize>> {
        (0..n)
            .filter(|&o| o != agent)
            .map(|o| if t == 0 { None } else { Some(episode_actions[t - 1][o]) })
            .collect()
    }

    /// Sharing matrix at the current step under the lagged-action convention.
    fn current_w(
        &self,
        observations: &[Observation],
        prev_joint: Option<&[usize]>,
    ) -> Result<SvoMatrix, TrainError> {
        match &self.w_mode {
            WMode::Fixed(w) => Ok(w.clone()),
            WMode::Learned => {
                let n = self.num_agents();
                let mut columns = Vec::with_capacity(n);
                for i in 0..n {
                    let others: Vec<Option<usize>> = (0..n)
                        .filter(|&o| o != i)
                        .map(|o| prev_joint.map(|p| p[o]))
                        .collect();
                    let (mean, _var) = self.orientations[i].eval(&observations[i], &others)?;
                    columns.push(mean);
                }
                Ok(SvoMatrix::from_sharing_vectors(&columns)?)
            }
        }
    }

    /// Collects episodes with the given policies, recording shaped rewards
    /// and the role embedding each policy consumed.
    fn rollout_with(
        &mut self,
        policies: &[PolicyNet],
        episodes: usize,
        eps_override: Option<f64>,
        mut frame_sink: Option<&mut dyn FnMut(usize, Frame)>,
    ) -> Result<Vec<RolloutEpisode>, TrainError> {
        let n = self.num_agents();
        let mut out = Vec::with_capacity(episodes);
        let mut frame_index = 0usize;
        for _ in 0..episodes {
            let eps = eps_override
                .unwrap_or_else(|| self.config.exploration.epsilon_at(self.episodes_seen));
            let mut observations = self.env.reset(&mut self.rng_env);
            if let Some(sink) = frame_sink.as_deref_mut() {
                sink(frame_index, self.env.render());
                frame_index += 1;
            }
            let mut histories: Vec<RoleHistory> =
                (0..n).map(|_| RoleHistory::new(n, self.config.history_m)).collect();
            let mut steps: Vec<Vec<StepRecord>> = vec![Vec::new(); n];
            let mut ws = Vec::new();
            let mut actions_log: Vec<Vec<usize>> = Vec::new();
            let mut prev_joint: Option<Vec<usize>> = None;

            loop {
                let w = self.current_w(&observations, prev_joint.as_deref())?;
                for (j, h) in histories.iter_mut().enumerate() {
                    h.push(w.role_embedding(j));
                }
                let mut joint = Vec::with_capacity(n);
                for j in 0..n {
                    let probs = policies[j].eval_probs(&observations[j], &histories[j].padded())?;
                    joint.push(sample_action_explored(&probs, eps, &mut self.rng_explore)?);
                }
                let outcome = self.env.step(&joint, &mut self.rng_env)?;
                if let Some(sink) = frame_sink.as_deref_mut() {
                    sink(frame_index, self.env.render());
                    frame_index += 1;
                }
                let shaped = shape_rewards(&w, &outcome.rewards)?;
                for j in 0..n {
                    steps[j].push(StepRecord {
                        observation: observations[j].clone(),
                        action: joint[j],
                        extrinsic_reward: outcome.rewards[j],
                        shaped_reward: shaped[j],
                        role_embedding: w.role_embedding(j),
                        done: outcome.done,
                    });
                }
                ws.push(w);
                actions_log.push(joint.clone());
                prev_joint = Some(joint);
                observations = outcome.observations;
                if outcome.done {
                    break;
                }
            }

            let horizon = self.env_config.horizon;
            let traj = JointTrajectory {
                agents: steps
                    .into_iter()
                    .enumerate()
                    .map(|(a, s)| Trajectory { agent: AgentId(a), steps: s, horizon })
                    .collect(),
            };
            let episode = RolloutEpisode { traj, ws, counters: self.env.counters() };
            debug_assert!(verify_ledger(&episode));
            self.episodes_seen += 1;
            out.push(episode);
        }
        Ok(out)
    }

    /// On-policy rollout with the committed parameters.
    pub fn rollout(&mut self, episodes: usize) -> Result<Vec<RolloutEpisode>, TrainError> {
        let policies = self.policies.clone();
        self.rollout_with(&policies, episodes, None, None)
    }

    /// Builds W^T nodes for one episode (eta-dependent when learning).
    fn episode_wt_nodes(
        &self,
        tape: &mut Tape,
        eta_leaves: Option<&[Vec<NodeId>]>,
        episode: &RolloutEpisode,
    ) -> Result<Vec<NodeId>, TrainError> {
        let n = self.num_agents();
        let len = episode.traj.len();
        let actions: Vec<Vec<usize>> = (0..len).map(|t| episode.traj.joint_action(t)).collect();
        let mut wts = Vec::with_capacity(len);
        for t in 0..len {
            let wt = match (eta_leaves, &self.w_mode) {
                (Some(eta), WMode::Learned) => {
                    let mut cols = Vec::with_capacity(n);
                    for i in 0..n {
                        let obs = &episode.traj.agents[i].steps[t].observation;
                        let prev = Self::previous_other_actions(&actions, t, i, n);
                        let nodes = OrientationNodes(eta[i].clone());
                        let (mean, _var) =
                            self.orientations[i].forward(tape, &nodes, obs, &prev)?;
                        cols.push(mean);
                    }
                    sharing_columns_to_wt(tape, &cols)
                }
                _ => {
                    let w = &episode.ws[t];
                    let mut flat = Vec::with_capacity(n * n);
                    for i in 0..n {
                        flat.extend(w.sharing_vector(i));
                    }
                    tape.constant(flat, Shape::new(n, n))
                }
            };
            wts.push(wt);
        }
        Ok(wts)
    }

    /// Embedding-history nodes (length m, oldest first) for agent `j` at `t`.
    fn embedding_window(
        &self,
        tape: &mut Tape,
        wts: &[NodeId],
        j: usize,
        t: usize,
    ) -> Vec<NodeId> {
        let n = self.num_agents();
        let m = self.config.history_m;
        (0..m)
            .map(|k| {
                let offset = (m - 1 - k) as isize;
                let idx = t as isize - offset;
                if idx < 0 {
                    tape.constant(vec![0.0; n], Shape::vector(n))
                } else {
                    role_embedding_node(tape, wts[idx as usize], j)
                }
            })
            .collect()
    }

    /// Records every policy's gradient-ascent step on the tape, preserving
    /// the dependence of the updated parameters on the orientation leaves
    /// (through both the embeddings and the shaped returns).
    pub fn inner_policy_step(
        &self,
        tape: &mut Tape,
        eta_leaves: Option<&[Vec<NodeId>]>,
        theta_leaves: &[PolicyNodes],
        episodes: &[RolloutEpisode],
    ) -> Result<Vec<PolicyNodes>, TrainError> {
        let n = self.num_agents();
        let gamma = self.config.gamma;
        let mut episode_wts = Vec::with_capacity(episodes.len());
        for episode in episodes {
            episode_wts.push(self.episode_wt_nodes(tape, eta_leaves, episode)?);
        }
        // Shaped returns per (episode, t, agent), as tape nodes.
        let mut episode_returns: Vec<Vec<Vec<NodeId>>> = Vec::with_capacity(episodes.len());
        for (episode, wts) in episodes.iter().zip(&episode_wts) {
            let len = episode.traj.len();
            let shaped: Vec<NodeId> = (0..len)
                .map(|t| {
                    let r: Vec<f64> = (0..n)
                        .map(|i| episode.traj.agents[i].steps[t].extrinsic_reward)
                        .collect();
                    let rn = tape.constant(r, Shape::vector(n));
                    shape_rewards_node(tape, wts[t], rn)
                })
                .collect();
            let mut returns: Vec<Vec<NodeId>> = vec![Vec::new(); len];
            let mut next: Option<Vec<NodeId>> = None;
            for t in (0..len).rev() {
                let mut row = Vec::with_capacity(n);
                for j in 0..n {
                    let r_j = tape.element(shaped[t], j);
                    let g = match &next {
                        Some(nx) => {
                            let scaled = tape.scale(nx[j], gamma);
                            tape.add(r_j, scaled)
                        }
                        None => r_j,
                    };
                    row.push(g);
                }
                returns[t] = row.clone();
                next = Some(row);
            }
            episode_returns.push(returns);
        }

        // Batch-mean baseline per (t, agent) when no critic is configured.
        // Unbiased for the policy step, and it keeps the raw returns (and
        // with them the logit drift) centered. Stays on the tape so the
        // orientation dependence flows through it as well.
        let max_len = episodes.iter().map(|e| e.traj.len()).max().unwrap_or(0);
        let mut baselines: Vec<Vec<Option<NodeId>>> = vec![vec![None; n]; max_len];
        if self.values.is_none() && episodes.len() > 1 {
            for t in 0..max_len {
                let present: Vec<usize> = (0..episodes.len())
                    .filter(|&e| t < episode_returns[e].len())
                    .collect();
                if present.len() < 2 {
                    continue;
                }
                for j in 0..n {
                    let parts: Vec<NodeId> =
                        present.iter().map(|&e| episode_returns[e][t][j]).collect();
                    let packed = tape.pack(&parts);
                    let total = tape.sum(packed);
                    baselines[t][j] = Some(tape.scale(total, 1.0 / parts.len() as f64));
                }
            }
        }

        // Mean over episodes: the update estimates an expectation.
        let inv_eps = 1.0 / episodes.len().max(1) as f64;
        let mut per_agent_steps: Vec<Vec<UpdateStep<'_>>> = (0..n).map(|_| Vec::new()).collect();
        for (e, (episode, wts)) in episodes.iter().zip(&episode_wts).enumerate() {
            let len = episode.traj.len();
            for j in 0..n {
                for t in 0..len {
                    let emb = self.embedding_window(tape, wts, j, t);
                    let g = episode_returns[e][t][j];
                    let advantage = match &self.values {
                        Some(values) => {
                            // Constant baseline keeps the eta-dependence of
                            // the advantage in the return term only.
                            let v = values[j].eval(&episode.traj.agents[j].steps[t].observation);
                            let vc = tape.constant_scalar(v);
                            tape.sub(g, vc)
                        }
                        None => match baselines[t][j] {
                            Some(b) => tape.sub(g, b),
                            None => g,
                        },
                    };
                    let weight = tape.scale(advantage, inv_eps);
                    per_agent_steps[j].push(UpdateStep {
                        obs: &episode.traj.agents[j].steps[t].observation,
                        action: episode.traj.agents[j].steps[t].action,
                        emb,
                        weight,
                    });
                }
            }
        }

        let beta = self.config.policy_lr * self.config.lambda_p;
        let mut updated = Vec::with_capacity(n);
        for j in 0..n {
            updated.push(policy_gradient_update(
                tape,
                &self.policies[j],
                &theta_leaves[j],
                &per_agent_steps[j],
                beta,
            )?);
        }
        Ok(updated)
    }

    /// Gradient of each orientation objective with respect to that agent's
    /// own parameters, as a descent direction (includes the low-rank
    /// penalty; the caller folds in the information term and steps).
    pub fn outer_svo_grads(
        &self,
        tape: &mut Tape,
        eta_leaves: &[Vec<NodeId>],
        theta_hat: &[PolicyNodes],
        fresh: &[RolloutEpisode],
    ) -> Result<Vec<Vec<Vec<f64>>>, TrainError> {
        let n = self.num_agents();
        let gamma = self.config.gamma;
        let alpha = self.config.alpha;
        let k = self.config.rank_k;

        // Numeric step weights: discounted suffix sums of the fresh extrinsic
        // rewards minus the rank-deviation price, plus frozen projection
        // targets per column.
        struct EpisodeAux {
            q_tilde: Vec<Vec<f64>>,      // [agent][t]
            wk_cols: Vec<Vec<Vec<f64>>>, // [t][agent][dim]
        }
        let mut aux = Vec::with_capacity(fresh.len());
        for episode in fresh {
            let len = episode.traj.len();
            let mut wk_cols = Vec::with_capacity(len);
            let mut intrinsic: Vec<Vec<f64>> = vec![vec![0.0; len]; n];
            for t in 0..len {
                let w = &episode.ws[t];
                let delta = if alpha > 0.0 {
                    Some(rank_deltas(w, k)?)
                } else {
                    None
                };
                let mut cols = Vec::with_capacity(n);
                for i in 0..n {
                    let col = w.sharing_vector(i);
                    let (pen, target) = match &delta {
                        Some(d) => {
                            let dcol: Vec<f64> = (0..n).map(|r| d.get(r, i)).collect();
                            let pen: f64 = dcol.iter().map(|x| x * x).sum::<f64>() * alpha;
                            let target: Vec<f64> =
                                col.iter().zip(&dcol).map(|(w, d)| w - d).collect();
                            (pen, target)
                        }
                        None => (0.0, col.clone()),
                    };
                    intrinsic[i][t] =
                        episode.traj.agents[i].steps[t].extrinsic_reward - pen;
                    cols.push(target);
                }
                wk_cols.push(cols);
            }
            let q_tilde: Vec<Vec<f64>> = (0..n)
                .map(|i| compute_returns(&intrinsic[i], gamma).expect("finite intrinsic"))
                .collect();
            aux.push(EpisodeAux { q_tilde, wk_cols });
        }

        // Tape losses: per agent, minus the score-function surrogate plus the
        // discounted projection penalty.
        let mut losses: Vec<Option<NodeId>> = vec![None; n];
        for (episode, aux_ep) in fresh.iter().zip(&aux) {
            let len = episode.traj.len();
            let actions: Vec<Vec<usize>> =
                (0..len).map(|t| episode.traj.joint_action(t)).collect();
            // Orientation columns (needed both for embeddings and penalty).
            let mut col_nodes: Vec<Vec<NodeId>> = Vec::with_capacity(len);
            let mut wts: Vec<NodeId> = Vec::with_capacity(len);
            for t in 0..len {
                let mut cols = Vec::with_capacity(n);
                for i in 0..n {
                    let obs = &episode.traj.agents[i].steps[t].observation;
                    let prev = Self::previous_other_actions(&actions, t, i, n);
                    let nodes = OrientationNodes(eta_leaves[i].clone());
                    let (mean, _var) = self.orientations[i].forward(tape, &nodes, obs, &prev)?;
                    cols.push(mean);
                }
                wts.push(sharing_columns_to_wt(tape, &cols));
                col_nodes.push(cols);
            }
            for t in 0..len {
                // Joint log-probability under the updated policies.
                let mut lp_sum: Option<NodeId> = None;
                for j in 0..n {
                    let emb = self.embedding_window(tape, &wts, j, t);
                    let lp = self.policies[j].log_prob(
                        tape,
                        &theta_hat[j],
                        &episode.traj.agents[j].steps[t].observation,
                        &emb,
                        episode.traj.agents[j].steps[t].action,
                    )?;
                    lp_sum = Some(match lp_sum {
                        Some(acc) => tape.add(acc, lp),
                        None => lp,
                    });
                }
                let lp_sum = lp_sum.expect("at least one agent");
                let disc = gamma.powi(t as i32);
                let inv_eps = 1.0 / fresh.len() as f64;
                for i in 0..n {
                    let weight = tape.constant_scalar(aux_ep.q_tilde[i][t] * inv_eps);
                    let scored = tape.mul(lp_sum, weight);
                    let neg = tape.neg(scored);
                    let mut term = neg;
                    if alpha > 0.0 {
                        let target = tape.constant(
                            aux_ep.wk_cols[t][i].clone(),
                            Shape::vector(n),
                        );
                        let diff = tape.sub(col_nodes[t][i], target);
                        let sq = tape.sq_norm(diff);
                        let pen = tape.scale(sq, alpha * disc * inv_eps);
                        term = tape.add(term, pen);
                    }
                    losses[i] = Some(match losses[i] {
                        Some(acc) => tape.add(acc, term),
                        None => term,
                    });
                }
            }
        }

        let mut grads_out = Vec::with_capacity(n);
        for i in 0..n {
            match losses[i] {
                Some(loss) => {
                    let grads = backward(tape, loss);
                    grads_out.push(self.orientations[i].params.collect_grads(
                        tape,
                        &grads,
                        &eta_leaves[i],
                    ));
                }
                None => grads_out.push(
                    self.orientations[i]
                        .params
                        .tensors
                        .iter()
                        .map(|t| vec![0.0; t.shape.len()])
                        .collect(),
                ),
            }
        }
        Ok(grads_out)
    }

    /// One full iteration: rollout, recorded policy step, fresh rollout,
    /// orientation step with the information term, posterior step, commit.
    pub fn train_iteration(&mut self, iteration: usize) -> Result<IterationReport, TrainError> {
        let phase1 = self.rollout(self.config.episodes_per_iteration)?;
        for ep in &phase1 {
            self.buffer.push(ep.traj.clone())?;
        }

        let learned = matches!(self.w_mode, WMode::Learned);
        let mut tape = Tape::new();
        let eta_leaves: Option<Vec<Vec<NodeId>>> = learned.then(|| {
            self.orientations.iter().map(|o| o.params.leaves(&mut tape)).collect()
        });
        let theta_leaves: Vec<PolicyNodes> =
            self.policies.iter().map(|p| p.leaves(&mut tape)).collect();

        let theta_hat =
            self.inner_policy_step(&mut tape, eta_leaves.as_deref(), &theta_leaves, &phase1)?;
        let mut hat_policies = self.policies.clone();
        for (net, nodes) in hat_policies.iter_mut().zip(&theta_hat) {
            net.params.assign_from_nodes(&tape, &nodes.0);
        }

        let mut mi_loss_value = 0.0;
        let mut eta_hat = self.orientations.clone();
        let mut posterior_hat = self.posterior.clone();
        if learned {
            let phase2 = self.rollout_with(
                &hat_policies,
                self.config.episodes_per_iteration,
                None,
                None,
            )?;
            let eta_leaves = eta_leaves.as_ref().expect("learned mode has eta leaves");
            let svo_grads = self.outer_svo_grads(&mut tape, eta_leaves, &theta_hat, &phase2)?;

            let mi_out = if self.config.lambda_mi > 0.0 {
                let out = mi_update(
                    &mut posterior_hat,
                    &self.orientations,
                    &self.buffer,
                    self.config.mi_batch,
                    &mut self.rng_buffer,
                    &mut self.posterior_opt,
                )?;
                mi_loss_value = out.loss;
                Some(out)
            } else {
                None
            };

            for i in 0..self.num_agents() {
                let mut combined: Vec<Vec<f64>> = svo_grads[i]
                    .iter()
                    .map(|t| t.iter().map(|g| g * self.config.lambda_svo).collect())
                    .collect();
                if let Some(mi_out) = &mi_out {
                    for (acc, mi_g) in combined.iter_mut().zip(&mi_out.eta_grads[i]) {
                        for (a, g) in acc.iter_mut().zip(mi_g) {
                            *a += self.config.lambda_mi * g;
                        }
                    }
                }
                let finite =
                    combined.iter().all(|t| t.iter().all(|g| g.is_finite()));
                if finite {
                    self.orientation_opts[i].step(&mut eta_hat[i].params, &combined);
                } else {
                    eprintln!(
                        "iteration {iteration}: non-finite sharing gradient for agent {i}, step skipped"
                    );
                }
            }
        }

        // Critic regression on the fresh on-policy data (shaped rewards).
        if let Some(values) = &mut self.values {
            for (j, net) in values.iter_mut().enumerate() {
                let episodes: Vec<Vec<(Observation, f64, bool)>> = phase1
                    .iter()
                    .map(|ep| {
                        ep.traj.agents[j]
                            .steps
                            .iter()
                            .map(|s| (s.observation.clone(), s.shaped_reward, s.done))
                            .collect()
                    })
                    .collect();
                value_update(net, &episodes, self.config.gamma, &mut self.value_opts[j]);
            }
        }

        // Commit.
        self.policies = hat_policies;
        self.orientations = eta_hat;
        self.posterior = posterior_hat;

        let report = self.build_report(iteration, &phase1, mi_loss_value);
        report.assert_finite();
        Ok(report)
    }

    fn build_report(
        &self,
        iteration: usize,
        episodes: &[RolloutEpisode],
        mi_loss: f64,
    ) -> IterationReport {
        let n = self.num_agents();
        let count = episodes.len().max(1) as f64;
        let mut extrinsic = vec![0.0; n];
        let mut shaped = vec![0.0; n];
        let mut given = vec![0.0; n];
        let mut received = vec![0.0; n];
        let mut levers = vec![0.0; n];
        let mut doors = vec![0.0; n];
        let mut waste = vec![0.0; n];
        let mut apples = vec![0.0; n];
        let mut steps_total = 0.0;
        let mut rank_sum = 0.0;
        let mut rank_count = 0usize;
        for ep in episodes {
            steps_total += ep.traj.len() as f64;
            for (t, w) in ep.ws.iter().enumerate() {
                rank_sum += numerical_rank(w.as_mat(), self.config.rank_tolerance)
                    .expect("positive tolerance") as f64;
                rank_count += 1;
                for i in 0..n {
                    let r_i = ep.traj.agents[i].steps[t].extrinsic_reward;
                    for j in 0..n {
                        let flow = w.entry(j, i) * r_i;
                        if j != i {
                            given[i] += flow;
                            received[j] += flow;
                        }
                    }
                }
            }
            for i in 0..n {
                extrinsic[i] += ep.traj.agents[i].steps.iter().map(|s| s.extrinsic_reward).sum::<f64>();
                shaped[i] += ep.traj.agents[i].steps.iter().map(|s| s.shaped_reward).sum::<f64>();
                levers[i] += ep.counters.levers_pulled[i];
                doors[i] += ep.counters.door_exits[i];
                waste[i] += ep.counters.waste_cleaned[i];
                apples[i] += ep.counters.apples_collected[i];
            }
        }
        for v in [
            &mut extrinsic,
            &mut shaped,
            &mut given,
            &mut received,
            &mut levers,
            &mut doors,
            &mut waste,
            &mut apples,
        ] {
            for x in v.iter_mut() {
                *x /= count;
            }
        }
        IterationReport {
            iteration,
            extrinsic_mean: extrinsic,
            shaped_mean: shaped,
            given_mean: given,
            received_mean: received,
            svo_rank_mean: if rank_count > 0 { rank_sum / rank_count as f64 } else { 0.0 },
            mi_loss,
            steps_per_episode: steps_total / count,
            levers_pulled: levers,
            door_exits: doors,
            waste_cleaned: waste,
            apples_collected: apples,
        }
    }

    /// Runs the configured number of iterations, invoking the sink after
    /// each one (for incremental metrics flushing).
    pub fn train(
        &mut self,
        on_iteration: &mut dyn FnMut(&IterationReport) -> Result<(), String>,
    ) -> Result<Vec<IterationReport>, TrainError> {
        let mut reports = Vec::with_capacity(self.config.total_iterations);
        for iteration in 0..self.config.total_iterations {
            let report = self.train_iteration(iteration)?;
            on_iteration(&report).map_err(TrainError::Sink)?;
            reports.push(report);
        }
        Ok(reports)
    }

    /// Greedy-ish evaluation at the exploration floor, optionally streaming
    /// rendered frames.
    pub fn evaluate(
        &mut self,
        episodes: usize,
        frame_sink: Option<&mut dyn FnMut(usize, Frame)>,
    ) -> Result<Vec<RolloutEpisode>, TrainError> {
        let policies = self.policies.clone();
        self.rollout_with(&policies, episodes, Some(self.config.exploration.eps_end), frame_sink)
    }

    pub fn to_checkpoint(&self, meta: String) -> Checkpoint {
        let mut tensors = Vec::new();
        for (i, p) in self.policies.iter().enumerate() {
            push_params(&mut tensors, &format!("policy/{i}"), &p.params);
        }
        for (i, o) in self.orientations.iter().enumerate() {
            push_params(&mut tensors, &format!("orientation/{i}"), &o.params);
        }
        if let Some(values) = &self.values {
            for (i, v) in values.iter().enumerate() {
                push_params(&mut tensors, &format!("value/{i}"), &v.params);
            }
        }
        push_params(&mut tensors, "posterior", &self.posterior.params);
        Checkpoint { meta, tensors }
    }

    /// Loads parameters from a checkpoint produced by a trainer with the
    /// same environment and architecture settings.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        for (i, p) in self.policies.iter_mut().enumerate() {
            ckpt.load_into(&format!("policy/{i}"), &mut p.params)?;
        }
        for (i, o) in self.orientations.iter_mut().enumerate() {
            ckpt.load_into(&format!("orientation/{i}"), &mut o.params)?;
        }
        if let Some(values) = &mut self.values {
            for (i, v) in values.iter_mut().enumerate() {
                ckpt.load_into(&format!("value/{i}"), &mut v.params)?;
            }
        }
        ckpt.load_into("posterior", &mut self.posterior.params)?;
        Ok(())
    }
}

/// Exact conservation check: summing every agent's shaped rewards equals
/// summing every sharing flow, in matching order, bit for bit.
pub fn verify_ledger(episode: &RolloutEpisode) -> bool {
    let n = episode.traj.num_agents();
    for (t, w) in episode.ws.iter().enumerate() {
        let mut shaped_total = 0.0;
        let mut ledger_total = 0.0;
        for j in 0..n {
            shaped_total += episode.traj.agents[j].steps[t].shaped_reward;
            let mut acc = 0.0;
            for i in 0..n {
                acc += w.entry(j, i) * episode.traj.agents[i].steps[t].extrinsic_reward;
            }
            ledger_total += acc;
        }
        if shaped_total.to_bits() != ledger_total.to_bits() {
            return false;
        }
    }
    true
}

/// Convenience: fresh trainer plus full run.
pub fn train(
    env_config: EnvConfig,
    config: TrainConfig,
    on_iteration: &mut dyn FnMut(&IterationReport) -> Result<(), String>,
) -> Result<(Trainer, Vec<IterationReport>), TrainError> {
    let mut trainer = Trainer::new(env_config, config, None)?;
    let reports = trainer.train(on_iteration)?;
    Ok((trainer, reports))
}

/// Convenience: baseline run with frozen sharing.
pub fn run_baseline(
    env_config: EnvConfig,
    config: TrainConfig,
    kind: BaselineKind,
    on_iteration: &mut dyn FnMut(&IterationReport) -> Result<(), String>,
) -> Result<(Trainer, Vec<IterationReport>), TrainError> {
    let mut trainer = Trainer::new(env_config, config, Some(kind))?;
    let reports = trainer.train(on_iteration)?;
    Ok((trainer, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ipd_config(iters: usize) -> (EnvConfig, TrainConfig) {
        let env = EnvConfig::ipd(5);
        let mut cfg = TrainConfig::for_env(EnvKind::Ipd);
        cfg.total_iterations = iters;
        cfg.episodes_per_iteration = 4;
        cfg.seed = 7;
        cfg.mi_batch = 4;
        cfg.hidden = 8;
        cfg.history_m = 2;
        (env, cfg)
    }

    #[test]
    fn zero_iterations_yield_empty_reports() {
        let (env, mut cfg) = ipd_config(0);
        cfg.total_iterations = 0;
        let (_, reports) = train(env, cfg, &mut |_| Ok(())).unwrap();
        assert!(reports.is_empty());
    }

    #[test]
    fn horizon_one_env_gives_length_one_trajectories() {
        let env = EnvConfig::ipd(1);
        let (_, mut cfg) = ipd_config(0);
        cfg.total_iterations = 0;
        let mut trainer = Trainer::new(env, cfg, None).unwrap();
        let eps = trainer.rollout(3).unwrap();
        for ep in eps {
            assert_eq!(ep.traj.len(), 1);
        }
    }

    #[test]
    fn identity_sharing_makes_shaped_equal_extrinsic() {
        let (env, cfg) = ipd_config(0);
        let mut trainer = Trainer::new(env, cfg, Some(BaselineKind::NoSharing)).unwrap();
        let eps = trainer.rollout(3).unwrap();
        for ep in &eps {
            for agent in &ep.traj.agents {
                for s in &agent.steps {
                    assert_eq!(s.shaped_reward, s.extrinsic_reward);
                }
            }
            assert!(verify_ledger(ep));
        }
    }

    #[test]
    fn prosocial_sharing_gives_everyone_the_mean() {
        let (env, cfg) = ipd_config(0);
        let mut trainer = Trainer::new(env, cfg, Some(BaselineKind::FixedProsocial)).unwrap();
        let eps = trainer.rollout(2).unwrap();
        for ep in &eps {
            for t in 0..ep.traj.len() {
                let mean: f64 = (0..2)
                    .map(|i| ep.traj.agents[i].steps[t].extrinsic_reward)
                    .sum::<f64>()
                    / 2.0;
                for agent in &ep.traj.agents {
                    assert!((agent.steps[t].shaped_reward - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rollouts_are_seed_deterministic() {
        let (env, cfg) = ipd_config(0);
        let run = || {
            let mut t = Trainer::new(env.clone(), cfg.clone(), None).unwrap();
            let eps = t.rollout(3).unwrap();
            eps.iter()
                .flat_map(|e| e.traj.agents.iter())
                .flat_map(|a| a.steps.iter().map(|s| (s.action, s.extrinsic_reward.to_bits())))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lambda_p_zero_keeps_policies_fixed() {
        let (env, mut cfg) = ipd_config(2);
        cfg.lambda_p = 0.0;
        let mut trainer = Trainer::new(env, cfg, None).unwrap();
        let before: Vec<Vec<f64>> = trainer
            .policies()
            .iter()
            .map(|p| p.params.tensors.iter().flat_map(|t| t.data.clone()).collect())
            .collect();
        trainer.train_iteration(0).unwrap();
        let after: Vec<Vec<f64>> = trainer
            .policies()
            .iter()
            .map(|p| p.params.tensors.iter().flat_map(|t| t.data.clone()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn all_rates_zero_is_pure_evaluation() {
        let (env, mut cfg) = ipd_config(3);
        cfg.lambda_p = 0.0;
        cfg.lambda_svo = 0.0;
        cfg.lambda_mi = 0.0;
        cfg.orientation_lr = 0.0;
        cfg.posterior_lr = 0.0;
        cfg.exploration = ExplorationSchedule::constant(0.1);
        let mut trainer = Trainer::new(env, cfg, None).unwrap();
        let snapshot = |t: &Trainer| -> Vec<Vec<f64>> {
            t.policies()
                .iter()
                .map(|p| p.params.tensors.iter().flat_map(|x| x.data.clone()).collect())
                .chain(
                    t.orientations()
                        .iter()
                        .map(|o| o.params.tensors.iter().flat_map(|x| x.data.clone()).collect()),
                )
                .collect()
        };
        let before = snapshot(&trainer);
        for i in 0..3 {
            trainer.train_iteration(i).unwrap();
        }
        assert_eq!(before, snapshot(&trainer));
    }

    #[test]
    fn per_agent_updates_are_separable() {
        // Feeding only one agent's steps into the recorded update leaves the
        // other agent's parameters untouched.
        let (env, cfg) = ipd_config(0);
        let mut trainer = Trainer::new(env, cfg, None).unwrap();
        let phase1 = trainer.rollout(2).unwrap();
        let mut tape = Tape::new();
        let theta_leaves: Vec<PolicyNodes> =
            trainer.policies.iter().map(|p| p.leaves(&mut tape)).collect();
        // No orientation leaves: constants for W (still learned values).
        let hat = trainer
            .inner_policy_step(&mut tape, None, &theta_leaves, &phase1[..1])
            .unwrap();
        // Both agents appear in the data, so both move; but an empty slice
        // moves neither.
        let hat_empty =
            trainer.inner_policy_step(&mut tape, None, &theta_leaves, &[]).unwrap();
        for (new, old) in hat_empty.iter().zip(&theta_leaves) {
            assert_eq!(new.0, old.0);
        }
        let _ = hat;
    }

    #[test]
    fn report_schema_is_shared_between_train_and_baselines() {
        let (env, mut cfg) = ipd_config(1);
        cfg.total_iterations = 1;
        let (_, r1) = train(env.clone(), cfg.clone(), &mut |_| Ok(())).unwrap();
        let (_, r2) =
            run_baseline(env.clone(), cfg.clone(), BaselineKind::NoSharing, &mut |_| Ok(()))
                .unwrap();
        let (_, r3) =
            run_baseline(env, cfg, BaselineKind::FixedProsocial, &mut |_| Ok(())).unwrap();
        for reports in [&r1, &r2, &r3] {
            assert_eq!(reports.len(), 1);
            assert_eq!(reports[0].extrinsic_mean.len(), 2);
            reports[0].assert_finite();
        }
    }

    #[test]
    fn checkpoint_round_trip_restores_parameters() {
        let (env, cfg) = ipd_config(1);
        let mut a = Trainer::new(env.clone(), cfg.clone(), None).unwrap();
        a.train_iteration(0).unwrap();
        let ckpt = a.to_checkpoint("meta = 1\n".into());

        let mut b = Trainer::new(env, cfg, None).unwrap();
        b.restore(&ckpt).unwrap();
        for (pa, pb) in a.policies().iter().zip(b.policies()) {
            for (ta, tb) in pa.params.tensors.iter().zip(&pb.params.tensors) {
                assert_eq!(ta.data, tb.data);
            }
        }
    }

    #[test]
    fn iteration_runs_end_to_end_on_escape_room() {
        let env = EnvConfig::escape_room(3, 2, 5);
        let mut cfg = TrainConfig::for_env(EnvKind::EscapeRoom);
        cfg.total_iterations = 2;
        cfg.episodes_per_iteration = 3;
        cfg.hidden = 8;
        cfg.history_m = 2;
        cfg.mi_batch = 4;
        cfg.seed = 3;
        let (_, reports) = train(env, cfg, &mut |_| Ok(())).unwrap();
        assert_eq!(reports.len(), 2);
        for r in &reports {
            assert!(r.steps_per_episode >= 1.0 && r.steps_per_episode <= 5.0);
        }
    }
}
