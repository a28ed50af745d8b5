//! Shared domain types, replay buffer, discounted returns, and deterministic
//! random-number plumbing used by every other module.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("non-finite reward at index {0}: {1}")]
    NonFiniteReward(usize, f64),
    #[error("gamma must lie in (0, 1], got {0}")]
    BadGamma(f64),
    #[error("joint trajectory has {got} agents, buffer expects {expected}")]
    AgentCountMismatch { expected: usize, got: usize },
    #[error("trajectory lengths differ across agents: {0:?}")]
    RaggedTrajectory(Vec<usize>),
    #[error("replay buffer capacity must be positive")]
    ZeroCapacity,
}

/// Index of one agent within an experiment, stable for its lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AgentId(pub usize);

impl AgentId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One observation as seen by a single agent.
///
/// `features` is always present and is what dense networks consume. For
/// convolutional policies, the leading `channels * height * width` entries of
/// `features` form the grid planes described by `grid`, and anything after
/// them is extra flat input (e.g. facing direction). `index` is set by
/// environments with small discrete observation spaces so tabular policies
/// can address a logit table directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f64>,
    pub grid: Option<GridShape>,
    pub index: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Observation {
    pub fn flat(features: Vec<f64>) -> Self {
        Observation { features, grid: None, index: None }
    }

    pub fn indexed(features: Vec<f64>, index: usize) -> Self {
        Observation { features, grid: None, index: Some(index) }
    }

    pub fn grid(features: Vec<f64>, shape: GridShape) -> Self {
        debug_assert!(features.len() >= shape.channels * shape.height * shape.width);
        Observation { features, grid: Some(shape), index: None }
    }
}

/// One environment transition from a single agent's point of view.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub observation: Observation,
    pub action: usize,
    pub extrinsic_reward: f64,
    pub shaped_reward: f64,
    /// Role embedding the policy consumed at this step (length N).
    pub role_embedding: Vec<f64>,
    pub done: bool,
}

/// Time-ordered record of one agent's episode.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub agent: AgentId,
    pub steps: Vec<StepRecord>,
    pub horizon: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn extrinsic_rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.extrinsic_reward).collect()
    }

    pub fn shaped_rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.shaped_reward).collect()
    }
}

/// All agents' trajectories for one episode, aligned step by step.
#[derive(Debug, Clone)]
pub struct JointTrajectory {
    pub agents: Vec<Trajectory>,
}

impl JointTrajectory {
    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn len(&self) -> usize {
        self.agents.first().map_or(0, Trajectory::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that every agent recorded the same number of steps.
    pub fn validate(&self) -> Result<(), CoreError> {
        let lens: Vec<usize> = self.agents.iter().map(Trajectory::len).collect();
        if lens.windows(2).any(|w| w[0] != w[1]) {
            return Err(CoreError::RaggedTrajectory(lens));
        }
        Ok(())
    }

    /// Actions of all agents at step `t`.
    pub fn joint_action(&self, t: usize) -> Vec<usize> {
        self.agents.iter().map(|tr| tr.steps[t].action).collect()
    }
}

/// Bounded FIFO store of whole joint episodes with uniform seeded sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    episodes: VecDeque<JointTrajectory>,
    capacity: usize,
    num_agents: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, num_agents: usize) -> Result<Self, CoreError> {
        if capacity == 0 {
            return Err(CoreError::ZeroCapacity);
        }
        Ok(ReplayBuffer { episodes: VecDeque::with_capacity(capacity), capacity, num_agents })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends an episode, evicting the oldest one when at capacity.
    pub fn push(&mut self, episode: JointTrajectory) -> Result<(), CoreError> {
        if episode.num_agents() != self.num_agents {
            return Err(CoreError::AgentCountMismatch {
                expected: self.num_agents,
                got: episode.num_agents(),
            });
        }
        episode.validate()?;
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        Ok(())
    }

    pub fn get(&self, idx: usize) -> &JointTrajectory {
        &self.episodes[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &JointTrajectory> {
        self.episodes.iter()
    }

    /// Draws `n` episode indices uniformly with replacement.
    pub fn sample_indices(&self, n: usize, rng: &mut RngStream) -> Vec<usize> {
        (0..n).map(|_| rng.gen_index(self.episodes.len())).collect()
    }

    /// Draws `n` uniform (episode, step) pairs for timestep-level losses.
    pub fn sample_steps(&self, n: usize, rng: &mut RngStream) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(n);
        let nonempty: Vec<usize> =
            (0..self.episodes.len()).filter(|&e| !self.episodes[e].is_empty()).collect();
        if nonempty.is_empty() {
            return out;
        }
        for _ in 0..n {
            let e = nonempty[rng.gen_index(nonempty.len())];
            let t = rng.gen_index(self.episodes[e].len());
            out.push((e, t));
        }
        out
    }
}

/// Discounted suffix sums: `out[t] = sum_{l>=t} gamma^(l-t) * rewards[l]`.
///
/// Computed by a single backward pass so the recurrence
/// `G[t] = rewards[t] + gamma * G[t+1]` holds bit-for-bit.
pub fn compute_returns(rewards: &[f64], gamma: f64) -> Result<Vec<f64>, CoreError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(CoreError::BadGamma(gamma));
    }
    if let Some((i, &r)) = rewards.iter().enumerate().find(|(_, r)| !r.is_finite()) {
        return Err(CoreError::NonFiniteReward(i, r));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Labeled deterministic random stream.
///
/// One master seed fans out to independent sub-streams keyed by label, so a
/// change in how one component consumes randomness never perturbs another.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha12Rng,
    seed: u64,
    label: String,
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&fnv1a(label.as_bytes()).to_le_bytes());
        key[16..24].copy_from_slice(&(label.len() as u64).to_le_bytes());
        RngStream { rng: ChaCha12Rng::from_seed(key), seed, label: label.to_string() }
    }

    /// Derives an independent child stream; the parent's state is untouched.
    pub fn fork(&self, sublabel: &str) -> Self {
        RngStream::new(self.seed, &format!("{}/{}", self.label, sublabel))
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Uniform draw in `[0, 1)`.
    pub fn gen_f64(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn gen_range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.gen_f64()
    }

    /// Uniform index in `[0, n)`; `n` must be positive.
    pub fn gen_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "gen_index over empty range");
        // Rejection sampling keeps the draw unbiased.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn gen_normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.gen_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.gen_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(r: f64) -> StepRecord {
        StepRecord {
            observation: Observation::flat(vec![0.0]),
            action: 0,
            extrinsic_reward: r,
            shaped_reward: r,
            role_embedding: vec![0.0, 0.0],
            done: false,
        }
    }

    fn episode(n_agents: usize, len: usize) -> JointTrajectory {
        JointTrajectory {
            agents: (0..n_agents)
                .map(|a| Trajectory {
                    agent: AgentId(a),
                    steps: (0..len).map(|_| step(1.0)).collect(),
                    horizon: len,
                })
                .collect(),
        }
    }

    #[test]
    fn returns_single_step_identity() {
        assert_eq!(compute_returns(&[4.5], 0.37).unwrap(), vec![4.5]);
    }

    #[test]
    fn returns_match_backward_summation_oracle() {
        // Direct forward summation oracle: out[t] = sum_l gamma^(l-t) r[l].
        let rewards = [1.0, 1.0, 1.0];
        let gamma = 0.5;
        let got = compute_returns(&rewards, gamma).unwrap();
        assert_eq!(got, vec![1.75, 1.5, 1.0]);
        for t in 0..rewards.len() {
            let oracle: f64 = (t..rewards.len())
                .map(|l| gamma.powi((l - t) as i32) * rewards[l])
                .sum();
            assert!((got[t] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn returns_zero_case_and_empty() {
        assert_eq!(compute_returns(&[0.0, 0.0, 0.0], 0.99).unwrap(), vec![0.0; 3]);
        assert!(compute_returns(&[], 0.9).unwrap().is_empty());
    }

    #[test]
    fn returns_satisfy_recurrence_exactly() {
        let rewards: Vec<f64> = (0..40).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let gamma = 0.97;
        let g = compute_returns(&rewards, gamma).unwrap();
        for t in 0..rewards.len() - 1 {
            // Bit-for-bit, by construction of the backward pass.
            assert_eq!(g[t], rewards[t] + gamma * g[t + 1]);
        }
    }

    #[test]
    fn returns_reject_bad_inputs() {
        assert!(compute_returns(&[f64::NAN], 0.9).is_err());
        assert!(compute_returns(&[1.0], 0.0).is_err());
        assert!(compute_returns(&[1.0], 1.5).is_err());
    }

    #[test]
    fn buffer_push_and_fifo_eviction() {
        let mut buf = ReplayBuffer::new(2, 2).unwrap();
        for len in [3, 4, 5] {
            buf.push(episode(2, len)).unwrap();
        }
        assert_eq!(buf.len(), 2);
        assert_eq!(buf.get(0).len(), 4);
        assert_eq!(buf.get(1).len(), 5);
    }

    #[test]
    fn buffer_rejects_mismatched_agent_count() {
        let mut buf = ReplayBuffer::new(4, 3).unwrap();
        assert!(buf.push(episode(2, 3)).is_err());
    }

    #[test]
    fn buffer_sampling_is_seed_deterministic() {
        let mut buf = ReplayBuffer::new(8, 2).unwrap();
        for _ in 0..5 {
            buf.push(episode(2, 4)).unwrap();
        }
        let a = buf.sample_indices(16, &mut RngStream::new(7, "buffer"));
        let b = buf.sample_indices(16, &mut RngStream::new(7, "buffer"));
        assert_eq!(a, b);
        let steps_a = buf.sample_steps(16, &mut RngStream::new(7, "steps"));
        let steps_b = buf.sample_steps(16, &mut RngStream::new(7, "steps"));
        assert_eq!(steps_a, steps_b);
    }

    #[test]
    fn rng_streams_differ_by_label_and_match_by_seed() {
        let mut a = RngStream::new(42, "env");
        let mut b = RngStream::new(42, "env");
        let mut c = RngStream::new(42, "policy-init");
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let zs: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn rng_index_within_bounds() {
        let mut r = RngStream::new(1, "idx");
        for _ in 0..1000 {
            assert!(r.gen_index(7) < 7);
        }
    }
}
