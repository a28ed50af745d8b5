//! Reward-sharing orientation functions, the sharing-ratio matrix, reward
//! shaping, and the low-rank role penalty.
//!
//! Column `i` of the sharing matrix is agent `i`'s *sharing vector* (how it
//! splits its extrinsic reward across everyone, itself included); row `j` is
//! agent `j`'s *role embedding* (the ratios at which it receives). Shaped
//! rewards are the matrix-vector product of the two.

pub mod svd;

pub use svd::{numerical_rank, rank_k_approximation, svd, Mat, Svd, SvdError};

use crate::autodiff::{MatKind, NodeId, Shape, Tape};
use crate::core::{Observation, RngStream};
use crate::params::ParamSet;
use std::collections::VecDeque;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SvoError {
    #[error("expected {expected} sharing vectors of length {expected}, got vector {index} of length {got}")]
    VectorLength { expected: usize, index: usize, got: usize },
    #[error("expected {expected} sharing vectors, got {got}")]
    VectorCount { expected: usize, got: usize },
    #[error("expected {expected} other-agent actions, got {got}")]
    OtherActionCount { expected: usize, got: usize },
    #[error("reward vector length {got} does not match {expected} agents")]
    RewardLength { expected: usize, got: usize },
    #[error(transparent)]
    Svd(#[from] SvdError),
}

/// Target rank and penalty weight for the role-rank constraint.
#[derive(Debug, Clone, Copy)]
pub struct RankPenaltyConfig {
    pub k: usize,
    pub alpha: f64,
}

/// Sharing-ratio matrix for one timestep: `entry(j, i)` is the share of
/// agent `i`'s extrinsic reward delivered to agent `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvoMatrix {
    mat: Mat,
}

impl SvoMatrix {
    /// Stacks per-agent sharing vectors as columns.
    pub fn from_sharing_vectors(vectors: &[Vec<f64>]) -> Result<Self, SvoError> {
        let n = vectors.len();
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != n {
                return Err(SvoError::VectorLength { expected: n, index: i, got: v.len() });
            }
        }
        let mut mat = Mat::zeros(n, n);
        for (i, v) in vectors.iter().enumerate() {
            for (j, &x) in v.iter().enumerate() {
                mat.set(j, i, x);
            }
        }
        Ok(SvoMatrix { mat })
    }

    pub fn from_mat(mat: Mat) -> Self {
        assert_eq!(mat.rows(), mat.cols(), "sharing matrix must be square");
        SvoMatrix { mat }
    }

    /// No sharing: everyone keeps exactly its own reward.
    pub fn identity(n: usize) -> Self {
        SvoMatrix { mat: Mat::identity(n) }
    }

    /// Uniform prosocial sharing: every agent receives the mean reward.
    pub fn prosocial(n: usize) -> Self {
        let mut mat = Mat::zeros(n, n);
        let w = 1.0 / n as f64;
        for r in 0..n {
            for c in 0..n {
                mat.set(r, c, w);
            }
        }
        SvoMatrix { mat }
    }

    pub fn num_agents(&self) -> usize {
        self.mat.rows()
    }

    pub fn entry(&self, receiver: usize, sharer: usize) -> f64 {
        self.mat.get(receiver, sharer)
    }

    /// Agent `i`'s sharing vector (column `i`).
    pub fn sharing_vector(&self, i: usize) -> Vec<f64> {
        self.mat.col(i)
    }

    /// Agent `j`'s role embedding (row `j`).
    pub fn role_embedding(&self, j: usize) -> Vec<f64> {
        self.mat.row(j).to_vec()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.mat
    }
}

/// Shaped rewards: `out[j] = sum_i entry(j, i) * rewards[i]`, summed in
/// ascending sharer order so tests can compare bit-for-bit.
pub fn shape_rewards(w: &SvoMatrix, rewards: &[f64]) -> Result<Vec<f64>, SvoError> {
    let n = w.num_agents();
    if rewards.len() != n {
        return Err(SvoError::RewardLength { expected: n, got: rewards.len() });
    }
    let mut out = vec![0.0; n];
    for j in 0..n {
        let mut acc = 0.0;
        for i in 0..n {
            acc += w.entry(j, i) * rewards[i];
        }
        out[j] = acc;
    }
    Ok(out)
}

/// Columnwise rank-deviation matrix `W - W_k` (the projection residual).
pub fn rank_deltas(w: &SvoMatrix, k: usize) -> Result<Mat, SvoError> {
    let wk = rank_k_approximation(w.as_mat(), k)?;
    Ok(w.as_mat().sub(&wk))
}

/// `alpha * || column_i(W) - column_i(W_k) ||^2`, the per-agent price of
/// straying from the rank-`k` role manifold. `W_k` is a frozen projection:
/// gradients are taken with respect to the raw column only.
pub fn rank_penalty(
    w: &SvoMatrix,
    cfg: &RankPenaltyConfig,
    agent: crate::core::AgentId,
) -> Result<f64, SvoError> {
    if cfg.alpha == 0.0 {
        return Ok(0.0);
    }
    let delta = rank_deltas(w, cfg.k)?;
    let i = agent.index();
    let sq: f64 = (0..delta.rows()).map(|r| delta.get(r, i).powi(2)).sum();
    Ok(cfg.alpha * sq)
}

/// Ring of the latest `m` role embeddings, zero-padded while shorter.
#[derive(Debug, Clone)]
pub struct RoleHistory {
    n_agents: usize,
    m: usize,
    ring: VecDeque<Vec<f64>>,
}

impl RoleHistory {
    pub fn new(n_agents: usize, m: usize) -> Self {
        RoleHistory { n_agents, m, ring: VecDeque::with_capacity(m) }
    }

    pub fn push(&mut self, embedding: Vec<f64>) {
        debug_assert_eq!(embedding.len(), self.n_agents);
        if self.ring.len() == self.m {
            self.ring.pop_front();
        }
        self.ring.push_back(embedding);
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    /// Exactly `m` embeddings, oldest first, zero-padded at the old end.
    pub fn padded(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.m);
        for _ in 0..self.m - self.ring.len() {
            out.push(vec![0.0; self.n_agents]);
        }
        out.extend(self.ring.iter().cloned());
        out
    }

    /// Flat `m * n_agents` view for network input.
    pub fn flattened(&self) -> Vec<f64> {
        self.padded().concat()
    }
}

const LOGVAR_BOUND: f64 = 2.0;

/// Learnable orientation function of one agent: observation plus the other
/// agents' previous actions go in, a sharing vector (and a variance head for
/// the information regularizer) comes out. The mean is squashed to
/// `[-w_max, w_max]`.
#[derive(Debug, Clone)]
pub struct OrientationNet {
    pub params: ParamSet,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub hidden: usize,
    pub w_max: f64,
}

/// Tape handles for one instantiation of an orientation net's parameters.
#[derive(Debug, Clone)]
pub struct OrientationNodes(pub Vec<NodeId>);

impl OrientationNet {
    pub fn input_dim(n_agents: usize, obs_dim: usize, n_actions: usize) -> usize {
        obs_dim + (n_agents - 1) * n_actions
    }

    fn build(
        n_agents: usize,
        obs_dim: usize,
        n_actions: usize,
        hidden: usize,
        w_max: f64,
        init: Option<&mut RngStream>,
    ) -> Self {
        let input = Self::input_dim(n_agents, obs_dim, n_actions);
        let mut params = ParamSet::new();
        match init {
            Some(rng) => {
                params.push_uniform("w1", hidden, input, input, rng);
                params.push_zeros("b1", hidden, 1);
                params.push_uniform("w_mean", n_agents, hidden, hidden, rng);
                params.push_zeros("b_mean", n_agents, 1);
                params.push_uniform("w_logvar", n_agents, hidden, hidden, rng);
                params.push_zeros("b_logvar", n_agents, 1);
            }
            None => {
                params.push_zeros("w1", hidden, input);
                params.push_zeros("b1", hidden, 1);
                params.push_zeros("w_mean", n_agents, hidden);
                params.push_zeros("b_mean", n_agents, 1);
                params.push_zeros("w_logvar", n_agents, hidden);
                params.push_zeros("b_logvar", n_agents, 1);
            }
        }
        OrientationNet { params, n_agents, obs_dim, n_actions, hidden, w_max }
    }

    pub fn zeros(
        n_agents: usize,
        obs_dim: usize,
        n_actions: usize,
        hidden: usize,
        w_max: f64,
    ) -> Self {
        Self::build(n_agents, obs_dim, n_actions, hidden, w_max, None)
    }

    pub fn random(
        n_agents: usize,
        obs_dim: usize,
        n_actions: usize,
        hidden: usize,
        w_max: f64,
        rng: &mut RngStream,
    ) -> Self {
        Self::build(n_agents, obs_dim, n_actions, hidden, w_max, Some(rng))
    }

    /// Encodes the net input: observation features followed by a one-hot of
    /// each other agent's action (`None` means "no action yet", all zeros).
    pub fn encode_input(
        &self,
        obs: &Observation,
        other_actions: &[Option<usize>],
    ) -> Result<Vec<f64>, SvoError> {
        if other_actions.len() != self.n_agents - 1 {
            return Err(SvoError::OtherActionCount {
                expected: self.n_agents - 1,
                got: other_actions.len(),
            });
        }
        let mut input = Vec::with_capacity(Self::input_dim(self.n_agents, self.obs_dim, self.n_actions));
        input.extend_from_slice(&obs.features);
        debug_assert_eq!(obs.features.len(), self.obs_dim);
        for a in other_actions {
            let mut hot = vec![0.0; self.n_actions];
            if let Some(a) = a {
                hot[*a] = 1.0;
            }
            input.extend_from_slice(&hot);
        }
        Ok(input)
    }

    /// Forward pass on a tape. Returns `(mean, variance)` column vectors of
    /// length `n_agents`; the variance is strictly positive and equals one at
    /// zero init (log-variance parameterization).
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &OrientationNodes,
        obs: &Observation,
        other_actions: &[Option<usize>],
    ) -> Result<(NodeId, NodeId), SvoError> {
        let input = self.encode_input(obs, other_actions)?;
        let x = tape.constant(input, Shape::vector(Self::input_dim(self.n_agents, self.obs_dim, self.n_actions)));
        let [w1, b1, wm, bm, wv, bv] = [nodes.0[0], nodes.0[1], nodes.0[2], nodes.0[3], nodes.0[4], nodes.0[5]];
        let a1 = tape.affine(w1, x, b1);
        let h = tape.tanh(a1);
        let raw_mean = tape.affine(wm, h, bm);
        let squashed = tape.tanh(raw_mean);
        let mean = tape.scale(squashed, self.w_max);
        let raw_lv = tape.affine(wv, h, bv);
        let lv_squashed = tape.tanh(raw_lv);
        let logvar = tape.scale(lv_squashed, LOGVAR_BOUND);
        let var = tape.exp(logvar);
        Ok((mean, var))
    }

    /// Plain evaluation without keeping a tape around.
    pub fn eval(
        &self,
        obs: &Observation,
        other_actions: &[Option<usize>],
    ) -> Result<(Vec<f64>, Vec<f64>), SvoError> {
        let mut tape = Tape::new();
        let nodes = OrientationNodes(self.params.constants(&mut tape));
        let (mean, var) = self.forward(&mut tape, &nodes, obs, other_actions)?;
        Ok((tape.value(mean).to_vec(), tape.value(var).to_vec()))
    }
}

/// Stacks per-agent sharing-vector nodes (columns of `W`) into a single
/// `(n, n)` tensor holding `W^T` row-major, ready for `matmul(TN)`.
pub fn sharing_columns_to_wt(tape: &mut Tape, columns: &[NodeId]) -> NodeId {
    let n = columns.len();
    let packed = tape.pack(columns);
    tape.reshape(packed, Shape::new(n, n))
}

/// Shaped-reward node: `W * r` given the transposed-sharing tensor.
pub fn shape_rewards_node(tape: &mut Tape, wt: NodeId, rewards: NodeId) -> NodeId {
    tape.matmul(wt, rewards, MatKind::TN)
}

/// Role-embedding node for agent `j`: row `j` of `W`, i.e. one entry from
/// every agent's sharing column.
pub fn role_embedding_node(tape: &mut Tape, wt: NodeId, j: usize) -> NodeId {
    let n = tape.shape(wt).rows;
    let idx: Vec<usize> = (0..n).map(|i| i * n + j).collect();
    tape.gather(wt, Arc::new(idx), Shape::vector(n))
}
