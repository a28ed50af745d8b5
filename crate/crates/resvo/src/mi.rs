//! Variational mutual-information regularizer.
//!
//! A shared autoregressive encoder reads an agent's own
//! observation/action history plus the current joint observation and joint
//! action, and predicts a diagonal-Gaussian belief over that agent's role
//! embedding. Pulling the orientation functions' embedding distribution
//! toward this posterior (a KL term) ties roles to long-term behavior.

use crate::autodiff::{backward, MatKind, NodeId, Shape, Tape};
use crate::core::{Observation, ReplayBuffer, RngStream};
use crate::params::{Adam, ParamSet};
use crate::svo::OrientationNet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MiError {
    #[error("belief dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("history step {index} has observation dim {got}, expected {expected}")]
    BadHistory { index: usize, expected: usize, got: usize },
    #[error("joint input expected {expected} agents, got {got}")]
    JointSize { expected: usize, got: usize },
    #[error(transparent)]
    Svo(#[from] crate::svo::SvoError),
}

/// Diagonal Gaussian over role embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Closed-form `KL(P || Q)` for diagonal Gaussians.
pub fn kl_gaussian(p: &GaussianBelief, q: &GaussianBelief) -> Result<f64, MiError> {
    if p.mean.len() != q.mean.len() {
        return Err(MiError::DimensionMismatch(p.mean.len(), q.mean.len()));
    }
    let mut total = 0.0;
    for d in 0..p.mean.len() {
        let diff = p.mean[d] - q.mean[d];
        total += (q.var[d] / p.var[d]).ln() + (p.var[d] + diff * diff) / q.var[d] - 1.0;
    }
    Ok(0.5 * total)
}

/// Mean KL over belief pairs (orientation-side first, posterior second).
pub fn mi_loss(pairs: &[(GaussianBelief, GaussianBelief)]) -> Result<f64, MiError> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, q) in pairs {
        total += kl_gaussian(p, q)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Tape node for the same closed-form KL, differentiable with respect to
/// both parameter sets.
pub fn gaussian_kl_node(
    tape: &mut Tape,
    p_mean: NodeId,
    p_var: NodeId,
    q_mean: NodeId,
    q_var: NodeId,
) -> NodeId {
    let d = tape.shape(p_mean).len();
    let log_q = tape.log(q_var);
    let log_p = tape.log(p_var);
    let log_ratio = tape.sub(log_q, log_p);
    let diff = tape.sub(p_mean, q_mean);
    let diff2 = tape.mul(diff, diff);
    let num = tape.add(p_var, diff2);
    let inv_q = tape.recip(q_var);
    let ratio = tape.mul(num, inv_q);
    let terms = tape.add(log_ratio, ratio);
    let total = tape.sum(terms);
    let shifted = tape.shift(total, -(d as f64));
    tape.scale(shifted, 0.5)
}

/// One step of an agent's own history: its observation and its action.
#[derive(Debug, Clone)]
pub struct HistStep {
    pub obs: Observation,
    pub action: usize,
}

const LOGVAR_BOUND: f64 = 2.0;
const TIME_SCALE: f64 = 0.01;

/// Shared variational posterior: single-head causal self-attention over the
/// agent's history with a query token built from the joint observation and
/// joint action.
#[derive(Debug, Clone)]
pub struct PosteriorNet {
    pub params: ParamSet,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub width: usize,
    /// Attention window: only this many of the most recent history steps
    /// are attended to (keeps long-horizon encoding affordable).
    pub max_history: usize,
}

impl PosteriorNet {
    fn hist_tok_dim(&self) -> usize {
        self.obs_dim + self.n_actions + 1
    }

    fn query_tok_dim(&self) -> usize {
        self.n_agents * (self.obs_dim + self.n_actions)
    }

    fn build(
        n_agents: usize,
        obs_dim: usize,
        n_actions: usize,
        width: usize,
        max_history: usize,
        init: Option<&mut RngStream>,
    ) -> Self {
        let mut net = PosteriorNet {
            params: ParamSet::new(),
            n_agents,
            obs_dim,
            n_actions,
            width,
            max_history,
        };
        let (ht, qt) = (net.hist_tok_dim(), net.query_tok_dim());
        let p = &mut net.params;
        match init {
            Some(rng) => {
                p.push_uniform("w_hist", width, ht, ht, rng);
                p.push_zeros("b_hist", width, 1);
                p.push_uniform("w_query", width, qt, qt, rng);
                p.push_zeros("b_query", width, 1);
                p.push_uniform("wq", width, width, width, rng);
                p.push_uniform("wk", width, width, width, rng);
                p.push_uniform("wv", width, width, width, rng);
                p.push_uniform("w_mean", n_agents, width, width, rng);
                p.push_zeros("b_mean", n_agents, 1);
                p.push_uniform("w_logvar", n_agents, width, width, rng);
                p.push_zeros("b_logvar", n_agents, 1);
            }
            None => {
                p.push_zeros("w_hist", width, ht);
                p.push_zeros("b_hist", width, 1);
                p.push_zeros("w_query", width, qt);
                p.push_zeros("b_query", width, 1);
                p.push_zeros("wq", width, width);
                p.push_zeros("wk", width, width);
                p.push_zeros("wv", width, width);
                p.push_zeros("w_mean", n_agents, width);
                p.push_zeros("b_mean", n_agents, 1);
                p.push_zeros("w_logvar", n_agents, width);
                p.push_zeros("b_logvar", n_agents, 1);
            }
        }
        net
    }

    pub fn zeros(n_agents: usize, obs_dim: usize, n_actions: usize, max_history: usize) -> Self {
        Self::build(n_agents, obs_dim, n_actions, 16, max_history, None)
    }

    pub fn random(
        n_agents: usize,
        obs_dim: usize,
        n_actions: usize,
        max_history: usize,
        rng: &mut RngStream,
    ) -> Self {
        Self::build(n_agents, obs_dim, n_actions, 16, max_history, Some(rng))
    }

    fn encode_hist_token(&self, step: &HistStep, index: usize) -> Result<Vec<f64>, MiError> {
        if step.obs.features.len() != self.obs_dim {
            return Err(MiError::BadHistory {
                index,
                expected: self.obs_dim,
                got: step.obs.features.len(),
            });
        }
        let mut tok = Vec::with_capacity(self.hist_tok_dim());
        tok.extend_from_slice(&step.obs.features);
        let mut hot = vec![0.0; self.n_actions];
        hot[step.action] = 1.0;
        tok.extend_from_slice(&hot);
        tok.push(index as f64 * TIME_SCALE);
        Ok(tok)
    }

    fn encode_query_token(
        &self,
        joint_obs: &[Observation],
        joint_actions: &[usize],
    ) -> Result<Vec<f64>, MiError> {
        if joint_obs.len() != self.n_agents || joint_actions.len() != self.n_agents {
            return Err(MiError::JointSize {
                expected: self.n_agents,
                got: joint_obs.len().min(joint_actions.len()),
            });
        }
        let mut tok = Vec::with_capacity(self.query_tok_dim());
        for (obs, &a) in joint_obs.iter().zip(joint_actions) {
            tok.extend_from_slice(&obs.features);
            let mut hot = vec![0.0; self.n_actions];
            hot[a] = 1.0;
            tok.extend_from_slice(&hot);
        }
        Ok(tok)
    }

    /// Belief over agent `i`'s role embedding given its history through
    /// `t - 1` and the joint observation/action at `t`. Output depends only
    /// on the inputs passed here, so causality holds by construction.
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        history: &[HistStep],
        joint_obs: &[Observation],
        joint_actions: &[usize],
    ) -> Result<(NodeId, NodeId), MiError> {
        let [w_hist, b_hist, w_query, b_query, wq, wk, wv] =
            [nodes[0], nodes[1], nodes[2], nodes[3], nodes[4], nodes[5], nodes[6]];
        let [w_mean, b_mean, w_logvar, b_logvar] = [nodes[7], nodes[8], nodes[9], nodes[10]];

        let start = history.len().saturating_sub(self.max_history);
        let mut embedded: Vec<NodeId> = Vec::with_capacity(history.len() - start + 1);
        for (index, step) in history.iter().enumerate().skip(start) {
            let tok = self.encode_hist_token(step, index)?;
            let x = tape.constant(tok, Shape::vector(self.hist_tok_dim()));
            let a = tape.affine(w_hist, x, b_hist);
            embedded.push(tape.tanh(a));
        }
        let qtok = self.encode_query_token(joint_obs, joint_actions)?;
        let xq = tape.constant(qtok, Shape::vector(self.query_tok_dim()));
        let aq = tape.affine(w_query, xq, b_query);
        embedded.push(tape.tanh(aq));

        let query = tape.matmul(wq, *embedded.last().unwrap(), MatKind::NN);
        let inv_sqrt = 1.0 / (self.width as f64).sqrt();
        let mut scores = Vec::with_capacity(embedded.len());
        let mut values = Vec::with_capacity(embedded.len());
        for &tok in &embedded {
            let key = tape.matmul(wk, tok, MatKind::NN);
            let dot = tape.dot(query, key);
            scores.push(tape.scale(dot, inv_sqrt));
            values.push(tape.matmul(wv, tok, MatKind::NN));
        }
        let score_vec = tape.pack(&scores);
        let attn = tape.softmax(score_vec);
        let mut out: Option<NodeId> = None;
        for (l, &v) in values.iter().enumerate() {
            let a_l = tape.element(attn, l);
            let a_b = tape.broadcast(a_l, Shape::vector(self.width));
            let contrib = tape.mul(a_b, v);
            out = Some(match out {
                Some(acc) => tape.add(acc, contrib),
                None => contrib,
            });
        }
        let out = out.expect("at least the query token");

        let mean = tape.affine(w_mean, out, b_mean);
        let raw_lv = tape.affine(w_logvar, out, b_logvar);
        let lv_squashed = tape.tanh(raw_lv);
        let logvar = tape.scale(lv_squashed, LOGVAR_BOUND);
        let var = tape.exp(logvar);
        Ok((mean, var))
    }

    /// Plain evaluation without keeping a tape.
    pub fn eval(
        &self,
        history: &[HistStep],
        joint_obs: &[Observation],
        joint_actions: &[usize],
    ) -> Result<GaussianBelief, MiError> {
        let mut tape = Tape::new();
        let nodes = self.params.constants(&mut tape);
        let (mean, var) = self.forward(&mut tape, &nodes, history, joint_obs, joint_actions)?;
        Ok(GaussianBelief { mean: tape.value(mean).to_vec(), var: tape.value(var).to_vec() })
    }
}

/// Result of one regularizer update.
pub struct MiOutcome {
    /// Mean KL before the posterior step.
    pub loss: f64,
    /// Unscaled gradient of the loss with respect to each agent's
    /// orientation parameters (the trainer applies its own weight).
    pub eta_grads: Vec<Vec<Vec<f64>>>,
}

/// Minibatch update of the posterior, also reporting the loss gradient with
/// respect to every orientation function.
///
/// Samples uniform (episode, timestep) pairs from the replay buffer. The
/// orientation side is evaluated under the lagged-action convention (the
/// embedding at `t` came from actions at `t - 1`); the posterior conditions
/// on the joint observation and joint action at `t`.
pub fn mi_update(
    posterior: &mut PosteriorNet,
    orientations: &[OrientationNet],
    buffer: &ReplayBuffer,
    batch: usize,
    rng: &mut RngStream,
    opt: &mut Adam,
) -> Result<MiOutcome, MiError> {
    let n = orientations.len();
    let samples = buffer.sample_steps(batch, rng);
    if samples.is_empty() {
        return Ok(MiOutcome { loss: 0.0, eta_grads: vec![Vec::new(); n] });
    }

    let mut tape = Tape::new();
    let phi = posterior.params.leaves(&mut tape);
    let eta: Vec<Vec<NodeId>> = orientations.iter().map(|o| o.params.leaves(&mut tape)).collect();

    let mut total: Option<NodeId> = None;
    for &(e_idx, t) in &samples {
        let episode = buffer.get(e_idx);
        // Orientation-side beliefs for every agent's sharing column.
        let mut col_means = Vec::with_capacity(n);
        let mut col_vars = Vec::with_capacity(n);
        for (j, net) in orientations.iter().enumerate() {
            let obs = &episode.agents[j].steps[t].observation;
            let prev: Vec<Option<usize>> = (0..n)
                .filter(|&o| o != j)
                .map(|o| {
                    if t == 0 {
                        None
                    } else {
                        Some(episode.agents[o].steps[t - 1].action)
                    }
                })
                .collect();
            let nodes = crate::svo::OrientationNodes(eta[j].clone());
            let (mean, var) = net.forward(&mut tape, &nodes, obs, &prev)?;
            col_means.push(mean);
            col_vars.push(var);
        }
        let joint_obs: Vec<Observation> =
            (0..n).map(|j| episode.agents[j].steps[t].observation.clone()).collect();
        let joint_actions = episode.joint_action(t);

        for i in 0..n {
            // Row i of the mean/variance matrices: one entry per column.
            let mean_parts: Vec<NodeId> =
                col_means.iter().map(|&m| tape.element(m, i)).collect();
            let var_parts: Vec<NodeId> = col_vars.iter().map(|&v| tape.element(v, i)).collect();
            let p_mean = tape.pack(&mean_parts);
            let p_var = tape.pack(&var_parts);

            let history: Vec<HistStep> = episode.agents[i].steps[..t]
                .iter()
                .map(|s| HistStep { obs: s.observation.clone(), action: s.action })
                .collect();
            let (q_mean, q_var) =
                posterior.forward(&mut tape, &phi, &history, &joint_obs, &joint_actions)?;
            let kl = gaussian_kl_node(&mut tape, p_mean, p_var, q_mean, q_var);
            total = Some(match total {
                Some(acc) => tape.add(acc, kl),
                None => kl,
            });
        }
    }
    let total = total.expect("nonempty batch");
    let loss = tape.scale(total, 1.0 / (samples.len() * n) as f64);
    let loss_value = tape.scalar_value(loss);
    let grads = backward(&mut tape, loss);

    let phi_grads = posterior.params.collect_grads(&tape, &grads, &phi);
    opt.step(&mut posterior.params, &phi_grads);

    let eta_grads = orientations
        .iter()
        .zip(&eta)
        .map(|(net, leaves)| net.params.collect_grads(&tape, &grads, leaves))
        .collect();
    Ok(MiOutcome { loss: loss_value, eta_grads })
}
