//! Role-conditioned stochastic policies, value estimators, and the
//! tape-recorded policy-gradient step.
//!
//! The policy update is deliberately built on the autodiff tape: the updated
//! parameters stay differentiable functions of whatever fed the returns and
//! embeddings, which is what lets the orientation update later differentiate
//! *through* this step.

use crate::autodiff::{backward, MatKind, NodeId, Shape, Tape};
use crate::core::{GridShape, Observation, RngStream};
use crate::params::ParamSet;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("expected {expected} role embeddings, got {got}")]
    EmbeddingCount { expected: usize, got: usize },
    #[error("role embedding has dimension {got}, expected {expected}")]
    EmbeddingDim { expected: usize, got: usize },
    #[error("tabular policy needs a discrete observation index")]
    MissingObsIndex,
    #[error("convolutional policy needs a grid observation")]
    MissingGrid,
    #[error("update produced a non-finite parameter (tensor {0})")]
    NonFiniteUpdate(usize),
    #[error("action probabilities do not form a distribution")]
    BadDistribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyArch {
    /// Logit table indexed by a discrete observation; ignores embeddings.
    Tabular,
    /// One hidden dense layer over observation features and embeddings.
    Dense,
    /// 3x3 convolution over grid planes, then a dense head that also sees
    /// the non-grid features and the embeddings.
    Conv,
}

/// Static description of a policy network's input/output spaces.
#[derive(Debug, Clone)]
pub struct PolicySpec {
    pub arch: PolicyArch,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub n_agents: usize,
    /// Role-embedding history length consumed per decision.
    pub m: usize,
    pub hidden: usize,
    pub grid: Option<GridShape>,
    pub n_obs_states: Option<usize>,
    pub conv_channels: usize,
}

/// Tape handles for one instantiation of a policy's parameters.
#[derive(Debug, Clone)]
pub struct PolicyNodes(pub Vec<NodeId>);

#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub params: ParamSet,
    pub spec: PolicySpec,
    im2col: Option<Arc<Vec<usize>>>,
}

/// Network logits are squashed to this range. Probability ratios up to
/// e^40 stay expressible while log-probabilities can never underflow.
const LOGIT_BOUND: f64 = 20.0;

fn bounded_logits(tape: &mut Tape, raw: NodeId) -> NodeId {
    let scaled = tape.scale(raw, 1.0 / LOGIT_BOUND);
    let squashed = tape.tanh(scaled);
    tape.scale(squashed, LOGIT_BOUND)
}

fn im2col_indices(g: GridShape) -> Arc<Vec<usize>> {
    let (c_in, h, w) = (g.channels, g.height, g.width);
    let (oh, ow) = (h - 2, w - 2);
    let mut idx = Vec::with_capacity(9 * c_in * oh * ow);
    for ci in 0..c_in {
        for dr in 0..3 {
            for dc in 0..3 {
                for r in 0..oh {
                    for c in 0..ow {
                        idx.push(ci * h * w + (r + dr) * w + (c + dc));
                    }
                }
            }
        }
    }
    Arc::new(idx)
}

impl PolicyNet {
    pub fn init(spec: PolicySpec, mut rng: Option<&mut RngStream>) -> Self {
        let mut params = ParamSet::new();
        let emb_dim = spec.m * spec.n_agents;
        let mut push = |params: &mut ParamSet, name: &str, r: usize, c: usize, fan: usize| match rng
            .as_deref_mut()
        {
            Some(rng) => params.push_uniform(name, r, c, fan, rng),
            None => params.push_zeros(name, r, c),
        };
        let im2col = match spec.arch {
            PolicyArch::Tabular => {
                let states = spec.n_obs_states.expect("tabular policy needs n_obs_states");
                params.push_zeros("table", states, spec.n_actions);
                None
            }
            PolicyArch::Dense => {
                let input = spec.obs_dim + emb_dim;
                push(&mut params, "w1", spec.hidden, input, input);
                params.push_zeros("b1", spec.hidden, 1);
                push(&mut params, "w2", spec.n_actions, spec.hidden, spec.hidden);
                params.push_zeros("b2", spec.n_actions, 1);
                None
            }
            PolicyArch::Conv => {
                let g = spec.grid.expect("conv policy needs a grid shape");
                let patch = 9 * g.channels;
                push(&mut params, "kernel", spec.conv_channels, patch, patch);
                let conv_out = spec.conv_channels * (g.height - 2) * (g.width - 2);
                let extras = spec.obs_dim - g.channels * g.height * g.width;
                let input = conv_out + extras + emb_dim;
                push(&mut params, "w1", spec.hidden, input, input);
                params.push_zeros("b1", spec.hidden, 1);
                push(&mut params, "w2", spec.n_actions, spec.hidden, spec.hidden);
                params.push_zeros("b2", spec.n_actions, 1);
                Some(im2col_indices(g))
            }
        };
        PolicyNet { params, spec, im2col }
    }

    pub fn leaves(&self, tape: &mut Tape) -> PolicyNodes {
        PolicyNodes(self.params.leaves(tape))
    }

    pub fn constants(&self, tape: &mut Tape) -> PolicyNodes {
        PolicyNodes(self.params.constants(tape))
    }

    fn check_embeddings(&self, tape: &Tape, emb: &[NodeId]) -> Result<(), PolicyError> {
        if emb.len() != self.spec.m {
            return Err(PolicyError::EmbeddingCount { expected: self.spec.m, got: emb.len() });
        }
        for &e in emb {
            let s = tape.shape(e);
            if s.len() != self.spec.n_agents {
                return Err(PolicyError::EmbeddingDim {
                    expected: self.spec.n_agents,
                    got: s.len(),
                });
            }
        }
        Ok(())
    }

    /// Action distribution for one observation and embedding history
    /// (`emb` holds exactly `m` embedding nodes, oldest first).
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &PolicyNodes,
        obs: &Observation,
        emb: &[NodeId],
    ) -> Result<NodeId, PolicyError> {
        self.check_embeddings(tape, emb)?;
        let logits = match self.spec.arch {
            PolicyArch::Tabular => {
                let state = obs.index.ok_or(PolicyError::MissingObsIndex)?;
                let idx: Vec<usize> =
                    (0..self.spec.n_actions).map(|a| state * self.spec.n_actions + a).collect();
                tape.gather(nodes.0[0], Arc::new(idx), Shape::vector(self.spec.n_actions))
            }
            PolicyArch::Dense => {
                let x = tape.constant(obs.features.clone(), Shape::vector(obs.features.len()));
                let mut parts = vec![x];
                parts.extend_from_slice(emb);
                let input = tape.pack(&parts);
                let [w1, b1, w2, b2] = [nodes.0[0], nodes.0[1], nodes.0[2], nodes.0[3]];
                let a1 = tape.affine(w1, input, b1);
                let h = tape.tanh(a1);
                let raw = tape.affine(w2, h, b2);
                bounded_logits(tape, raw)
            }
            PolicyArch::Conv => {
                let g = obs.grid.ok_or(PolicyError::MissingGrid)?;
                let grid_len = g.channels * g.height * g.width;
                let x = tape.constant(obs.features.clone(), Shape::vector(obs.features.len()));
                let idx = self.im2col.as_ref().expect("conv net has im2col cache").clone();
                let out_hw = (g.height - 2) * (g.width - 2);
                let patches_flat = tape.gather(x, idx, Shape::vector(9 * g.channels * out_hw));
                let patches = tape.reshape(patches_flat, Shape::new(9 * g.channels, out_hw));
                let conv = tape.matmul(nodes.0[0], patches, MatKind::NN);
                let act = tape.tanh(conv);
                let conv_vec =
                    tape.reshape(act, Shape::vector(self.spec.conv_channels * out_hw));
                let mut parts = vec![conv_vec];
                if obs.features.len() > grid_len {
                    let extra_idx: Vec<usize> = (grid_len..obs.features.len()).collect();
                    let extras = tape.gather(
                        x,
                        Arc::new(extra_idx),
                        Shape::vector(obs.features.len() - grid_len),
                    );
                    parts.push(extras);
                }
                parts.extend_from_slice(emb);
                let input = tape.pack(&parts);
                let [w1, b1, w2, b2] = [nodes.0[1], nodes.0[2], nodes.0[3], nodes.0[4]];
                let a1 = tape.affine(w1, input, b1);
                let h = tape.tanh(a1);
                let raw = tape.affine(w2, h, b2);
                bounded_logits(tape, raw)
            }
        };
        Ok(tape.softmax(logits))
    }

    /// Log-probability node of one action.
    pub fn log_prob(
        &self,
        tape: &mut Tape,
        nodes: &PolicyNodes,
        obs: &Observation,
        emb: &[NodeId],
        action: usize,
    ) -> Result<NodeId, PolicyError> {
        let probs = self.forward(tape, nodes, obs, emb)?;
        let pa = tape.element(probs, action);
        Ok(tape.log(pa))
    }

    /// Plain probabilities without keeping a tape.
    pub fn eval_probs(
        &self,
        obs: &Observation,
        emb_values: &[Vec<f64>],
    ) -> Result<Vec<f64>, PolicyError> {
        let mut tape = Tape::new();
        let nodes = self.constants(&mut tape);
        let emb: Vec<NodeId> = emb_values
            .iter()
            .map(|e| tape.constant(e.clone(), Shape::vector(e.len())))
            .collect();
        let probs = self.forward(&mut tape, &nodes, obs, &emb)?;
        Ok(tape.value(probs).to_vec())
    }
}

/// Linear exploration decay from `eps_start` to `eps_end` over `eps_div`
/// episodes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplorationSchedule {
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_div: usize,
}

impl ExplorationSchedule {
    pub fn constant(eps: f64) -> Self {
        ExplorationSchedule { eps_start: eps, eps_end: eps, eps_div: 1 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.eps_start >= self.eps_end && self.eps_end >= 0.0 && self.eps_start <= 1.0) {
            return Err(format!(
                "exploration schedule needs 1 >= eps_start >= eps_end >= 0, got {} -> {}",
                self.eps_start, self.eps_end
            ));
        }
        Ok(())
    }

    pub fn epsilon_at(&self, episode: usize) -> f64 {
        if self.eps_div == 0 {
            return self.eps_end;
        }
        let frac = (episode as f64 / self.eps_div as f64).min(1.0);
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

/// Inverse-CDF sample from a distribution.
pub fn sample_action(probs: &[f64], rng: &mut RngStream) -> Result<usize, PolicyError> {
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(PolicyError::BadDistribution);
    }
    let u = rng.gen_f64() * total;
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probs.len() - 1)
}

/// Sample with the exploration floor applied: with probability `eps` the
/// action is uniform, so every action keeps probability at least
/// `eps / |A|`.
pub fn sample_action_explored(
    probs: &[f64],
    eps: f64,
    rng: &mut RngStream,
) -> Result<usize, PolicyError> {
    let n = probs.len() as f64;
    let mixed: Vec<f64> = probs.iter().map(|p| (1.0 - eps) * p + eps / n).collect();
    sample_action(&mixed, rng)
}

/// One timestep of data feeding a policy-gradient update.
pub struct UpdateStep<'a> {
    pub obs: &'a Observation,
    pub action: usize,
    /// Embedding-history nodes, oldest first (constants or eta-dependent).
    pub emb: Vec<NodeId>,
    /// Return (or advantage) weight node; constant or eta-dependent.
    pub weight: NodeId,
}

/// Ascends `sum_t log pi(a_t | o_t, e_t) * G_t` with learning rate `beta`,
/// recorded on the tape: `theta_hat = theta + beta * grad`.
///
/// Returns the updated parameter nodes. Steps may come from many episodes.
pub fn policy_gradient_update(
    tape: &mut Tape,
    net: &PolicyNet,
    leaves: &PolicyNodes,
    steps: &[UpdateStep<'_>],
    beta: f64,
) -> Result<PolicyNodes, PolicyError> {
    if steps.is_empty() || beta == 0.0 {
        return Ok(leaves.clone());
    }
    let mut surrogate: Option<NodeId> = None;
    for step in steps {
        let lp = net.log_prob(tape, leaves, step.obs, &step.emb, step.action)?;
        let term = tape.mul(lp, step.weight);
        surrogate = Some(match surrogate {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let objective = surrogate.expect("at least one step");
    let grads = backward(tape, objective);
    let mut updated = Vec::with_capacity(leaves.0.len());
    for (i, &leaf) in leaves.0.iter().enumerate() {
        let new = match grads.wrt(leaf) {
            Some(g) => {
                let delta = tape.scale(g, beta);
                tape.add(leaf, delta)
            }
            None => leaf,
        };
        if tape.value(new).iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFiniteUpdate(i));
        }
        updated.push(new);
    }
    Ok(PolicyNodes(updated))
}

/// State-value estimator (dense or convolutional head, no embeddings).
#[derive(Debug, Clone)]
pub struct ValueNet {
    pub params: ParamSet,
    arch: PolicyArch,
    hidden: usize,
    conv_channels: usize,
    grid: Option<GridShape>,
    im2col: Option<Arc<Vec<usize>>>,
}

impl ValueNet {
    pub fn init(
        arch: PolicyArch,
        obs_dim: usize,
        grid: Option<GridShape>,
        hidden: usize,
        conv_channels: usize,
        rng: &mut RngStream,
    ) -> Self {
        let mut params = ParamSet::new();
        let im2col = match arch {
            PolicyArch::Conv => {
                let g = grid.expect("conv value net needs a grid");
                let patch = 9 * g.channels;
                params.push_uniform("kernel", conv_channels, patch, patch, rng);
                let conv_out = conv_channels * (g.height - 2) * (g.width - 2);
                let extras = obs_dim - g.channels * g.height * g.width;
                let input = conv_out + extras;
                params.push_uniform("w1", hidden, input, input, rng);
                params.push_zeros("b1", hidden, 1);
                params.push_uniform("w2", 1, hidden, hidden, rng);
                params.push_zeros("b2", 1, 1);
                Some(im2col_indices(g))
            }
            _ => {
                params.push_uniform("w1", hidden, obs_dim, obs_dim, rng);
                params.push_zeros("b1", hidden, 1);
                params.push_uniform("w2", 1, hidden, hidden, rng);
                params.push_zeros("b2", 1, 1);
                None
            }
        };
        ValueNet { params, arch, hidden, conv_channels, grid, im2col }
    }

    fn forward(&self, tape: &mut Tape, nodes: &[NodeId], obs: &Observation) -> NodeId {
        let x = tape.constant(obs.features.clone(), Shape::vector(obs.features.len()));
        let input = match self.arch {
            PolicyArch::Conv => {
                let g = self.grid.expect("conv value net has grid");
                let grid_len = g.channels * g.height * g.width;
                let out_hw = (g.height - 2) * (g.width - 2);
                let idx = self.im2col.as_ref().unwrap().clone();
                let patches_flat = tape.gather(x, idx, Shape::vector(9 * g.channels * out_hw));
                let patches = tape.reshape(patches_flat, Shape::new(9 * g.channels, out_hw));
                let conv = tape.matmul(nodes[0], patches, MatKind::NN);
                let act = tape.tanh(conv);
                let conv_vec = tape.reshape(act, Shape::vector(self.conv_channels * out_hw));
                if obs.features.len() > grid_len {
                    let extra_idx: Vec<usize> = (grid_len..obs.features.len()).collect();
                    let extras = tape.gather(
                        x,
                        Arc::new(extra_idx),
                        Shape::vector(obs.features.len() - grid_len),
                    );
                    tape.pack(&[conv_vec, extras])
                } else {
                    conv_vec
                }
            }
            _ => x,
        };
        let off = if self.arch == PolicyArch::Conv { 1 } else { 0 };
        let [w1, b1, w2, b2] = [nodes[off], nodes[off + 1], nodes[off + 2], nodes[off + 3]];
        let a1 = tape.affine(w1, input, b1);
        let h = tape.tanh(a1);
        let out = tape.affine(w2, h, b2);
        let _ = self.hidden;
        out
    }

    pub fn eval(&self, obs: &Observation) -> f64 {
        let mut tape = Tape::new();
        let nodes = self.params.constants(&mut tape);
        let v = self.forward(&mut tape, &nodes, obs);
        tape.scalar_value(v)
    }
}

/// One TD(0) step: regress each `V(o_t)` toward `r_t + gamma * V(o_{t+1})`
/// (no bootstrap on terminal steps), descending the squared error with the
/// given optimizer. Returns the mean squared TD error before the step.
pub fn value_update(
    net: &mut ValueNet,
    episodes: &[Vec<(Observation, f64, bool)>],
    gamma: f64,
    opt: &mut crate::params::Adam,
) -> f64 {
    let mut targets: Vec<Vec<f64>> = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let mut t_ep = Vec::with_capacity(ep.len());
        for (t, (obs, reward, done)) in ep.iter().enumerate() {
            let bootstrap = if *done {
                0.0
            } else if t + 1 < ep.len() {
                net.eval(&ep[t + 1].0)
            } else {
                // Truncated tail: bootstrap from the last observed state.
                net.eval(obs)
            };
            t_ep.push(reward + gamma * bootstrap);
        }
        targets.push(t_ep);
    }

    let mut tape = Tape::new();
    let leaves = net.params.leaves(&mut tape);
    let mut loss: Option<NodeId> = None;
    let mut count = 0usize;
    for (ep, t_ep) in episodes.iter().zip(&targets) {
        for ((obs, _, _), &target) in ep.iter().zip(t_ep) {
            let v = net.forward(&mut tape, &leaves, obs);
            let tgt = tape.constant_scalar(target);
            let diff = tape.sub(v, tgt);
            let sq = tape.mul(diff, diff);
            loss = Some(match loss {
                Some(acc) => tape.add(acc, sq),
                None => sq,
            });
            count += 1;
        }
    }
    let Some(total) = loss else { return 0.0 };
    let mean = tape.scale(total, 1.0 / count as f64);
    let grads = backward(&mut tape, mean);
    let grad_values = net.params.collect_grads(&tape, &grads, &leaves);
    opt.step(&mut net.params, &grad_values);
    tape.scalar_value(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::AgentId;

    fn dense_spec() -> PolicySpec {
        PolicySpec {
            arch: PolicyArch::Dense,
            n_actions: 3,
            obs_dim: 4,
            n_agents: 2,
            m: 2,
            hidden: 8,
            grid: None,
            n_obs_states: None,
            conv_channels: 0,
        }
    }

    fn zero_emb(m: usize, n: usize) -> Vec<Vec<f64>> {
        vec![vec![0.0; n]; m]
    }

    #[test]
    fn zero_parameters_give_uniform_distribution() {
        let net = PolicyNet::init(dense_spec(), None);
        let obs = Observation::flat(vec![0.3, -0.7, 1.0, 0.0]);
        let probs = net.eval_probs(&obs, &zero_emb(2, 2)).unwrap();
        for p in &probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one_for_random_parameters() {
        let mut rng = RngStream::new(3, "pol");
        for seed in 0..5 {
            let mut r = rng.fork(&format!("s{seed}"));
            let net = PolicyNet::init(dense_spec(), Some(&mut r));
            let obs = Observation::flat(vec![1.0, 2.0, -1.0, 0.5]);
            let probs = net.eval_probs(&obs, &zero_emb(2, 2)).unwrap();
            let total: f64 = probs.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn role_embedding_changes_the_distribution() {
        let mut rng = RngStream::new(4, "pol-emb");
        let net = PolicyNet::init(dense_spec(), Some(&mut rng));
        let obs = Observation::flat(vec![0.1, 0.2, 0.3, 0.4]);
        let p1 = net.eval_probs(&obs, &[vec![0.0, 0.0], vec![1.0, -1.0]]).unwrap();
        let p2 = net.eval_probs(&obs, &[vec![0.0, 0.0], vec![-1.0, 1.0]]).unwrap();
        assert_ne!(p1, p2);
    }

    #[test]
    fn wrong_embedding_shape_is_rejected() {
        let net = PolicyNet::init(dense_spec(), None);
        let obs = Observation::flat(vec![0.0; 4]);
        assert!(matches!(
            net.eval_probs(&obs, &zero_emb(1, 2)),
            Err(PolicyError::EmbeddingCount { .. })
        ));
        assert!(matches!(
            net.eval_probs(&obs, &zero_emb(2, 3)),
            Err(PolicyError::EmbeddingDim { .. })
        ));
    }

    fn tabular_spec(states: usize, actions: usize) -> PolicySpec {
        PolicySpec {
            arch: PolicyArch::Tabular,
            n_actions: actions,
            obs_dim: states,
            n_agents: 2,
            m: 1,
            hidden: 0,
            grid: None,
            n_obs_states: Some(states),
            conv_channels: 0,
        }
    }

    #[test]
    fn tabular_log_gradient_is_onehot_minus_probs() {
        let mut net = PolicyNet::init(tabular_spec(2, 3), None);
        net.params.tensors[0].data = vec![0.3, -0.2, 0.9, 0.0, 0.1, -0.5];
        let mut features = vec![0.0; 2];
        features[1] = 1.0;
        let obs = Observation::indexed(features, 1);

        let mut tape = Tape::new();
        let leaves = net.leaves(&mut tape);
        let e = tape.constant(vec![0.0, 0.0], Shape::vector(2));
        let lp = net.log_prob(&mut tape, &leaves, &obs, &[e], 2).unwrap();
        let grads = backward(&mut tape, lp);
        let g = tape.value(grads.wrt(leaves.0[0]).unwrap()).to_vec();

        let probs = net.eval_probs(&obs, &[vec![0.0, 0.0]]).unwrap();
        // Row 0 untouched; row 1 holds onehot(2) - pi exactly.
        assert_eq!(&g[..3], &[0.0, 0.0, 0.0]);
        for a in 0..3 {
            let expect = if a == 2 { 1.0 - probs[a] } else { -probs[a] };
            assert!((g[3 + a] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn update_with_zero_returns_or_zero_rate_is_identity() {
        let mut rng = RngStream::new(8, "pg");
        let net = PolicyNet::init(dense_spec(), Some(&mut rng));
        let obs = Observation::flat(vec![0.5, 0.5, -0.5, 0.0]);

        for beta in [0.0, 0.3] {
            let mut tape = Tape::new();
            let leaves = net.leaves(&mut tape);
            let e0 = tape.constant(vec![0.0, 0.0], Shape::vector(2));
            let weight = tape.constant_scalar(0.0);
            let steps = vec![UpdateStep { obs: &obs, action: 1, emb: vec![e0, e0], weight }];
            let updated = policy_gradient_update(&mut tape, &net, &leaves, &steps, beta).unwrap();
            for (&new, (&old, t)) in
                updated.0.iter().zip(leaves.0.iter().zip(&net.params.tensors))
            {
                assert_eq!(tape.value(new), tape.value(old), "tensor {} moved", t.name);
            }
        }
    }

    #[test]
    fn single_step_tabular_update_matches_hand_computed_gradient() {
        let mut net = PolicyNet::init(tabular_spec(1, 2), None);
        net.params.tensors[0].data = vec![0.4, -0.1];
        let obs = Observation::indexed(vec![1.0], 0);
        let beta = 0.25;
        let g_return = 1.7;

        let mut tape = Tape::new();
        let leaves = net.leaves(&mut tape);
        let e = tape.constant(vec![0.0, 0.0], Shape::vector(2));
        let weight = tape.constant_scalar(g_return);
        let steps = vec![UpdateStep { obs: &obs, action: 0, emb: vec![e], weight }];
        let updated = policy_gradient_update(&mut tape, &net, &leaves, &steps, beta).unwrap();

        let z: [f64; 2] = [0.4, -0.1];
        let mx = z[0].max(z[1]);
        let ex: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let total: f64 = ex.iter().sum();
        let pi: Vec<f64> = ex.iter().map(|e| e / total).collect();
        let expect = [
            z[0] + beta * g_return * (1.0 - pi[0]),
            z[1] + beta * g_return * (0.0 - pi[1]),
        ];
        let got = tape.value(updated.0[0]);
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(9, "pg-fd");
        let net = PolicyNet::init(dense_spec(), Some(&mut rng));
        let observations = [
            Observation::flat(vec![0.5, -0.3, 0.2, 1.0]),
            Observation::flat(vec![-1.0, 0.4, 0.0, 0.3]),
        ];
        let actions = [1usize, 2usize];
        let weights = [1.5f64, -0.7f64];
        let emb = [vec![0.2, -0.2], vec![0.4, 0.1]];

        let surrogate_value = |params: &ParamSet| -> f64 {
            let mut tape = Tape::new();
            let leaves = PolicyNodes(params.constants(&mut tape));
            let mut total = 0.0;
            for i in 0..2 {
                let e: Vec<NodeId> = emb
                    .iter()
                    .map(|v| tape.constant(v.clone(), Shape::vector(2)))
                    .collect();
                let lp = net
                    .log_prob(&mut tape, &leaves, &observations[i], &e, actions[i])
                    .unwrap();
                total += tape.scalar_value(lp) * weights[i];
            }
            total
        };

        let mut tape = Tape::new();
        let leaves = net.leaves(&mut tape);
        let mut surrogate: Option<NodeId> = None;
        for i in 0..2 {
            let e: Vec<NodeId> =
                emb.iter().map(|v| tape.constant(v.clone(), Shape::vector(2))).collect();
            let lp = net.log_prob(&mut tape, &leaves, &observations[i], &e, actions[i]).unwrap();
            let w = tape.constant_scalar(weights[i]);
            let term = tape.mul(lp, w);
            surrogate = Some(match surrogate {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
        let grads = backward(&mut tape, surrogate.unwrap());

        let eps = 1e-6;
        for (ti, tensor) in net.params.tensors.iter().enumerate() {
            let g = tape.value(grads.wrt(leaves.0[ti]).unwrap()).to_vec();
            for j in (0..tensor.data.len()).step_by(3) {
                let mut hi = net.params.clone();
                let mut lo = net.params.clone();
                hi.tensors[ti].data[j] += eps;
                lo.tensors[ti].data[j] -= eps;
                let fd = (surrogate_value(&hi) - surrogate_value(&lo)) / (2.0 * eps);
                let rel = (g[j] - fd).abs() / fd.abs().max(1e-6);
                assert!(rel < 1e-4, "tensor {ti} entry {j}: {} vs {fd}", g[j]);
            }
        }
    }

    #[test]
    fn sampling_contract() {
        let mut rng = RngStream::new(11, "sample");
        // One-hot: always that action.
        for _ in 0..20 {
            assert_eq!(sample_action(&[0.0, 1.0, 0.0], &mut rng).unwrap(), 1);
        }
        // Same rng state: same action.
        let mut r1 = RngStream::new(12, "s");
        let mut r2 = RngStream::new(12, "s");
        let p = [0.25, 0.25, 0.25, 0.25];
        for _ in 0..50 {
            assert_eq!(sample_action(&p, &mut r1).unwrap(), sample_action(&p, &mut r2).unwrap());
        }
        assert!(sample_action(&[0.7, 0.7], &mut rng).is_err());
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let mut rng = RngStream::new(13, "freq");
        let p = [0.25; 4];
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_action(&p, &mut rng).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() < 0.01, "frequency {f}");
        }
    }

    #[test]
    fn exploration_floor_holds_empirically() {
        let mut rng = RngStream::new(14, "floor");
        // Degenerate greedy distribution, eps = 0.2 over 4 actions: every
        // action should appear with frequency >= 0.05 - tolerance.
        let p = [1.0, 0.0, 0.0, 0.0];
        let eps = 0.2;
        let n = 50_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_action_explored(&p, eps, &mut rng).unwrap()] += 1;
        }
        for (a, c) in counts.iter().enumerate().skip(1) {
            let f = *c as f64 / n as f64;
            assert!(f > 0.05 - 0.005, "action {a} frequency {f}");
        }
    }

    #[test]
    fn exploration_schedule_decays_linearly() {
        let s = ExplorationSchedule { eps_start: 1.0, eps_end: 0.1, eps_div: 100 };
        s.validate().unwrap();
        assert_eq!(s.epsilon_at(0), 1.0);
        assert!((s.epsilon_at(50) - 0.55).abs() < 1e-12);
        assert!((s.epsilon_at(100) - 0.1).abs() < 1e-12);
        assert!((s.epsilon_at(10_000) - 0.1).abs() < 1e-12);
        assert!(ExplorationSchedule { eps_start: 0.1, eps_end: 0.5, eps_div: 1 }
            .validate()
            .is_err());
    }

    #[test]
    fn value_net_converges_on_constant_rewards() {
        let mut rng = RngStream::new(15, "val");
        let obs = Observation::flat(vec![1.0, 0.0]);

        // Zero rewards: value goes to zero.
        let mut net = ValueNet::init(PolicyArch::Dense, 2, None, 8, 0, &mut rng);
        let mut opt = crate::params::Adam::new(&net.params, 0.01);
        let ep: Vec<(Observation, f64, bool)> =
            (0..10).map(|_| (obs.clone(), 0.0, false)).collect();
        for _ in 0..300 {
            value_update(&mut net, &[ep.clone()], 0.5, &mut opt);
        }
        assert!(net.eval(&obs).abs() < 0.05);

        // Constant reward c with gamma = 0.5: fixed point at 2c.
        let c = 0.8;
        let mut net = ValueNet::init(PolicyArch::Dense, 2, None, 8, 0, &mut rng);
        let mut opt = crate::params::Adam::new(&net.params, 0.02);
        let ep: Vec<(Observation, f64, bool)> =
            (0..10).map(|_| (obs.clone(), c, false)).collect();
        for _ in 0..2000 {
            value_update(&mut net, &[ep.clone()], 0.5, &mut opt);
        }
        let v = net.eval(&obs);
        assert!((v - 2.0 * c).abs() < 0.1, "value {v} expected {}", 2.0 * c);
    }

    #[test]
    fn td_error_decreases_on_a_fixed_batch() {
        let mut rng = RngStream::new(16, "val-td");
        let mut net = ValueNet::init(PolicyArch::Dense, 3, None, 8, 0, &mut rng);
        let mut opt = crate::params::Adam::new(&net.params, 0.01);
        let ep: Vec<(Observation, f64, bool)> = (0..6)
            .map(|i| {
                (Observation::flat(vec![i as f64 / 6.0, 1.0, 0.0]), (i % 3) as f64 - 1.0, i == 5)
            })
            .collect();
        let first = value_update(&mut net, &[ep.clone()], 0.9, &mut opt);
        let mut last = first;
        for _ in 0..40 {
            last = value_update(&mut net, &[ep.clone()], 0.9, &mut opt);
        }
        assert!(last < first, "td error went {first} -> {last}");
        let _ = AgentId(0);
    }
}
