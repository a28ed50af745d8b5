//! Named parameter tensors shared by all learnable function approximators,
//! plus the optимizers that update them.

use crate::autodiff::{NodeId, Shape, Tape};
use crate::core::RngStream;

/// One named parameter tensor (row-major).
#[derive(Debug, Clone)]
pub struct Tensor {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f64>,
}

/// Ordered collection of parameter tensors.
///
/// The order is part of the contract: tape leaves, gradients, optimizer
/// moments, and checkpoints all align by position.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { tensors: Vec::new() }
    }

    pub fn push_zeros(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: Shape::new(rows, cols),
            data: vec![0.0; rows * cols],
        });
        self.tensors.len() - 1
    }

    /// Uniform init in `[-s, s]` with `s = 1/sqrt(fan_in)`.
    pub fn push_uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut RngStream,
    ) -> usize {
        let s = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: Shape::new(rows, cols),
            data: (0..rows * cols).map(|_| rng.gen_range_f64(-s, s)).collect(),
        });
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Instantiates every tensor as a differentiable tape leaf.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.tensors.iter().map(|t| tape.param(t.data.clone(), t.shape)).collect()
    }

    /// Instantiates every tensor as a frozen constant.
    pub fn constants(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.tensors.iter().map(|t| tape.constant(t.data.clone(), t.shape)).collect()
    }

    /// Copies values back from tape nodes (e.g. committing an updated policy).
    pub fn assign_from_nodes(&mut self, tape: &Tape, nodes: &[NodeId]) {
        assert_eq!(nodes.len(), self.tensors.len());
        for (t, &n) in self.tensors.iter_mut().zip(nodes) {
            t.data.copy_from_slice(tape.value(n));
        }
    }

    /// Collects gradient values aligned with the tensor order; tensors with
    /// no gradient path get zeros.
    pub fn collect_grads(
        &self,
        tape: &Tape,
        grads: &crate::autodiff::Gradients,
        leaves: &[NodeId],
    ) -> Vec<Vec<f64>> {
        leaves
            .iter()
            .zip(&self.tensors)
            .map(|(&leaf, t)| match grads.wrt(leaf) {
                Some(g) => tape.value(g).to_vec(),
                None => vec![0.0; t.shape.len()],
            })
            .collect()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.shape.len()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

/// Adaptive moment estimation over a `ParamSet`.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.tensors.iter().map(|t| vec![0.0; t.shape.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.shape.len()]).collect(),
        }
    }

    /// Descends along `grads` (pass the negated gradient to ascend).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), params.tensors.len());
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (i, tensor) in params.tensors.iter_mut().enumerate() {
            for (j, g) in grads[i].iter().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / b1t;
                let vhat = *v / b2t;
                tensor.data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
