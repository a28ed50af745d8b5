//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value. A backward pass
//! does not write raw numbers: it appends *more nodes* that compute the
//! adjoints. Because the derivative of every operator is expressed with the
//! same operator set, a gradient produced by one reverse pass can itself be
//! differentiated by a second reverse pass. That property carries the
//! mixed second-order terms required when an orientation update is pushed
//! through a recorded policy-gradient step.
//!
//! Tensors are row-major matrices; column vectors have shape `(n, 1)` and
//! scalars `(1, 1)`. The operator set is deliberately small: affine maps,
//! index gather/scatter (which also expresses convolution via im2col),
//! smooth activations, softmax, and reductions.

use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn vector(n: usize) -> Self {
        Shape { rows: n, cols: 1 }
    }

    pub fn scalar() -> Self {
        Shape { rows: 1, cols: 1 }
    }

    pub fn len(self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Transposition pattern of a matrix product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatKind {
    /// `a * b`
    NN,
    /// `a * b^T`
    NT,
    /// `a^T * b`
    TN,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Shift(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Recip(NodeId),
    Sum(NodeId),
    Broadcast(NodeId),
    Reshape(NodeId),
    MatMul(NodeId, NodeId, MatKind),
    Gather(NodeId, Arc<Vec<usize>>),
    ScatterAdd(NodeId, Arc<Vec<usize>>),
    Softmax(NodeId),
    Pack(Vec<NodeId>),
}

struct Node {
    value: Vec<f64>,
    shape: Shape,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape. Node ids are topologically ordered.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Vec<f64>, shape: Shape, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(value.len(), shape.len());
        self.nodes.push(Node { value, shape, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable input (a parameter).
    pub fn param(&mut self, value: Vec<f64>, shape: Shape) -> NodeId {
        self.push(value, shape, Op::Leaf, true)
    }

    /// Non-differentiable input (data, targets, frozen values).
    pub fn constant(&mut self, value: Vec<f64>, shape: Shape) -> NodeId {
        self.push(value, shape, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(vec![v], Shape::scalar())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "add shape mismatch");
        let value =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, sa, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "sub shape mismatch");
        let value =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, sa, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "mul shape mismatch");
        let value =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, sa, Op::Mul(a, b), rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).iter().map(|x| -x).collect();
        let (s, rg) = (self.shape(a), self.requires_grad(a));
        self.push(value, s, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).iter().map(|x| c * x).collect();
        let (s, rg) = (self.shape(a), self.requires_grad(a));
        self.push(value, s, Op::Scale(a, c), rg)
    }

    pub fn shift(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).iter().map(|x| c + x).collect();
        let (s, rg) = (self.shape(a), self.requires_grad(a));
        self.push(value, s, Op::Shift(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).iter().map(|x| x.tanh()).collect();
        let (s, rg) = (self.shape(a), self.requires_grad(a));
        self.push(value, s, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).iter().map(|x| x.exp()).collect();
        let (s, rg) = (self.shape(a), self.requires_grad(a));
        self.push(value, s, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).iter().map(|x| x.ln()).collect();
        let (s, rg) = (self.shape(a), self.requires_grad(a));
        self.push(value, s, Op::Log(a), rg)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).iter().map(|x| 1.0 / x).collect();
        let (s, rg) = (self.shape(a), self.requires_grad(a));
        self.push(value, s, Op::Recip(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = vec![self.value(a).iter().sum()];
        let rg = self.requires_grad(a);
        self.push(value, Shape::scalar(), Op::Sum(a), rg)
    }

    /// Scalar to a constant-filled tensor of `shape`.
    pub fn broadcast(&mut self, a: NodeId, shape: Shape) -> NodeId {
        assert_eq!(self.shape(a), Shape::scalar(), "broadcast source must be scalar");
        let v = self.scalar_value(a);
        let rg = self.requires_grad(a);
        self.push(vec![v; shape.len()], shape, Op::Broadcast(a), rg)
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: NodeId, shape: Shape) -> NodeId {
        assert_eq!(self.shape(a).len(), shape.len(), "reshape length mismatch");
        let value = self.value(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(value, shape, Op::Reshape(a), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, kind: MatKind) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match kind {
            MatKind::NN => (sa.rows, sa.cols, sb.rows, sb.cols),
            MatKind::NT => (sa.rows, sa.cols, sb.cols, sb.rows),
            MatKind::TN => (sa.cols, sa.rows, sb.rows, sb.cols),
        };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut value = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            let a_at = |r: usize, c: usize| match kind {
                MatKind::TN => av[c * sa.cols + r],
                _ => av[r * sa.cols + c],
            };
            let b_at = |r: usize, c: usize| match kind {
                MatKind::NT => bv[c * sb.cols + r],
                _ => bv[r * sb.cols + c],
            };
            for r in 0..m {
                for kk in 0..k {
                    let x = a_at(r, kk);
                    if x == 0.0 {
                        continue;
                    }
                    for c in 0..n {
                        value[r * n + c] += x * b_at(kk, c);
                    }
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Shape::new(m, n), Op::MatMul(a, b, kind), rg)
    }

    /// `out[k] = a[idx[k]]`; duplicate indices are allowed.
    pub fn gather(&mut self, a: NodeId, idx: Arc<Vec<usize>>, shape: Shape) -> NodeId {
        assert_eq!(idx.len(), shape.len(), "gather index/shape mismatch");
        let av = self.value(a);
        debug_assert!(idx.iter().all(|&i| i < av.len()), "gather index out of range");
        let value = idx.iter().map(|&i| av[i]).collect();
        let rg = self.requires_grad(a);
        self.push(value, shape, Op::Gather(a, idx), rg)
    }

    /// `out[idx[k]] += a[k]` into a zero tensor of `shape`.
    pub fn scatter_add(&mut self, a: NodeId, idx: Arc<Vec<usize>>, shape: Shape) -> NodeId {
        assert_eq!(idx.len(), self.shape(a).len(), "scatter index/input mismatch");
        let mut value = vec![0.0; shape.len()];
        for (k, &i) in idx.iter().enumerate() {
            value[i] += self.value(a)[k];
        }
        let rg = self.requires_grad(a);
        self.push(value, shape, Op::ScatterAdd(a, idx), rg)
    }

    /// Numerically stable softmax over a column vector.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        assert_eq!(s.cols, 1, "softmax expects a column vector");
        let av = self.value(a);
        let max = av.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = av.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let value = exps.into_iter().map(|e| e / total).collect();
        let rg = self.requires_grad(a);
        self.push(value, s, Op::Softmax(a), rg)
    }

    /// Stacks column vectors into one column vector.
    pub fn pack(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut value = Vec::new();
        let mut rg = false;
        for &p in parts {
            assert_eq!(self.shape(p).cols, 1, "pack expects column vectors");
            value.extend_from_slice(self.value(p));
            rg |= self.requires_grad(p);
        }
        let shape = Shape::vector(value.len());
        self.push(value, shape, Op::Pack(parts.to_vec()), rg)
    }

    // Conveniences built on the primitive set.

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let m = self.mul(a, b);
        self.sum(m)
    }

    /// `w * x + b` for a column vector `x`.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> NodeId {
        let wx = self.matmul(w, x, MatKind::NN);
        self.add(wx, b)
    }

    /// Extracts element `i` of a tensor as a scalar node.
    pub fn element(&mut self, a: NodeId, i: usize) -> NodeId {
        self.gather(a, Arc::new(vec![i]), Shape::scalar())
    }

    /// Sum of squared entries.
    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        let m = self.mul(a, a);
        self.sum(m)
    }
}

/// Gradient nodes produced by a reverse pass.
pub struct Gradients {
    map: Vec<Option<NodeId>>,
}

impl Gradients {
    /// Gradient node of the root with respect to `id`, if a path existed.
    pub fn wrt(&self, id: NodeId) -> Option<NodeId> {
        self.map.get(id.0).copied().flatten()
    }
}

/// Reverse pass from a scalar `root`. The returned gradients are nodes on the
/// tape and can be differentiated again by a later `backward` call.
pub fn backward(tape: &mut Tape, root: NodeId) -> Gradients {
    assert_eq!(tape.shape(root), Shape::scalar(), "backward root must be scalar");
    let mut map: Vec<Option<NodeId>> = vec![None; root.0 + 1];
    let seed = tape.constant_scalar(1.0);
    map[root.0] = Some(seed);

    for id in (0..=root.0).rev() {
        let Some(g) = map[id] else { continue };
        if !tape.requires_grad(NodeId(id)) {
            continue;
        }
        let op = tape.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(tape, &mut map, a, g);
                accumulate(tape, &mut map, b, g);
            }
            Op::Sub(a, b) => {
                accumulate(tape, &mut map, a, g);
                let ng = tape.neg(g);
                accumulate(tape, &mut map, b, ng);
            }
            Op::Mul(a, b) => {
                if tape.requires_grad(a) {
                    let ga = tape.mul(g, b);
                    accumulate(tape, &mut map, a, ga);
                }
                if tape.requires_grad(b) {
                    let gb = tape.mul(g, a);
                    accumulate(tape, &mut map, b, gb);
                }
            }
            Op::Neg(a) => {
                let ga = tape.neg(g);
                accumulate(tape, &mut map, a, ga);
            }
            Op::Scale(a, c) => {
                let ga = tape.scale(g, c);
                accumulate(tape, &mut map, a, ga);
            }
            Op::Shift(a) => {
                accumulate(tape, &mut map, a, g);
            }
            Op::Tanh(a) => {
                // d tanh = 1 - tanh^2, reusing the forward output.
                let y = NodeId(id);
                let y2 = tape.mul(y, y);
                let ny2 = tape.neg(y2);
                let one_m = tape.shift(ny2, 1.0);
                let ga = tape.mul(g, one_m);
                accumulate(tape, &mut map, a, ga);
            }
            Op::Exp(a) => {
                let ga = tape.mul(g, NodeId(id));
                accumulate(tape, &mut map, a, ga);
            }
            Op::Log(a) => {
                let inv = tape.recip(a);
                let ga = tape.mul(g, inv);
                accumulate(tape, &mut map, a, ga);
            }
            Op::Recip(a) => {
                let y = NodeId(id);
                let y2 = tape.mul(y, y);
                let gy2 = tape.mul(g, y2);
                let ga = tape.neg(gy2);
                accumulate(tape, &mut map, a, ga);
            }
            Op::Sum(a) => {
                let shape = tape.shape(a);
                let ga = tape.broadcast(g, shape);
                accumulate(tape, &mut map, a, ga);
            }
            Op::Broadcast(a) => {
                let ga = tape.sum(g);
                accumulate(tape, &mut map, a, ga);
            }
            Op::Reshape(a) => {
                let shape = tape.shape(a);
                let ga = tape.reshape(g, shape);
                accumulate(tape, &mut map, a, ga);
            }
            Op::MatMul(a, b, kind) => {
                match kind {
                    MatKind::NN => {
                        if tape.requires_grad(a) {
                            let ga = tape.matmul(g, b, MatKind::NT);
                            accumulate(tape, &mut map, a, ga);
                        }
                        if tape.requires_grad(b) {
                            let gb = tape.matmul(a, g, MatKind::TN);
                            accumulate(tape, &mut map, b, gb);
                        }
                    }
                    MatKind::NT => {
                        if tape.requires_grad(a) {
                            let ga = tape.matmul(g, b, MatKind::NN);
                            accumulate(tape, &mut map, a, ga);
                        }
                        if tape.requires_grad(b) {
                            let gb = tape.matmul(g, a, MatKind::TN);
                            accumulate(tape, &mut map, b, gb);
                        }
                    }
                    MatKind::TN => {
                        if tape.requires_grad(a) {
                            let ga = tape.matmul(b, g, MatKind::NT);
                            accumulate(tape, &mut map, a, ga);
                        }
                        if tape.requires_grad(b) {
                            let gb = tape.matmul(a, g, MatKind::NN);
                            accumulate(tape, &mut map, b, gb);
                        }
                    }
                }
            }
            Op::Gather(a, idx) => {
                let shape = tape.shape(a);
                let ga = tape.scatter_add(g, idx, shape);
                accumulate(tape, &mut map, a, ga);
            }
            Op::ScatterAdd(a, idx) => {
                let shape = tape.shape(a);
                let ga = tape.gather(g, idx, shape);
                accumulate(tape, &mut map, a, ga);
            }
            Op::Softmax(a) => {
                // dx = y * (g - <g, y>)
                let y = NodeId(id);
                let gy = tape.mul(g, y);
                let dot = tape.sum(gy);
                let shape = tape.shape(a);
                let dotb = tape.broadcast(dot, shape);
                let centered = tape.sub(g, dotb);
                let ga = tape.mul(y, centered);
                accumulate(tape, &mut map, a, ga);
            }
            Op::Pack(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = tape.shape(p).len();
                    if tape.requires_grad(p) {
                        let idx: Vec<usize> = (offset..offset + n).collect();
                        let gp = tape.gather(g, Arc::new(idx), Shape::vector(n));
                        accumulate(tape, &mut map, p, gp);
                    }
                    offset += n;
                }
            }
        }
    }
    Gradients { map }
}

fn accumulate(tape: &mut Tape, map: &mut [Option<NodeId>], target: NodeId, g: NodeId) {
    if !tape.requires_grad(target) {
        return;
    }
    map[target.0] = Some(match map[target.0] {
        Some(existing) => tape.add(existing, g),
        None => g,
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` at `x0`, perturbing one entry at a time.
    fn finite_diff(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], eps: f64) -> Vec<f64> {
        let mut out = vec![0.0; x0.len()];
        for i in 0..x0.len() {
            let mut hi = x0.to_vec();
            let mut lo = x0.to_vec();
            hi[i] += eps;
            lo[i] -= eps;
            out[i] = (f(&hi) - f(&lo)) / (2.0 * eps);
        }
        out
    }

    fn check_gradient(
        build: &dyn Fn(&mut Tape, NodeId) -> NodeId,
        x0: &[f64],
        shape: Shape,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let x = tape.param(x0.to_vec(), shape);
        let y = build(&mut tape, x);
        let grads = backward(&mut tape, y);
        let gx = grads.wrt(x).expect("no gradient path");
        let analytic = tape.value(gx).to_vec();

        let numeric = finite_diff(
            &|vals: &[f64]| {
                let mut t = Tape::new();
                let xx = t.param(vals.to_vec(), shape);
                let yy = build(&mut t, xx);
                t.scalar_value(yy)
            },
            x0,
            1e-6,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            let denom = n.abs().max(1.0);
            assert!(
                (a - n).abs() / denom < tol,
                "analytic {a} vs numeric {n} (all: {analytic:?} vs {numeric:?})"
            );
        }
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let x0 = [0.3, -1.2, 0.8, 2.0];
        check_gradient(
            &|t, x| {
                let h = t.tanh(x);
                let e = t.exp(h);
                let s = t.mul(e, x);
                t.sum(s)
            },
            &x0,
            Shape::vector(4),
            1e-6,
        );
        check_gradient(
            &|t, x| {
                let sq = t.mul(x, x);
                let sh = t.shift(sq, 1.5);
                let lg = t.log(sh);
                let rc = t.recip(sh);
                let d = t.sub(lg, rc);
                let sc = t.scale(d, -0.7);
                t.sum(sc)
            },
            &x0,
            Shape::vector(4),
            1e-6,
        );
    }

    #[test]
    fn softmax_log_gradient_matches_identity() {
        // For p = softmax(z), d log p[a] / dz = onehot(a) - p.
        let z0 = [0.2, -0.5, 1.3];
        let mut tape = Tape::new();
        let z = tape.param(z0.to_vec(), Shape::vector(3));
        let p = tape.softmax(z);
        let pa = tape.element(p, 1);
        let lp = tape.log(pa);
        let grads = backward(&mut tape, lp);
        let gz = tape.value(grads.wrt(z).unwrap()).to_vec();
        let pv = tape.value(p).to_vec();
        for i in 0..3 {
            let expect = if i == 1 { 1.0 - pv[i] } else { -pv[i] };
            assert!((gz[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_gradients_all_kinds() {
        let a0 = [0.5, -1.0, 2.0, 0.3, 1.1, -0.4];
        for kind in [MatKind::NN, MatKind::NT, MatKind::TN] {
            let (sa, sb) = match kind {
                MatKind::NN => (Shape::new(2, 3), Shape::new(3, 2)),
                MatKind::NT => (Shape::new(2, 3), Shape::new(2, 3)),
                MatKind::TN => (Shape::new(3, 2), Shape::new(3, 2)),
            };
            let b0: Vec<f64> = (0..sb.len()).map(|i| 0.1 * i as f64 - 0.2).collect();
            // Gradient with respect to a.
            let b0c = b0.clone();
            check_gradient(
                &move |t, x| {
                    let b = t.constant(b0c.clone(), sb);
                    let mm = t.matmul(x, b, kind);
                    let sq = t.mul(mm, mm);
                    t.sum(sq)
                },
                &a0,
                sa,
                1e-6,
            );
            // Gradient with respect to b.
            let a0c = a0.to_vec();
            check_gradient(
                &move |t, x| {
                    let a = t.constant(a0c.clone(), sa);
                    let mm = t.matmul(a, x, kind);
                    let sq = t.mul(mm, mm);
                    t.sum(sq)
                },
                &b0,
                sb,
                1e-6,
            );
        }
    }

    #[test]
    fn gather_scatter_pack_gradients() {
        let x0 = [1.0, 2.0, 3.0];
        check_gradient(
            &|t, x| {
                // Duplicated gather indices exercise scatter accumulation.
                let g = t.gather(x, Arc::new(vec![0, 2, 2, 1]), Shape::vector(4));
                let sq = t.mul(g, g);
                t.sum(sq)
            },
            &x0,
            Shape::vector(3),
            1e-6,
        );
        check_gradient(
            &|t, x| {
                let s = t.scatter_add(x, Arc::new(vec![1, 1, 0]), Shape::vector(2));
                let sq = t.mul(s, s);
                t.sum(sq)
            },
            &x0,
            Shape::vector(3),
            1e-6,
        );
        check_gradient(
            &|t, x| {
                let y = t.tanh(x);
                let p = t.pack(&[x, y]);
                let sq = t.mul(p, p);
                t.sum(sq)
            },
            &x0,
            Shape::vector(3),
            1e-6,
        );
    }

    #[test]
    fn second_pass_matches_analytic_chain_rule() {
        // Inner step: theta_hat = theta + beta * d/dtheta [ (theta * eta)^2 / 2 ]
        //                       = theta + beta * theta * eta^2.
        // Outer: f = theta_hat^2. Analytically,
        //   df/deta = 2 * theta_hat * beta * theta * 2 * eta.
        let theta0 = 0.7;
        let eta0 = -1.3;
        let beta = 0.05;

        let mut tape = Tape::new();
        let theta = tape.param(vec![theta0], Shape::scalar());
        let eta = tape.param(vec![eta0], Shape::scalar());

        let prod = tape.mul(theta, eta);
        let sq = tape.mul(prod, prod);
        let half = tape.scale(sq, 0.5);
        let g1 = backward(&mut tape, half);
        let dtheta = g1.wrt(theta).unwrap();

        let step = tape.scale(dtheta, beta);
        let theta_hat = tape.add(theta, step);
        let f = tape.mul(theta_hat, theta_hat);
        let g2 = backward(&mut tape, f);
        let deta = g2.wrt(eta).unwrap();

        let theta_hat_v = theta0 + beta * theta0 * eta0 * eta0;
        let expect = 2.0 * theta_hat_v * beta * theta0 * 2.0 * eta0;
        let got = tape.scalar_value(deta);
        assert!(
            (got - expect).abs() < 1e-8,
            "second-order gradient {got} vs analytic {expect}"
        );
    }

    #[test]
    fn gradient_pruning_skips_constants() {
        let mut tape = Tape::new();
        let x = tape.param(vec![2.0], Shape::scalar());
        let c = tape.constant(vec![3.0], Shape::scalar());
        let y = tape.mul(x, c);
        let grads = backward(&mut tape, y);
        assert!(grads.wrt(x).is_some());
        assert!(grads.wrt(c).is_none());
    }
}
