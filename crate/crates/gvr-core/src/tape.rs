//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation evaluates eagerly and records a node. `grad` walks the
//! tape backwards and emits the vector-Jacobian products *as new tape nodes*,
//! so gradients are themselves differentiable and higher-order derivatives
//! (needed for the critic gradient penalty) come out of the same machinery.

use ndarray::{ArrayD, Axis, IxDyn};

use crate::conv;

/// Handle to a value on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar(f32),
    MulScalar(f32),
    Exp,
    Ln,
    Sqrt,
    Tanh,
    Abs,
    /// 1.0 where x > 0, else 0.0. Gradient does not flow through.
    StepMask,
    /// sign(x) in {-1, 0, 1}. Gradient does not flow through.
    Sign,
    /// Row-wise max of a 2-d array, shape [n, 1]. Gradient does not flow through.
    MaxPerRow,
    Broadcast(Vec<usize>),
    /// Sum down to a shape with the same rank where reduced axes have size 1.
    SumTo(Vec<usize>),
    SumAll,
    Reshape(Vec<usize>),
    Matmul,
    Transpose2,
    Conv2d {
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    },
    ConvKGrad {
        stride: usize,
        pad: usize,
        khw: (usize, usize),
    },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: ArrayD<f32>,
    /// Whether gradient can flow through (into) this node.
    grad_flows: bool,
}

/// Append-only computation graph with eager evaluation.
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

    /// Value of a recorded node.
    pub fn value(&self, v: Var) -> &ArrayD<f32> {
        &self.nodes[v.0].value
    }

    /// First element of a node's value; for 0-d results.
    pub fn scalar_value(&self, v: Var) -> f32 {
        *self.nodes[v.0]
            .value
            .iter()
            .next()
            .expect("scalar_value of empty array")
    }

    /// Leaf the gradient should flow into (parameters, saliency inputs).
    pub fn leaf_grad(&mut self, value: ArrayD<f32>) -> Var {
        self.push_node(Op::Leaf, vec![], value, true)
    }

    /// Leaf treated as a constant.
    pub fn leaf(&mut self, value: ArrayD<f32>) -> Var {
        self.push_node(Op::Leaf, vec![], value, false)
    }

    pub fn scalar(&mut self, value: f32) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    fn push_node(&mut self, op: Op, inputs: Vec<usize>, value: ArrayD<f32>, grad_flows: bool) -> Var {
        // Convolution and reshape kernels rely on contiguous row-major data.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad_flows,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>) -> Var {
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let value = self.eval(&op, &ids);
        let flows = !op_blocks_grad(&op) && ids.iter().any(|&i| self.nodes[i].grad_flows);
        self.push_node(op, ids, value, flows)
    }

    fn val(&self, id: usize) -> &ArrayD<f32> {
        &self.nodes[id].value
    }

    fn eval(&self, op: &Op, inputs: &[usize]) -> ArrayD<f32> {
        match op {
            Op::Leaf => unreachable!("leaves are pushed directly"),
            Op::Add => binary_same_shape(self.val(inputs[0]), self.val(inputs[1]), |a, b| a + b),
            Op::Sub => binary_same_shape(self.val(inputs[0]), self.val(inputs[1]), |a, b| a - b),
            Op::Mul => binary_same_shape(self.val(inputs[0]), self.val(inputs[1]), |a, b| a * b),
            Op::Div => binary_same_shape(self.val(inputs[0]), self.val(inputs[1]), |a, b| a / b),
            Op::Neg => self.val(inputs[0]).mapv(|a| -a),
            Op::AddScalar(c) => self.val(inputs[0]).mapv(|a| a + c),
            Op::MulScalar(c) => self.val(inputs[0]).mapv(|a| a * c),
            Op::Exp => self.val(inputs[0]).mapv(f32::exp),
            Op::Ln => self.val(inputs[0]).mapv(f32::ln),
            Op::Sqrt => self.val(inputs[0]).mapv(f32::sqrt),
            Op::Tanh => self.val(inputs[0]).mapv(f32::tanh),
            Op::Abs => self.val(inputs[0]).mapv(f32::abs),
            Op::StepMask => self.val(inputs[0]).mapv(|a| if a > 0.0 { 1.0 } else { 0.0 }),
            Op::Sign => self.val(inputs[0]).mapv(|a| {
                if a > 0.0 {
                    1.0
                } else if a < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::MaxPerRow => {
                let x = self.val(inputs[0]);
                assert_eq!(x.ndim(), 2, "MaxPerRow expects a 2-d array");
                let n = x.shape()[0];
                let mut out = ArrayD::zeros(IxDyn(&[n, 1]));
                for (i, row) in x.axis_iter(Axis(0)).enumerate() {
                    out[[i, 0]] = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                }
                out
            }
            Op::Broadcast(shape) => broadcast_to(self.val(inputs[0]), shape),
            Op::SumTo(shape) => sum_to(self.val(inputs[0]), shape),
            Op::SumAll => {
                let s: f64 = self.val(inputs[0]).iter().map(|&v| v as f64).sum();
                ArrayD::from_elem(IxDyn(&[]), s as f32)
            }
            Op::Reshape(shape) => {
                let x = self.val(inputs[0]);
                let flat: Vec<f32> = x.iter().copied().collect();
                ArrayD::from_shape_vec(IxDyn(shape), flat).expect("reshape element count mismatch")
            }
            Op::Matmul => {
                let a = as2(self.val(inputs[0]));
                let b = as2(self.val(inputs[1]));
                assert_eq!(a.shape()[1], b.shape()[0], "matmul inner dims differ");
                a.dot(&b).into_dyn()
            }
            Op::Transpose2 => {
                let a = as2(self.val(inputs[0]));
                a.t().as_standard_layout().to_owned().into_dyn()
            }
            Op::Conv2d { stride, pad } => {
                conv::conv2d(self.val(inputs[0]), self.val(inputs[1]), *stride, *pad)
            }
            Op::ConvT2d { stride, pad, out_hw } => {
                conv::conv2d_transpose(self.val(inputs[0]), self.val(inputs[1]), *stride, *pad, *out_hw)
            }
            Op::ConvKGrad { stride, pad, khw } => {
                conv::conv2d_kernel_grad(self.val(inputs[0]), self.val(inputs[1]), *stride, *pad, *khw)
            }
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add, vec![a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub, vec![a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul, vec![a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Div, vec![a, b])
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg, vec![a])
    }
    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        self.push(Op::AddScalar(c), vec![a])
    }
    pub fn mul_scalar(&mut self, a: Var, c: f32) -> Var {
        self.push(Op::MulScalar(c), vec![a])
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp, vec![a])
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.push(Op::Ln, vec![a])
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push(Op::Sqrt, vec![a])
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh, vec![a])
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.push(Op::Abs, vec![a])
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.push(Op::Mul, vec![a, a])
    }
    /// 1 where positive, 0 elsewhere; constant w.r.t. differentiation.
    pub fn step_mask(&mut self, a: Var) -> Var {
        self.push(Op::StepMask, vec![a])
    }
    pub fn sign(&mut self, a: Var) -> Var {
        self.push(Op::Sign, vec![a])
    }
    pub fn max_per_row(&mut self, a: Var) -> Var {
        self.push(Op::MaxPerRow, vec![a])
    }

    // ---- shape ----

    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Var {
        if self.value(a).shape() == shape {
            return a;
        }
        self.push(Op::Broadcast(shape.to_vec()), vec![a])
    }
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Var {
        if self.value(a).shape() == shape {
            return a;
        }
        self.push(Op::SumTo(shape.to_vec()), vec![a])
    }
    pub fn sum_all(&mut self, a: Var) -> Var {
        self.push(Op::SumAll, vec![a])
    }
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n as f32)
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(self.value(a).len(), n, "reshape element count mismatch");
        self.push(Op::Reshape(shape.to_vec()), vec![a])
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Matmul, vec![a, b])
    }
    pub fn transpose2(&mut self, a: Var) -> Var {
        self.push(Op::Transpose2, vec![a])
    }

    // ---- convolution ----

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Var {
        self.push(Op::Conv2d { stride, pad }, vec![x, kernel])
    }
    pub fn conv2d_transpose(
        &mut self,
        y: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Var {
        self.push(Op::ConvT2d { stride, pad, out_hw }, vec![y, kernel])
    }
    fn conv2d_kernel_grad(&mut self, x: Var, dy: Var, stride: usize, pad: usize, khw: (usize, usize)) -> Var {
        self.push(Op::ConvKGrad { stride, pad, khw }, vec![x, dy])
    }

    // ---- compositions ----

    /// Scaled exponential linear unit.
    pub fn selu(&mut self, x: Var) -> Var {
        const LAMBDA: f32 = 1.050_701;
        const ALPHA: f32 = 1.673_263_2;
        let mask = self.step_mask(x);
        let pos = self.mul(mask, x);
        let neg_mask = {
            let m = self.neg(mask);
            self.add_scalar(m, 1.0)
        };
        // exp is fed the masked input so large positive x cannot overflow.
        let em1 = {
            let xn = self.mul(neg_mask, x);
            let e = self.exp(xn);
            self.add_scalar(e, -1.0)
        };
        let neg = self.mul(neg_mask, em1);
        let neg = self.mul_scalar(neg, ALPHA);
        let s = self.add(pos, neg);
        self.mul_scalar(s, LAMBDA)
    }

    /// Row-wise softmax of 2-d logits, numerically stabilized.
    pub fn softmax(&mut self, logits: Var) -> Var {
        let shape = self.value(logits).shape().to_vec();
        assert_eq!(shape.len(), 2, "softmax expects [n, classes]");
        let m = self.max_per_row(logits);
        let mb = self.broadcast(m, &shape);
        let xs = self.sub(logits, mb);
        let e = self.exp(xs);
        let s = self.sum_to(e, &[shape[0], 1]);
        let sb = self.broadcast(s, &shape);
        self.div(e, sb)
    }

    /// Row-wise log-softmax of 2-d logits.
    pub fn log_softmax(&mut self, logits: Var) -> Var {
        let shape = self.value(logits).shape().to_vec();
        assert_eq!(shape.len(), 2, "log_softmax expects [n, classes]");
        let m = self.max_per_row(logits);
        let mb = self.broadcast(m, &shape);
        let xs = self.sub(logits, mb);
        let e = self.exp(xs);
        let s = self.sum_to(e, &[shape[0], 1]);
        let ls = self.ln(s);
        let lsb = self.broadcast(ls, &shape);
        self.sub(xs, lsb)
    }

    /// Mean squared error between two same-shape arrays.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Mean absolute error between two same-shape arrays.
    pub fn mean_l1(&mut self, a: Var) -> Var {
        let ab = self.abs(a);
        self.mean_all(ab)
    }

    /// y = x @ w + b with w of shape [in, out] and b of shape [1, out].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        let shape = self.value(y).shape().to_vec();
        let bb = self.broadcast(b, &shape);
        self.add(y, bb)
    }

    // ---- differentiation ----

    /// Gradients of a scalar `output` with respect to each var in `wrt`.
    ///
    /// Returns one entry per requested var; `None` means the gradient is
    /// identically zero (no path on the tape). The returned vars are ordinary
    /// tape nodes, so they can be differentiated again.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        assert!(
            self.value(output).len() == 1,
            "grad expects a scalar output, got shape {:?}",
            self.value(output).shape()
        );
        let horizon = output.0;

        // Nodes that can reach some wrt leaf by following inputs.
        let mut relevant = vec![false; horizon + 1];
        for v in wrt {
            if v.0 <= horizon {
                relevant[v.0] = true;
            }
        }
        for id in 0..=horizon {
            if !relevant[id] {
                relevant[id] = self.nodes[id].inputs.iter().any(|&i| relevant[i]);
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; horizon + 1];
        let seed_shape = self.value(output).shape().to_vec();
        let seed = self.leaf(ArrayD::from_elem(IxDyn(&seed_shape), 1.0));
        adjoint[output.0] = Some(seed);

        for id in (0..=horizon).rev() {
            let adj = match adjoint[id] {
                Some(a) if relevant[id] && self.nodes[id].grad_flows => a,
                _ => continue,
            };
            debug_assert_eq!(
                self.value(adj).shape(),
                self.nodes[id].value.shape(),
                "adjoint shape mismatch at node {id} ({:?})",
                self.nodes[id].op
            );
            for (slot, contribution) in self.vjp(id, adj) {
                let input = self.nodes[id].inputs[slot];
                if !relevant[input] || !self.nodes[input].grad_flows {
                    continue;
                }
                adjoint[input] = Some(match adjoint[input] {
                    None => contribution,
                    Some(acc) => self.add(acc, contribution),
                });
            }
        }

        wrt.iter()
            .map(|v| if v.0 <= horizon { adjoint[v.0] } else { None })
            .collect()
    }

    /// Vector-Jacobian products of node `id` given its output adjoint.
    /// Returns (input slot, contribution) pairs built from differentiable ops.
    fn vjp(&mut self, id: usize, adj: Var) -> Vec<(usize, Var)> {
        let op = self.nodes[id].op.clone();
        let inputs = self.nodes[id].inputs.clone();
        let out = Var(id);
        match op {
            Op::Leaf | Op::StepMask | Op::Sign | Op::MaxPerRow => vec![],
            Op::Add => vec![(0, adj), (1, adj)],
            Op::Sub => {
                let n = self.neg(adj);
                vec![(0, adj), (1, n)]
            }
            Op::Mul => {
                let a = Var(inputs[0]);
                let b = Var(inputs[1]);
                let da = self.mul(adj, b);
                let db = self.mul(adj, a);
                vec![(0, da), (1, db)]
            }
            Op::Div => {
                let a = Var(inputs[0]);
                let b = Var(inputs[1]);
                let da = self.div(adj, b);
                let num = self.mul(adj, a);
                let b2 = self.mul(b, b);
                let frac = self.div(num, b2);
                let db = self.neg(frac);
                vec![(0, da), (1, db)]
            }
            Op::Neg => {
                let n = self.neg(adj);
                vec![(0, n)]
            }
            Op::AddScalar(_) => vec![(0, adj)],
            Op::MulScalar(c) => {
                let d = self.mul_scalar(adj, c);
                vec![(0, d)]
            }
            Op::Exp => {
                let d = self.mul(adj, out);
                vec![(0, d)]
            }
            Op::Ln => {
                let x = Var(inputs[0]);
                let d = self.div(adj, x);
                vec![(0, d)]
            }
            Op::Sqrt => {
                let h = self.mul_scalar(adj, 0.5);
                let d = self.div(h, out);
                vec![(0, d)]
            }
            Op::Tanh => {
                let y2 = self.mul(out, out);
                let ny2 = self.neg(y2);
                let one_m = self.add_scalar(ny2, 1.0);
                let d = self.mul(adj, one_m);
                vec![(0, d)]
            }
            Op::Abs => {
                let x = Var(inputs[0]);
                let s = self.sign(x);
                let d = self.mul(adj, s);
                vec![(0, d)]
            }
            Op::Broadcast(_) => {
                let shape = self.value(Var(inputs[0])).shape().to_vec();
                let d = if shape.is_empty() {
                    self.sum_all(adj)
                } else {
                    self.sum_to(adj, &shape)
                };
                vec![(0, d)]
            }
            Op::SumTo(_) => {
                let shape = self.value(Var(inputs[0])).shape().to_vec();
                let d = self.broadcast(adj, &shape);
                vec![(0, d)]
            }
            Op::SumAll => {
                let shape = self.value(Var(inputs[0])).shape().to_vec();
                let d = self.broadcast(adj, &shape);
                vec![(0, d)]
            }
            Op::Reshape(_) => {
                let shape = self.value(Var(inputs[0])).shape().to_vec();
                let d = self.reshape(adj, &shape);
                vec![(0, d)]
            }
            Op::Matmul => {
                let a = Var(inputs[0]);
                let b = Var(inputs[1]);
                let bt = self.transpose2(b);
                let da = self.matmul(adj, bt);
                let at = self.transpose2(a);
                let db = self.matmul(at, adj);
                vec![(0, da), (1, db)]
            }
            Op::Transpose2 => {
                let d = self.transpose2(adj);
                vec![(0, d)]
            }
            Op::Conv2d { stride, pad } => {
                let x = Var(inputs[0]);
                let k = Var(inputs[1]);
                let xs = self.value(x).shape().to_vec();
                let ks = self.value(k).shape().to_vec();
                let dx = self.conv2d_transpose(adj, k, stride, pad, (xs[2], xs[3]));
                let dk = self.conv2d_kernel_grad(x, adj, stride, pad, (ks[2], ks[3]));
                vec![(0, dx), (1, dk)]
            }
            Op::ConvT2d { stride, pad, .. } => {
                let y = Var(inputs[0]);
                let k = Var(inputs[1]);
                let ks = self.value(k).shape().to_vec();
                let dy = self.conv2d(adj, k, stride, pad);
                let dk = self.conv2d_kernel_grad(adj, y, stride, pad, (ks[2], ks[3]));
                vec![(0, dy), (1, dk)]
            }
            Op::ConvKGrad { stride, pad, .. } => {
                let x = Var(inputs[0]);
                let dy = Var(inputs[1]);
                let xs = self.value(x).shape().to_vec();
                let dx = self.conv2d_transpose(dy, adj, stride, pad, (xs[2], xs[3]));
                let ddy = self.conv2d(x, adj, stride, pad);
                vec![(0, dx), (1, ddy)]
            }
        }
    }
}

fn op_blocks_grad(op: &Op) -> bool {
    matches!(op, Op::StepMask | Op::Sign | Op::MaxPerRow)
}

fn binary_same_shape(a: &ArrayD<f32>, b: &ArrayD<f32>, f: impl Fn(f32, f32) -> f32) -> ArrayD<f32> {
    assert_eq!(a.shape(), b.shape(), "elementwise op on mismatched shapes");
    let mut out = a.to_owned();
    out.zip_mut_with(b, |x, &y| *x = f(*x, y));
    out
}

fn as2(a: &ArrayD<f32>) -> ndarray::ArrayView2<'_, f32> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected a 2-d array")
}

fn broadcast_to(x: &ArrayD<f32>, shape: &[usize]) -> ArrayD<f32> {
    if x.ndim() == 0 {
        return ArrayD::from_elem(IxDyn(shape), x.iter().next().copied().unwrap());
    }
    assert_eq!(x.ndim(), shape.len(), "broadcast requires matching rank");
    for (i, (&have, &want)) in x.shape().iter().zip(shape).enumerate() {
        assert!(
            have == want || have == 1,
            "axis {i} not broadcastable: {have} -> {want}"
        );
    }
    x.broadcast(IxDyn(shape))
        .expect("broadcast failed")
        .to_owned()
}

fn sum_to(x: &ArrayD<f32>, shape: &[usize]) -> ArrayD<f32> {
    assert_eq!(x.ndim(), shape.len(), "sum_to requires matching rank");
    for (ax, (&have, &want)) in x.shape().iter().zip(shape).enumerate() {
        assert!(
            want == have || want == 1,
            "sum_to axis {ax} must either match or reduce to 1: {have} -> {want}"
        );
    }
    // f64 accumulation keeps reductions stable enough for the oracle checks.
    let mut acc = x.mapv(|v| v as f64);
    for ax in 0..shape.len() {
        if shape[ax] == 1 && acc.shape()[ax] != 1 {
            let mut folded_shape = acc.shape().to_vec();
            folded_shape[ax] = 1;
            let mut folded = ArrayD::<f64>::zeros(IxDyn(&folded_shape));
            {
                let mut lane = folded.index_axis_mut(Axis(ax), 0);
                for sub in acc.axis_iter(Axis(ax)) {
                    lane.zip_mut_with(&sub, |a, &b| *a += b);
                }
            }
            acc = folded;
        }
    }
    acc.mapv(|v| v as f32)
}
