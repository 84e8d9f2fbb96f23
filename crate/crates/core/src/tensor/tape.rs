use std::collections::HashMap;

use super::ops::{self, ConvGeometry};
use super::{ensure_same_shape, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Conv2d { input: Var, kernel: Var, geometry: ConvGeometry },
    AddChannelBias { x: Var, bias: Var },
    Matmul { a: Var, b: Var },
    Softmax { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Upsample { x: Var, factor: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so inputs always precede their
/// consumers and a single reverse sweep visits every node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], keyed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var.0)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var.0)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, op, rg)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geometry = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let out = ops::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.record(out, Op::Conv2d { input, kernel, geometry }, &[input, kernel]))
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_channel_bias(self.value(x), self.value(bias))?;
        Ok(self.record(out, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.record(out, Op::Matmul { a, b }, &[a, b]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        Ok(self.record(out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat(&values, axis)?;
        Ok(self.record(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = ops::upsample_nearest(self.value(x), factor)?;
        Ok(self.record(out, Op::Upsample { x, factor }, &[x]))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (out, argmax) = ops::max_pool2d(self.value(x), k)?;
        Ok(self.record(out, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.record(out, Op::Reshape { x }, &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = ops::permute(self.value(x), axes)?;
        Ok(self.record(
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.record(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        Ok(self.record(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.record(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::div(self.value(a), self.value(b))?;
        Ok(self.record(out, Op::Div(a, b), &[a, b]))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.record(out, Op::AddScalar(x), &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.record(out, Op::MulScalar(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.record(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.record(out, Op::Sigmoid(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Smallest distance of any recorded ReLU input from zero, or of any
    /// max-pool window's maximum from its runner-up. All-zero pool windows
    /// are skipped: they arise from inactive ReLUs, already counted.
    ///
    /// Finite differences with a step near or above this value straddle a
    /// kink and are not comparable with the analytic gradient.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.nodes[x.0].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let input = &self.nodes[x.0].value;
                    let [_, h, w] = *input.shape() else { continue };
                    let [_, oh, ow] = *node.value.shape() else { continue };
                    let k = h / oh.max(1);
                    for (o, &best) in argmax.iter().enumerate() {
                        let (c, oy, ox) = (o / (oh * ow), (o / ow) % oh, o % ow);
                        let top = input.data()[best];
                        if top == 0.0 {
                            continue;
                        }
                        for dy in 0..k {
                            for dx in 0..k {
                                let i = (c * h + oy * k + dy) * w + ox * k + dx;
                                if i != best {
                                    margin = margin.min(top - input.data()[i]);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse sweep from a scalar output.
    ///
    /// Returns adjoints for every node that requires a gradient and lies on
    /// a path to `output`; fan-out contributions are summed.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if out_node.value.numel() != 1 {
            return Err(TensorError::NonScalar(out_node.value.numel()));
        }
        if !out_node.requires_grad {
            return Err(TensorError::Detached);
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::new(out_node.value.shape(), vec![1.0])?);

        for id in (0..=output.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                adj[id] = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                accumulate(&mut adj[input.0], contribution)?;
            }
        }

        let grads = adj
            .into_iter()
            .enumerate()
            .filter_map(|(id, g)| g.map(|g| (id, g)))
            .collect();
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one node for each of its inputs.
    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Conv2d {
                input,
                kernel,
                geometry,
            } => {
                if rg(*input) {
                    out.push((*input, ops::conv2d_backward_input(g, val(*kernel), geometry)?));
                }
                if rg(*kernel) {
                    out.push((*kernel, ops::conv2d_backward_kernel(g, val(*input), geometry)?));
                }
            }
            Op::AddChannelBias { x, bias } => {
                if rg(*x) {
                    out.push((*x, g.clone()));
                }
                if rg(*bias) {
                    out.push((*bias, ops::channel_sums(g)));
                }
            }
            Op::Matmul { a, b } => {
                if rg(*a) {
                    let bt = ops::transpose_last(val(*b))?;
                    out.push((*a, ops::matmul(g, &bt)?));
                }
                if rg(*b) {
                    let at = ops::transpose_last(val(*a))?;
                    out.push((*b, ops::matmul(&at, g)?));
                }
            }
            Op::Softmax { x, axis } => {
                out.push((*x, ops::softmax_backward(&node.value, g, *axis)?));
            }
            Op::Concat { parts, axis } => {
                let extents: Vec<usize> = parts.iter().map(|&p| val(p).shape()[*axis]).collect();
                for (&p, piece) in parts.iter().zip(ops::split(g, *axis, &extents)?) {
                    if rg(p) {
                        out.push((p, piece));
                    }
                }
            }
            Op::Upsample { x, factor } => {
                out.push((*x, ops::upsample_nearest_backward(g, *factor)?));
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; val(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx[src] += gv;
                }
                out.push((*x, Tensor::new(val(*x).shape(), gx)?));
            }
            Op::Reshape { x } => out.push((*x, g.reshape(val(*x).shape())?)),
            Op::Permute { x, axes } => {
                out.push((*x, ops::permute(g, &ops::inverse_permutation(axes))?));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                if rg(*b) {
                    out.push((*b, g.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    out.push((*a, ops::mul(g, val(*b))?));
                }
                if rg(*b) {
                    out.push((*b, ops::mul(g, val(*a))?));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if rg(*a) {
                    out.push((*a, ops::div(g, bv)?));
                }
                if rg(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let gb = g
                        .zip_map(&node.value, |gv, q| gv * q)?
                        .zip_map(bv, |v, d| -v / d)?;
                    out.push((*b, gb));
                }
            }
            Op::AddScalar(x) => out.push((*x, g.clone())),
            Op::MulScalar(x, c) => out.push((*x, g.map(|v| v * c))),
            Op::Relu(x) => {
                out.push((*x, g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?));
            }
            Op::Sigmoid(x) => {
                out.push((*x, g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                out.push((*x, Tensor::full(val(*x).shape(), gv)));
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(contribution),
        Some(existing) => {
            ensure_same_shape(existing, &contribution, "gradient accumulation")?;
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e += c;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.square(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn sum_of_product_gradient_is_transpose() {
        // d(sum(A B))/dA = 1 B^T, i.e. row sums of B broadcast per row of A
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b_val = Tensor::from_fn(&[3, 2], |i| 0.5 * i as f64 - 1.0);
        let b = tape.constant(b_val.clone());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        let ga = g.get(a).unwrap();
        for i in 0..2 {
            for k in 0..3 {
                let expected = b_val.data()[k * 2] + b_val.data()[k * 2 + 1];
                assert_eq!(ga.data()[i * 3 + k], expected);
            }
        }
        assert!(g.get(b).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        // f(x) = x * x + 3x, f'(2) = 7
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.mul_scalar(x, 3.0);
        let f = tape.add(sq, lin).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert_eq!(tape.backward(x).unwrap_err(), TensorError::NonScalar(2));
        let c = tape.constant(Tensor::scalar(1.0));
        let d = tape.mul_scalar(c, 2.0);
        assert_eq!(tape.backward(d).unwrap_err(), TensorError::Detached);
    }

    #[test]
    fn constants_do_not_require_grad() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(1.0));
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.mul(c, c).unwrap();
        assert!(!tape.requires_grad(y));
        let z = tape.mul(y, x).unwrap();
        assert!(tape.requires_grad(z));
    }

    #[test]
    fn kink_margin_tracks_relu_and_pool() {
        let mut tape = Tape::new();
        assert_eq!(tape.kink_margin(), f64::INFINITY);
        let x = tape.leaf(Tensor::new(&[1, 2, 2], vec![0.5, -0.25, 0.75, 0.1]).unwrap());
        tape.max_pool2d(x, 2).unwrap();
        assert_eq!(tape.kink_margin(), 0.25);
        tape.relu(x);
        assert_eq!(tape.kink_margin(), 0.1);
    }
}
