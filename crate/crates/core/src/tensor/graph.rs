//! Reverse-mode differentiation over a tape of recorded kernel calls.
//!
//! Every value lives in an arena node that remembers the operation and the
//! input nodes it was computed from. Inputs always precede their consumers
//! in the arena, so the recorded graph is a DAG.

use super::ops::{self, ConvSaved};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    Mse(Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::ConvTranspose2d {
                input,
                weight,
                bias,
                ..
            } => vec![input, weight, bias],
            Op::MaxPool2d { input, .. } | Op::Relu(input) | Op::Sigmoid(input) | Op::Scale(input, _) => {
                vec![input]
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mse(a, b) => vec![a, b],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`. Only leaves keep theirs after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::conv2d_forward(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let out = ops::conv_transpose2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
            output_padding,
        )?;
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                padding,
                output_padding,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d_forward(self.value(input))?;
        Ok(self.push(out, Op::MaxPool2d { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        self.push(out, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = ops::sigmoid(self.value(input));
        self.push(out, Op::Sigmoid(input))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let out = ops::scale(self.value(a), factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// Scalar mean squared error between `a` and `b`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let loss = ops::mse_loss(self.value(a), self.value(b))?;
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, b)))
    }

    /// Nodes reachable from `root`, inputs before consumers.
    fn topological_order(&self, root: Var) -> Result<Vec<Var>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Open,
            Done,
        }
        let mut marks = vec![Mark::New; self.nodes.len()];
        let mut order = Vec::new();
        let mut stack = vec![(root, false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                marks[v.0] = Mark::Done;
                order.push(v);
                continue;
            }
            match marks[v.0] {
                Mark::Done => continue,
                Mark::Open => {
                    return Err(Error::Internal(format!(
                        "cycle through node {} in the recorded graph",
                        v.0
                    )))
                }
                Mark::New => {}
            }
            marks[v.0] = Mark::Open;
            stack.push((v, true));
            for input in self.nodes[v.0].op.inputs() {
                match marks[input.0] {
                    Mark::Done => {}
                    Mark::Open => {
                        return Err(Error::Internal(format!(
                            "cycle through node {} in the recorded graph",
                            input.0
                        )))
                    }
                    Mark::New => stack.push((input, false)),
                }
            }
        }
        Ok(order)
    }

    fn accumulate(&mut self, v: Var, g: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        node.value.same_shape(&g, "gradient accumulation")?;
        match &mut node.grad {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    /// Back-propagates from the scalar `root`, summing gradients over every
    /// path. Gradients of intermediate nodes are released once consumed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::State(format!(
                "backward needs a scalar root, found shape {:?}",
                self.value(root).shape()
            )));
        }
        let order = self.topological_order(root)?;
        self.accumulate(root, Tensor::full(self.value(root).shape(), 1.0))?;
        for &v in order.iter().rev() {
            if matches!(self.nodes[v.0].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[v.0].grad.take() else {
                continue;
            };
            for (input, g) in self.pullback(v, &grad)? {
                self.accumulate(input, g)?;
            }
        }
        Ok(())
    }

    fn pullback(&self, v: Var, grad: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[v.0];
        Ok(match node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let saved = ConvSaved::new(self.value(input), self.value(weight), stride, padding);
                let g = ops::conv2d_backward(grad, &saved)?;
                vec![(input, g.input), (weight, g.weight), (bias, g.bias)]
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                padding,
                output_padding,
            } => {
                let saved = ConvSaved {
                    output_padding,
                    ..ConvSaved::new(self.value(input), self.value(weight), stride, padding)
                };
                let g = ops::conv_transpose2d_backward(grad, &saved)?;
                vec![(input, g.input), (weight, g.weight), (bias, g.bias)]
            }
            Op::MaxPool2d { input, ref argmax } => {
                vec![(input, ops::maxpool2d_backward(grad, argmax, self.value(input).shape())?)]
            }
            Op::Relu(input) => vec![(input, ops::relu_backward(grad, self.value(input))?)],
            Op::Sigmoid(input) => vec![(input, ops::sigmoid_backward(grad, &node.value)?)],
            Op::Add(a, b) => vec![(a, grad.clone()), (b, grad.clone())],
            Op::Sub(a, b) => vec![(a, grad.clone()), (b, ops::scale(grad, -1.0))],
            Op::Scale(a, factor) => vec![(a, ops::scale(grad, factor))],
            Op::Mse(a, b) => {
                let ga = ops::mse_backward(self.value(a), self.value(b), grad.item()?)?;
                let gb = ops::scale(&ga, -1.0);
                vec![(a, ga), (b, gb)]
            }
        })
    }

    #[cfg(test)]
    fn rewire_for_test(&mut self, node: Var, new_input: Var) {
        if let Op::Relu(ref mut input) = self.nodes[node.0].op {
            *input = new_input;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f32]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn identity_graph_has_unit_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.scale(x, 1.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn mse_against_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3.0]));
        let z = g.leaf(t(&[0.0]));
        let y = g.mse(x, z).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn diamond_accumulates_both_paths() {
        // y = mse(2x + relu(x), 0) with x = [1, -1]:
        // forward: a = [2, -2], b = [1, 0], s = [3, -2], y = (9 + 4)/2
        // dy/ds = s, ds/dx = 2 + [x > 0] => grad = [3·3, -2·2] = [9, -4]
        let mut g = Graph::new();
        let x = g.leaf(t(&[1.0, -1.0]));
        let a = g.scale(x, 2.0);
        let b = g.relu(x);
        let s = g.add(a, b).unwrap();
        let z = g.leaf(Tensor::zeros(&[2]));
        let y = g.mse(s, z).unwrap();
        assert_eq!(g.value(y).data(), &[6.5]);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[9.0, -4.0]);
        assert_eq!(g.grad(z).unwrap().data(), &[-3.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1.0, 2.0]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::State(_))));
    }

    #[test]
    fn cycle_is_reported() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1.0]));
        let a = g.relu(x);
        let b = g.relu(a);
        g.rewire_for_test(a, b);
        let z = g.leaf(t(&[0.0]));
        let y = g.mse(b, z).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Internal(_))));
    }
}
