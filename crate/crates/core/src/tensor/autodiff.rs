//! Reverse-mode differentiation.
//!
//! Every operation is a [`Primitive`]: a forward map plus its
//! vector-Jacobian product. A [`Tape`] records primitive applications in
//! execution order; [`Tape::backward`] walks them in reverse, feeding each
//! node's accumulated cotangent through its primitive's `vjp`.

use super::{ops, Scalar, Tensor};
use crate::error::{Error, Result};

pub trait Primitive<T: Scalar> {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// Cotangents for each input given the output cotangent. The returned
    /// vector has one entry per input; entries whose `needs` flag is false
    /// may be `None`. Returned tensors have the shape of their input.
    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        cotangent: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Option<Box<dyn Primitive<T>>>,
    inputs: Vec<Var>,
    tracked: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None, Vec::new(), true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None, Vec::new(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Option<Box<dyn Primitive<T>>>, inputs: Vec<Var>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on the given inputs and records it.
    pub fn apply(&mut self, op: impl Primitive<T> + 'static, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = op.forward(&values)?;
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        let op: Option<Box<dyn Primitive<T>>> = if tracked { Some(Box::new(op)) } else { None };
        Ok(self.push(out, op, inputs.to_vec(), tracked))
    }

    /// Back-propagates a unit cotangent from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let seed = Tensor::ones(self.shape(output).to_vec());
        self.backward_with(output, seed)
    }

    /// Back-propagates `cotangent` from `output`.
    pub fn backward_with(&self, output: Var, cotangent: Tensor<T>) -> Result<Gradients<T>> {
        if cotangent.shape() != self.shape(output) {
            return Err(Error::shape("backward", self.shape(output), cotangent.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(cotangent);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].tracked).collect();
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = op.vjp(&inputs, &node.value, &g, &needs)?;
            // keep the cotangent of recorded outputs queryable
            grads[idx] = Some(g);
            for ((v, ig), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(ig) = ig else { continue };
                if !need {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(super::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(super::Binary(super::BinaryKind::Add), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(super::Binary(super::BinaryKind::Sub), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(super::Binary(super::BinaryKind::Mul), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(super::Scale(c), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(super::Reshape(shape.to_vec()), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(super::TransposeLast2, &[x])
    }

    pub fn sum(&mut self, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        self.apply(
            super::ReduceSum {
                axes: axes.to_vec(),
                keep_dims,
            },
            &[x],
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes, false)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(super::Softmax(axis), &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(super::LogSoftmax(axis), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(super::Sigmoid, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(super::Relu, &[x])
    }

    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.apply(super::L2Normalize { axis, eps }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(super::Concat(axis), parts)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(super::Slice { axis, start, len }, &[x])
    }

    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        self.apply(super::StopGradient, &[x])
    }

    /// `x · w + b` for `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut crate::rng::SplitMix64,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask(self.shape(x), rate, rng)?;
        let mask = self.constant(mask);
        self.mul(x, mask)
    }
}

/// Result of [`Tape::backward`]: the cotangent of every node reached.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// The gradient of `v`, or zeros shaped like `like` if `v` was not reached.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.to_vec()))
    }
}

/// A composite primitive defined by a function that records onto a tape.
/// Its VJP is obtained by back-propagating through that recording, so
/// whole models can be gradient-checked through the same interface as
/// single primitives.
pub struct FnPrimitive<F> {
    name: &'static str,
    f: F,
}

impl<F> FnPrimitive<F> {
    pub fn new(name: &'static str, f: F) -> Self {
        Self { name, f }
    }
}

impl<T, F> Primitive<T> for FnPrimitive<F>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    fn name(&self) -> &'static str {
        self.name
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
        let out = (self.f)(&mut tape, &vars)?;
        Ok(tape.value(out).clone())
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        cotangent: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(needs)
            .map(|(t, &n)| if n { tape.leaf((*t).clone()) } else { tape.constant((*t).clone()) })
            .collect();
        let out = (self.f)(&mut tape, &vars)?;
        let grads = tape.backward_with(out, cotangent.clone())?;
        Ok(vars
            .iter()
            .zip(inputs)
            .zip(needs)
            .map(|((&v, t), &n)| n.then(|| grads.get_or_zeros(v, t.shape())))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_through_shared_node() {
        // f(x) = sum(x * x) + sum(x)  ⇒  df/dx = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([3], &[1., -2., 0.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let a = tape.sum_all(sq).unwrap();
        let b = tape.sum_all(x).unwrap();
        let f = tape.add(a, b).unwrap();
        assert_eq!(tape.value(f).item(), 1.0 + 4.0 + 0.25 + 1.0 - 2.0 + 0.5);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3., -3., 2.]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::from_f64([2], &[1., 2.]).unwrap());
        let x = tape.leaf(Tensor::from_f64([2], &[3., 4.]).unwrap());
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([1], &[2.]).unwrap());
        let sx = tape.stop_gradient(x).unwrap();
        let y = tape.mul(x, sx).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.]);
    }
}
