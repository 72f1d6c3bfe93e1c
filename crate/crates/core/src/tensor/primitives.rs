use super::ops::{self, axis_split, gemm_nt, gemm_tn, matmul_dims, sum_to_shape};
use super::{Primitive, Scalar, Tensor};
use crate::error::{Error, Result};

type Grads<T> = Result<Vec<Option<Tensor<T>>>>;

fn arity<T: Scalar>(op: &'static str, inputs: &[&Tensor<T>], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::invalid(op, format!("expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct MatMul;

impl<T: Scalar> Primitive<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        arity("matmul", inputs, 2)?;
        ops::matmul(inputs[0], inputs[1])
    }

    fn vjp(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Grads<T> {
        let (a, b) = (inputs[0], inputs[1]);
        let (batch, m, k, n, shared) = matmul_dims(a.shape(), b.shape())?;
        let ga = needs[0].then(|| {
            let mut da = vec![T::zero(); a.len()];
            for t in 0..batch {
                let bt = if shared { b.data() } else { &b.data()[t * k * n..(t + 1) * k * n] };
                gemm_nt(
                    &g.data()[t * m * n..(t + 1) * m * n],
                    bt,
                    &mut da[t * m * k..(t + 1) * m * k],
                    m,
                    n,
                    k,
                );
            }
            Tensor::from_parts(a.shape().to_vec(), da)
        });
        let gb = needs[1].then(|| {
            let mut db = vec![T::zero(); b.len()];
            if shared {
                gemm_tn(a.data(), g.data(), &mut db, batch * m, k, n);
            } else {
                for t in 0..batch {
                    gemm_tn(
                        &a.data()[t * m * k..(t + 1) * m * k],
                        &g.data()[t * m * n..(t + 1) * m * n],
                        &mut db[t * k * n..(t + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            Tensor::from_parts(b.shape().to_vec(), db)
        });
        Ok(vec![ga, gb])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Elementwise binary operation with broadcasting.
#[derive(Clone, Copy, Debug)]
pub struct Binary(pub BinaryKind);

impl<T: Scalar> Primitive<T> for Binary {
    fn name(&self) -> &'static str {
        match self.0 {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        arity("binary", inputs, 2)?;
        match self.0 {
            BinaryKind::Add => ops::add(inputs[0], inputs[1]),
            BinaryKind::Sub => ops::sub(inputs[0], inputs[1]),
            BinaryKind::Mul => ops::mul(inputs[0], inputs[1]),
        }
    }

    fn vjp(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Grads<T> {
        let (a, b) = (inputs[0], inputs[1]);
        let (ga, gb) = match self.0 {
            BinaryKind::Add => (
                needs[0].then(|| sum_to_shape(g, a.shape())),
                needs[1].then(|| sum_to_shape(g, b.shape())),
            ),
            BinaryKind::Sub => (
                needs[0].then(|| sum_to_shape(g, a.shape())),
                needs[1].then(|| sum_to_shape(&g.map(|v| -v), b.shape())),
            ),
            BinaryKind::Mul => {
                let ga = if needs[0] { Some(sum_to_shape(&ops::mul(g, b)?, a.shape())) } else { None };
                let gb = if needs[1] { Some(sum_to_shape(&ops::mul(g, a)?, b.shape())) } else { None };
                (ga, gb)
            }
        };
        Ok(vec![ga, gb])
    }
}

/// Multiplication by a constant.
#[derive(Clone, Copy, Debug)]
pub struct Scale(pub f64);

impl<T: Scalar> Primitive<T> for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        arity("scale", inputs, 1)?;
        Ok(ops::scale(inputs[0], T::lit(self.0)))
    }

    fn vjp(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        Ok(vec![Some(ops::scale(g, T::lit(self.0)))])
    }
}

#[derive(Clone, Debug)]
pub struct Reshape(pub Vec<usize>);

impl<T: Scalar> Primitive<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        arity("reshape", inputs, 1)?;
        inputs[0].reshape(self.0.clone())
    }

    fn vjp(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        Ok(vec![Some(g.reshape(inputs[0].shape().to_vec())?)])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TransposeLast2;

impl<T: Scalar> Primitive<T> for TransposeLast2 {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        arity("transpose", inputs, 1)?;
        ops::transpose_last2(inputs[0])
    }

    fn vjp(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        Ok(vec![Some(ops::transpose_last2(g)?)])
    }
}

#[derive(Clone, Debug)]
pub struct ReduceSum {
    pub axes: Vec<usize>,
    pub keep_dims: bool,
}

impl<T: Scalar> Primitive<T> for ReduceSum {
    fn name(&self) -> &'static str {
        "reduce_sum"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        arity("reduce_sum", inputs, 1)?;
        ops::reduce_sum(inputs[0], &self.axes, self.keep_dims)
    }

    fn vjp(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let x = inputs[0];
        let kept = ops::reduced_shape(x.shape(), &self.axes, true);
        let g = g.reshape(kept)?;
        let ones = Tensor::ones(x.shape().to_vec());
        Ok(vec![Some(ops::mul(&ones, &g)?)])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Softmax(pub usize);

impl<T: Scalar> Primitive<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        arity("softmax", inputs, 1)?;
        ops::softmax(inputs[0], self.0)
    }

    fn vjp(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        // dx = y ⊙ (g − Σ g⊙y)
        let (outer, n, inner) = axis_split("softmax", y.shape(), self.0)?;
        let (yd, gd) = (y.data(), g.data());
        let mut dx = vec![T::zero(); y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let dot: T = (0..n).map(|j| yd[at(j)] * gd[at(j)]).sum();
                for j in 0..n {
                    dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(y.shape().to_vec(), dx))])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LogSoftmax(pub usize);

impl<T: Scalar> Primitive<T> for LogSoftmax {
    fn name(&self) -> &'static str {
        "log_softmax"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        arity("log_softmax", inputs, 1)?;
        ops::log_softmax(inputs[0], self.0)
    }

    fn vjp(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        // dx = g − softmax · Σ g
        let (outer, n, inner) = axis_split("log_softmax", y.shape(), self.0)?;
        let (yd, gd) = (y.data(), g.data());
        let mut dx = vec![T::zero(); y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let total: T = (0..n).map(|j| gd[at(j)]).sum();
                for j in 0..n {
                    dx[at(j)] = gd[at(j)] - yd[at(j)].exp() * total;
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(y.shape().to_vec(), dx))])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Sigmoid;

impl<T: Scalar> Primitive<T> for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        arity("sigmoid", inputs, 1)?;
        ops::sigmoid(inputs[0])
    }

    fn vjp(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let data = y
            .data()
            .iter()
            .zip(g.data())
            .map(|(&s, &gv)| gv * s * (T::one() - s))
            .collect();
        Ok(vec![Some(Tensor::from_parts(y.shape().to_vec(), data))])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Relu;

impl<T: Scalar> Primitive<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        arity("relu", inputs, 1)?;
        Ok(ops::relu(inputs[0]))
    }

    fn vjp(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let x = inputs[0];
        let data = x
            .data()
            .iter()
            .zip(g.data())
            .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
            .collect();
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), data))])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct L2Normalize {
    pub axis: usize,
    pub eps: f64,
}

impl<T: Scalar> Primitive<T> for L2Normalize {
    fn name(&self) -> &'static str {
        "l2_normalize"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        arity("l2_normalize", inputs, 1)?;
        ops::l2_normalize(inputs[0], self.axis, T::lit(self.eps))
    }

    fn vjp(&self, inputs: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        // Above eps: dx = (g − y (y·g)) / ‖x‖. At or below: y = x/eps, dx = g/eps.
        let x = inputs[0];
        let eps = T::lit(self.eps);
        let (outer, n, inner) = axis_split("l2_normalize", x.shape(), self.axis)?;
        let (xd, yd, gd) = (x.data(), y.data(), g.data());
        let mut dx = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let norm = (0..n).map(|j| xd[at(j)] * xd[at(j)]).sum::<T>().sqrt();
                if norm > eps {
                    let dot: T = (0..n).map(|j| yd[at(j)] * gd[at(j)]).sum();
                    for j in 0..n {
                        dx[at(j)] = (gd[at(j)] - yd[at(j)] * dot) / norm;
                    }
                } else {
                    for j in 0..n {
                        dx[at(j)] = gd[at(j)] / eps;
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Concat(pub usize);

impl<T: Scalar> Primitive<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        ops::concat(inputs, self.0)
    }

    fn vjp(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Grads<T> {
        let mut start = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (x, &need) in inputs.iter().zip(needs) {
            let len = x.shape()[self.0];
            out.push(if need { Some(ops::slice(g, self.0, start, len)?) } else { None });
            start += len;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Slice {
    pub axis: usize,
    pub start: usize,
    pub len: usize,
}

impl<T: Scalar> Primitive<T> for Slice {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        arity("slice", inputs, 1)?;
        ops::slice(inputs[0], self.axis, self.start, self.len)
    }

    fn vjp(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let x = inputs[0];
        let (outer, n, inner) = axis_split("slice", x.shape(), self.axis)?;
        let mut dx = vec![T::zero(); x.len()];
        let chunk = self.len * inner;
        for o in 0..outer {
            let base = o * n * inner + self.start * inner;
            dx[base..base + chunk].copy_from_slice(&g.data()[o * chunk..(o + 1) * chunk]);
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))])
    }
}

/// Identity forward, zero backward.
#[derive(Clone, Copy, Debug)]
pub struct StopGradient;

impl<T: Scalar> Primitive<T> for StopGradient {
    fn name(&self) -> &'static str {
        "stop_gradient"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        arity("stop_gradient", inputs, 1)?;
        Ok(inputs[0].clone())
    }

    fn vjp(&self, _: &[&Tensor<T>], _: &Tensor<T>, _: &Tensor<T>, _: &[bool]) -> Grads<T> {
        Ok(vec![None])
    }
}

/// Statistics a batch-norm node normalizes with.
#[derive(Clone, Debug)]
pub enum BatchNormMode<T> {
    /// Normalize by the statistics of the incoming batch.
    Batch,
    /// Normalize by fixed running moments.
    Running { mean: Vec<T>, var: Vec<T> },
}

/// Batch normalization over a `[B, F]` input. Inputs are `x`, `gamma`, `beta`.
#[derive(Clone, Debug)]
pub struct BatchNorm<T>(pub BatchNormMode<T>);

impl<T: Scalar> Primitive<T> for BatchNorm<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        arity("batch_norm", inputs, 3)?;
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        match &self.0 {
            BatchNormMode::Batch => {
                let (mean, var) = ops::batch_moments(x)?;
                ops::batch_norm_apply(x, gamma, beta, &mean, &var)
            }
            BatchNormMode::Running { mean, var } => ops::batch_norm_apply(x, gamma, beta, mean, var),
        }
    }

    fn vjp(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Grads<T> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (b, f) = (x.shape()[0], x.shape()[1]);
        let (mean, var) = match &self.0 {
            BatchNormMode::Batch => ops::batch_moments(x)?,
            BatchNormMode::Running { mean, var } => (mean.clone(), var.clone()),
        };
        let eps = T::lit(ops::BN_EPS);
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xd, gd, gm) = (x.data(), g.data(), gamma.data());
        let mut dgamma = vec![T::zero(); f];
        let mut dbeta = vec![T::zero(); f];
        for r in 0..b {
            for j in 0..f {
                let xhat = (xd[r * f + j] - mean[j]) * inv[j];
                dgamma[j] = dgamma[j] + gd[r * f + j] * xhat;
                dbeta[j] = dbeta[j] + gd[r * f + j];
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); x.len()];
            match &self.0 {
                BatchNormMode::Batch => {
                    // dx = γ/(B σ) · (B g − Σg − x̂ Σ g x̂)
                    let bt = T::lit(b as f64);
                    for r in 0..b {
                        for j in 0..f {
                            let xhat = (xd[r * f + j] - mean[j]) * inv[j];
                            dx[r * f + j] = gm[j] * inv[j] / bt
                                * (bt * gd[r * f + j] - dbeta[j] - xhat * dgamma[j]);
                        }
                    }
                }
                BatchNormMode::Running { .. } => {
                    for r in 0..b {
                        for j in 0..f {
                            dx[r * f + j] = gd[r * f + j] * gm[j] * inv[j];
                        }
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), dx)
        });
        Ok(vec![
            dx,
            needs[1].then(|| Tensor::from_parts(vec![f], dgamma)),
            needs[2].then(|| Tensor::from_parts(vec![f], dbeta)),
        ])
    }
}

/// Mean over the batch of the per-example sum over classes of the binary
/// cross entropy between `sigmoid(logits)` and fixed multi-hot `labels`,
/// evaluated in the overflow-free form `max(z,0) − z·y + ln(1 + e^{−|z|})`.
#[derive(Clone, Debug)]
pub struct BceWithLogits<T> {
    labels: Tensor<T>,
}

impl<T: Scalar> BceWithLogits<T> {
    pub fn new(labels: Tensor<T>) -> Result<Self> {
        if labels.rank() != 2 {
            return Err(Error::invalid("bce", format!("labels must be [B, C], got {:?}", labels.shape())));
        }
        if let Some(i) = labels.data().iter().position(|&y| y != T::zero() && y != T::one()) {
            return Err(Error::invalid("bce", format!("label at flat index {i} is not 0 or 1")));
        }
        Ok(Self { labels })
    }
}

impl<T: Scalar> Primitive<T> for BceWithLogits<T> {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        arity("bce", inputs, 1)?;
        let z = inputs[0];
        if z.shape() != self.labels.shape() {
            return Err(Error::shape("bce", z.shape(), self.labels.shape()));
        }
        let b = T::lit(z.shape()[0].max(1) as f64);
        let total: T = z
            .data()
            .iter()
            .zip(self.labels.data())
            .map(|(&zv, &y)| zv.max(T::zero()) - zv * y + (-zv.abs()).exp().ln_1p())
            .sum();
        Ok(Tensor::scalar(total / b))
    }

    fn vjp(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let z = inputs[0];
        let scale = g.item() / T::lit(z.shape()[0].max(1) as f64);
        let data = z
            .data()
            .iter()
            .zip(self.labels.data())
            .map(|(&zv, &y)| (ops::sigmoid_scalar(zv) - y) * scale)
            .collect();
        Ok(vec![Some(Tensor::from_parts(z.shape().to_vec(), data))])
    }
}

#[cfg(test)]
mod tests {
    use super::super::{grad_check, Tape};
    use super::*;
    use crate::rng::SplitMix64;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape.to_vec(), 1.0, &mut SplitMix64::new(seed))
    }

    fn check(p: &dyn Primitive<f64>, inputs: &[Tensor<f64>]) {
        let r = grad_check(p, inputs, 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{}: {r:?}", p.name());
    }

    // Three shapes per primitive.
    #[test]
    fn matmul_gradients() {
        check(&MatMul, &[rand(&[2, 3], 1), rand(&[3, 2], 2)]);
        check(&MatMul, &[rand(&[2, 3, 4], 3), rand(&[4, 5], 4)]);
        check(&MatMul, &[rand(&[2, 2, 3], 5), rand(&[2, 3, 2], 6)]);
    }

    #[test]
    fn binary_gradients() {
        for kind in [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul] {
            check(&Binary(kind), &[rand(&[3, 4], 1), rand(&[3, 4], 2)]);
            check(&Binary(kind), &[rand(&[2, 3, 4], 3), rand(&[4], 4)]);
            check(&Binary(kind), &[rand(&[2, 1, 4], 5), rand(&[3, 1], 6)]);
        }
    }

    #[test]
    fn shape_primitives_gradients() {
        check(&Scale(-2.5), &[rand(&[3], 1)]);
        check(&Scale(0.5), &[rand(&[2, 3], 2)]);
        check(&Scale(3.0), &[rand(&[2, 2, 2], 3)]);
        check(&Reshape(vec![6]), &[rand(&[2, 3], 1)]);
        check(&Reshape(vec![3, 4]), &[rand(&[2, 6], 2)]);
        check(&Reshape(vec![2, 2, 2]), &[rand(&[8], 3)]);
        check(&TransposeLast2, &[rand(&[2, 3], 1)]);
        check(&TransposeLast2, &[rand(&[2, 3, 4], 2)]);
        check(&TransposeLast2, &[rand(&[1, 5], 3)]);
        check(&Concat(0), &[rand(&[2, 3], 1), rand(&[1, 3], 2)]);
        check(&Concat(1), &[rand(&[2, 3], 3), rand(&[2, 2], 4)]);
        check(&Concat(2), &[rand(&[2, 1, 2], 5), rand(&[2, 1, 3], 6)]);
        check(&Slice { axis: 0, start: 1, len: 2 }, &[rand(&[4, 2], 1)]);
        check(&Slice { axis: 1, start: 0, len: 1 }, &[rand(&[3, 3], 2)]);
        check(&Slice { axis: 2, start: 2, len: 2 }, &[rand(&[2, 2, 5], 3)]);
    }

    #[test]
    fn reduce_sum_gradients() {
        check(&ReduceSum { axes: vec![0], keep_dims: false }, &[rand(&[3, 4], 1)]);
        check(&ReduceSum { axes: vec![0, 2], keep_dims: true }, &[rand(&[2, 3, 4], 2)]);
        check(&ReduceSum { axes: vec![1], keep_dims: false }, &[rand(&[2, 5, 2], 3)]);
    }

    #[test]
    fn nonlinear_gradients() {
        check(&Softmax(0), &[rand(&[5], 1)]);
        check(&Softmax(1), &[rand(&[3, 4], 2)]);
        check(&Softmax(1), &[rand(&[2, 3, 4], 3)]);
        check(&LogSoftmax(0), &[rand(&[5], 4)]);
        check(&LogSoftmax(1), &[rand(&[3, 4], 5)]);
        check(&LogSoftmax(2), &[rand(&[2, 3, 4], 6)]);
        check(&Sigmoid, &[rand(&[5], 7)]);
        check(&Sigmoid, &[rand(&[3, 4], 8)]);
        check(&Sigmoid, &[rand(&[2, 3, 4], 9)]);
        check(&Relu, &[rand(&[5], 10)]);
        check(&Relu, &[rand(&[3, 4], 11)]);
        check(&Relu, &[rand(&[2, 3, 4], 12)]);
        check(&L2Normalize { axis: 0, eps: 1e-12 }, &[rand(&[5], 13)]);
        check(&L2Normalize { axis: 1, eps: 1e-12 }, &[rand(&[3, 4], 14)]);
        check(&L2Normalize { axis: 2, eps: 1e-12 }, &[rand(&[2, 3, 4], 15)]);
    }

    #[test]
    fn batch_norm_gradients() {
        let gamma = |s| rand(&[3], s);
        check(&BatchNorm(BatchNormMode::Batch), &[rand(&[4, 3], 1), gamma(2), gamma(3)]);
        check(&BatchNorm(BatchNormMode::Batch), &[rand(&[2, 3], 4), gamma(5), gamma(6)]);
        let running = BatchNormMode::Running { mean: vec![0.1, -0.2, 0.3], var: vec![1.5, 0.5, 2.0] };
        check(&BatchNorm(running), &[rand(&[5, 3], 7), gamma(8), gamma(9)]);
    }

    #[test]
    fn bce_gradients() {
        let labels = |b: usize, c: usize, s: u64| {
            let mut rng = SplitMix64::new(s);
            Tensor::new([b, c], (0..b * c).map(|_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 }).collect()).unwrap()
        };
        check(&BceWithLogits::new(labels(2, 3, 1)).unwrap(), &[rand(&[2, 3], 2)]);
        check(&BceWithLogits::new(labels(4, 2, 3)).unwrap(), &[rand(&[4, 2], 4)]);
        check(&BceWithLogits::new(labels(1, 5, 5)).unwrap(), &[rand(&[1, 5], 6)]);
        assert!(BceWithLogits::new(Tensor::<f64>::from_f64([1, 2], &[0.5, 1.0]).unwrap()).is_err());
    }

    #[test]
    fn batch_norm_forward_constant_feature() {
        let x = Tensor::<f64>::full([4, 2], 3.0);
        let y = BatchNorm(BatchNormMode::Batch)
            .forward(&[&x, &Tensor::ones([2]), &Tensor::zeros([2])])
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let mode = BatchNormMode::Running { mean: vec![0.0; 2], var: vec![1.0; 2] };
        let x = rand(&[3, 2], 9);
        let y = BatchNorm(mode).forward(&[&x, &Tensor::ones([2]), &Tensor::zeros([2])]).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-4);
    }

    #[test]
    fn tape_matches_primitive_vjp() {
        let a = rand(&[2, 3], 1);
        let b = rand(&[3, 2], 2);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let g = tape.backward_with(c, Tensor::ones([2, 2])).unwrap();
        let direct = MatMul.vjp(&[&a, &b], tape.value(c), &Tensor::ones([2, 2]), &[true, true]).unwrap();
        assert_eq!(g.get(va).unwrap(), direct[0].as_ref().unwrap());
        assert_eq!(g.get(vb).unwrap(), direct[1].as_ref().unwrap());
    }
}
