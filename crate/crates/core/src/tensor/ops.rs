//! Forward kernels on plain tensors. The differentiable wrappers in
//! `primitives` call into these.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const BN_EPS: f64 = 1e-5;

fn check_finite<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<()> {
    match x.data().iter().position(|v| v.is_nan()) {
        Some(index) => Err(Error::NonFinite { op, index }),
        None => Ok(()),
    }
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
pub(crate) fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (right-aligned), zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out.len()];
    let offset = out.len() - shape.len();
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, offset_a, offset_b)` for every element of `out`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..last {
            f(o + j, oa + j * la, ob + j * lb);
        }
        o += last;
        // odometer over the leading axes
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(op, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Ok(Tensor::from_parts(out, data))
}

/// Sums `x` down to `shape`, the inverse of broadcasting `shape` up to `x.shape()`.
pub(crate) fn sum_to_shape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if x.shape() == shape {
        return x.clone();
    }
    let out = x.shape();
    let st = broadcast_strides(shape, out);
    let zero = vec![0; out.len()];
    let mut data = vec![T::zero(); shape.iter().product()];
    let xd = x.data();
    for_each_broadcast(out, &st, &zero, |o, it, _| data[it] = data[it] + xd[o]);
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
    x.map(|v| v * c)
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
}

/// `c[m,k] += a[m,n] · b[k,n]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot = arow.iter().zip(brow).fold(T::zero(), |s, (&x, &y)| s + x * y);
            c[i * k + p] = c[i * k + p] + dot;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
}

/// Batch geometry of a matmul: `(batch, m, k, n, b_shared)`.
pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(Error::shape("matmul", a, b));
    }
    let lead_a = &a[..a.len() - 2];
    let lead_b = &b[..b.len() - 2];
    let shared = lead_b.is_empty();
    if !shared && lead_a != lead_b {
        return Err(Error::shape("matmul", a, b));
    }
    Ok((lead_a.iter().product(), m, k, n, shared))
}

/// Matrix product over the last two axes, batched over the leading ones.
/// `b` may be a plain matrix shared by every batch entry.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, k, n, shared) = matmul_dims(a.shape(), b.shape())?;
    let mut out_shape = a.shape()[..a.rank() - 2].to_vec();
    out_shape.extend([m, n]);
    let mut c = vec![T::zero(); batch * m * n];
    if shared {
        gemm_nn(a.data(), b.data(), &mut c, batch * m, k, n);
    } else {
        for t in 0..batch {
            gemm_nn(
                &a.data()[t * m * k..(t + 1) * m * k],
                &b.data()[t * k * n..(t + 1) * k * n],
                &mut c[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
    }
    Ok(Tensor::from_parts(out_shape, c))
}

/// Swaps the last two axes.
pub fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::invalid("transpose", format!("rank {r} < 2")));
    }
    let (m, n) = (x.shape()[r - 2], x.shape()[r - 1]);
    let batch = x.len() / (m * n).max(1);
    let mut out = vec![T::zero(); x.len()];
    let d = x.data();
    for t in 0..batch {
        let base = t * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = d[base + i * n + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Ok(Tensor::from_parts(shape, out))
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_finite("softmax", x)?;
    let (outer, n, inner) = axis_split("softmax", x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let max = (0..n).map(|j| d[at(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..n {
                let e = (d[at(j)] - max).exp();
                out[at(j)] = e;
                total = total + e;
            }
            for j in 0..n {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Numerically stable log-softmax along `axis`.
pub fn log_softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_finite("log_softmax", x)?;
    let (outer, n, inner) = axis_split("log_softmax", x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let max = (0..n).map(|j| d[at(j)]).fold(T::neg_infinity(), T::max);
            let lse = (0..n).map(|j| (d[at(j)] - max).exp()).sum::<T>().ln() + max;
            for j in 0..n {
                out[at(j)] = d[at(j)] - lse;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_finite("sigmoid", x)?;
    Ok(x.map(sigmoid_scalar))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Divides each slice along `axis` by `max(‖slice‖₂, eps)`.
pub fn l2_normalize<T: Scalar>(x: &Tensor<T>, axis: usize, eps: T) -> Result<Tensor<T>> {
    if !(eps > T::zero()) {
        return Err(Error::invalid("l2_normalize", "eps must be positive"));
    }
    let (outer, n, inner) = axis_split("l2_normalize", x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let norm = (0..n).map(|j| d[at(j)] * d[at(j)]).sum::<T>().sqrt();
            let denom = norm.max(eps);
            for j in 0..n {
                out[at(j)] = d[at(j)] / denom;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize], keep_dims: bool) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter_map(|(i, &d)| {
            if axes.contains(&i) {
                keep_dims.then_some(1)
            } else {
                Some(d)
            }
        })
        .collect()
}

pub(crate) fn validate_axes(shape: &[usize], axes: &[usize]) -> Result<()> {
    for (i, &a) in axes.iter().enumerate() {
        if a >= shape.len() {
            return Err(Error::invalid(
                "reduce_sum",
                format!("axis {a} out of range for shape {shape:?}"),
            ));
        }
        if axes[..i].contains(&a) {
            return Err(Error::invalid("reduce_sum", format!("duplicate axis {a}")));
        }
    }
    Ok(())
}

/// Sums over `axes`. Reduced extents are dropped, or kept as 1 with `keep_dims`.
pub fn reduce_sum<T: Scalar>(x: &Tensor<T>, axes: &[usize], keep_dims: bool) -> Result<Tensor<T>> {
    validate_axes(x.shape(), axes)?;
    let kept = reduced_shape(x.shape(), axes, true);
    let summed = sum_to_shape(x, &kept);
    summed.into_reshape(reduced_shape(x.shape(), axes, keep_dims))
}

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::invalid("concat", format!("axis {axis} out of range")));
    }
    let mut total = 0;
    for p in parts {
        let same = p.rank() == rank
            && (0..rank).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
        if !same {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
        total += p.shape()[axis];
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, data))
}

/// `x[.., start..start+len, ..]` along `axis`.
pub fn slice<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_split("slice", x.shape(), axis)?;
    if start + len > n {
        return Err(Error::invalid(
            "slice",
            format!("range {start}..{} exceeds extent {n}", start + len),
        ));
    }
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner + start * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}

/// Per-feature batch mean and biased variance of a `[B, F]` tensor.
pub fn batch_moments<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    if x.rank() != 2 {
        return Err(Error::invalid("batch_norm", format!("expected [B, F], got {:?}", x.shape())));
    }
    let (b, f) = (x.shape()[0], x.shape()[1]);
    if b == 0 {
        return Err(Error::invalid("batch_norm", "empty batch"));
    }
    let d = x.data();
    let bt = T::lit(b as f64);
    let mut mean = vec![T::zero(); f];
    for r in 0..b {
        for j in 0..f {
            mean[j] = mean[j] + d[r * f + j];
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / bt);
    let mut var = vec![T::zero(); f];
    for r in 0..b {
        for j in 0..f {
            let c = d[r * f + j] - mean[j];
            var[j] = var[j] + c * c;
        }
    }
    var.iter_mut().for_each(|v| *v = *v / bt);
    Ok((mean, var))
}

/// `gamma · (x − mean) / √(var + ε) + beta`, feature-wise over a `[B, F]` input.
pub fn batch_norm_apply<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::invalid("batch_norm", format!("expected [B, F], got {:?}", x.shape())));
    }
    let (b, f) = (x.shape()[0], x.shape()[1]);
    if b == 0 {
        return Err(Error::invalid("batch_norm", "empty batch"));
    }
    if gamma.shape() != [f] || beta.shape() != [f] || mean.len() != f || var.len() != f {
        return Err(Error::shape("batch_norm", x.shape(), gamma.shape()));
    }
    let eps = T::lit(BN_EPS);
    let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (g, bt, d) = (gamma.data(), beta.data(), x.data());
    let mut out = vec![T::zero(); x.len()];
    for r in 0..b {
        for j in 0..f {
            out[r * f + j] = g[j] * (d[r * f + j] - mean[j]) * inv[j] + bt[j];
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Inverted-dropout keep mask: each entry is `1/(1−rate)` with probability
/// `1−rate`, else 0. One uniform draw per element, in row-major order.
pub fn dropout_mask<T: Scalar>(shape: &[usize], rate: f64, rng: &mut SplitMix64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("dropout", format!("rate {rate} not in [0, 1)")));
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
        .collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    rng: &mut SplitMix64,
    training: bool,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("dropout", format!("rate {rate} not in [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.shape(), rate, rng)?;
    mul(x, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        Tensor::new([m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        let col = t(&[2, 1], &[3., 4.]);
        assert_eq!(matmul(&id, &col).unwrap().data(), &[3., 4.]);
        let row = t(&[1, 2], &[1., 2.]);
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SplitMix64::new(5);
        let a = Tensor::<f64>::randn([3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([4, 2], 1.0, &mut rng);
        let diff = matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)).unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn matmul_batched() {
        let mut rng = SplitMix64::new(6);
        let a = Tensor::<f64>::randn([2, 3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([2, 4, 5], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        for t in 0..2 {
            let at = slice(&a, 0, t, 1).unwrap().into_reshape([3, 4]).unwrap();
            let bt = slice(&b, 0, t, 1).unwrap().into_reshape([4, 5]).unwrap();
            let ct = slice(&c, 0, t, 1).unwrap().into_reshape([3, 5]).unwrap();
            assert!(ct.max_abs_diff(&naive_matmul(&at, &bt)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let a = Tensor::<f64>::zeros([2, 3]);
        let b = Tensor::<f64>::zeros([2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[2], &[0., 0.]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[2], &[1000., 1000.]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[3], &[1., 2., 3.]), 0).unwrap();
        // e^x / Σ e^x with e^1, e^2, e^3 evaluated directly
        let e: Vec<f64> = [1f64, 2., 3.].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (got, want) in s.data().iter().zip(&e) {
            assert!((got - want / z).abs() < 1e-15);
        }
        assert!(softmax(&t(&[2], &[f64::NAN, 0.]), 0).is_err());
    }

    #[test]
    fn softmax_inner_axis() {
        let x = t(&[2, 3], &[1., 2., 3., 0., 0., 0.]);
        let s = softmax(&x, 0).unwrap();
        for j in 0..3 {
            assert!((s.data()[j] + s.data()[3 + j] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(&t(&[1], &[0.])).unwrap().data(), &[0.5]);
        let big = sigmoid(&t(&[1], &[800.])).unwrap().data()[0];
        assert!(big <= 1.0 && big > 1.0 - 1e-12);
        let tiny = sigmoid(&t(&[1], &[-800.])).unwrap().data()[0];
        assert!(tiny >= 0.0 && tiny.is_finite());
        let mut rng = SplitMix64::new(1);
        let x = Tensor::<f64>::randn([50], 3.0, &mut rng);
        let a = sigmoid(&x).unwrap();
        let b = sigmoid(&scale(&x, -1.0)).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p + q - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn l2_normalize_examples() {
        assert_eq!(l2_normalize(&t(&[2], &[3., 4.]), 0, 1e-12).unwrap().data(), &[0.6, 0.8]);
        assert_eq!(l2_normalize(&t(&[2], &[0., 0.]), 0, 1e-12).unwrap().data(), &[0., 0.]);
        let mut rng = SplitMix64::new(2);
        let x = Tensor::<f64>::randn([17], 1.0, &mut rng);
        let y = l2_normalize(&x, 0, 1e-12).unwrap();
        let n: f64 = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert!(l2_normalize(&x, 0, 0.0).is_err());
    }

    #[test]
    fn reduce_sum_examples() {
        let x = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(reduce_sum(&x, &[0], false).unwrap().data(), &[4., 6.]);
        assert_eq!(reduce_sum(&x, &[], false).unwrap(), x);
        assert_eq!(reduce_sum(&x, &[1], true).unwrap().shape(), &[2, 1]);
        assert!(reduce_sum(&x, &[0, 0], false).is_err());

        let mut rng = SplitMix64::new(3);
        let x = Tensor::<f64>::randn([3, 4, 5], 1.0, &mut rng);
        let r = reduce_sum(&x, &[0, 2], false).unwrap();
        for j in 0..4 {
            let mut s = 0.0;
            for i in 0..3 {
                for k in 0..5 {
                    s += x.data()[i * 20 + j * 5 + k];
                }
            }
            assert!((r.data()[j] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcasting_binary_ops() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3], &[10., 20., 30.]);
        assert_eq!(add(&a, &b).unwrap().data(), &[11., 22., 33., 14., 25., 36.]);
        let c = t(&[2, 1], &[2., 3.]);
        assert_eq!(mul(&a, &c).unwrap().data(), &[2., 4., 6., 12., 15., 18.]);
        assert!(add(&a, &t(&[2], &[1., 2.])).is_err());
        let s = sum_to_shape(&a, &[1, 3]);
        assert_eq!(s.data(), &[5., 7., 9.]);
    }

    #[test]
    fn batch_norm_two_elements() {
        let x = t(&[2, 1], &[1., 3.]);
        let (m, v) = batch_moments(&x).unwrap();
        assert_eq!((m[0], v[0]), (2.0, 1.0));
        let y = batch_norm_apply(&x, &t(&[1], &[1.]), &t(&[1], &[0.]), &m, &v).unwrap();
        let s = (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + 1.0 / s).abs() < 1e-15);
        assert!((y.data()[1] - 1.0 / s).abs() < 1e-15);
        assert!(batch_moments(&Tensor::<f64>::zeros([0, 3])).is_err());
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = t(&[2, 1], &[1., 2.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1., 3., 4., 2., 5., 6.]);
        assert_eq!(slice(&c, 1, 1, 2).unwrap(), b);
    }

    #[test]
    fn dropout_rules() {
        let mut rng = SplitMix64::new(11);
        let x = Tensor::<f64>::randn([100], 1.0, &mut rng);
        assert_eq!(dropout(&x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(dropout(&x, 0.7, &mut rng, false).unwrap(), x);
        assert!(dropout(&x, 1.0, &mut rng, true).is_err());

        let ones = Tensor::<f32>::ones([1_000_000]);
        let y = dropout(&ones, 0.5, &mut rng, true).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
        assert!((kept - 0.5).abs() < 0.002, "{kept}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in proptest::collection::vec(-500.0f64..500.0, 1..20)) {
            let n = v.len();
            let s = softmax(&Tensor::new([n], v).unwrap(), 0).unwrap();
            let total: f64 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn dropout_inference_is_bit_identical(v in proptest::collection::vec(any::<f32>(), 0..64), rate in 0.0f64..0.99) {
            let n = v.len();
            let x = Tensor::new([n], v).unwrap();
            let y = dropout(&x, rate, &mut SplitMix64::new(0), false).unwrap();
            let same = x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
