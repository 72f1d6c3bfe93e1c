use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments for every leaf of a parameter tree, in leaf
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like<X: ParamTree<Tensor<T>>>(params: &X) -> Self {
        let mut m = Vec::new();
        params.visit_leaves("", &mut |_, t| m.push(Tensor::zeros(t.shape().to_vec())));
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One bias-corrected Adam update. `grads` follow the tree's leaf order.
/// Non-finite gradients abort before anything is modified.
pub fn adam_step<T: Scalar, X: ParamTree<Tensor<T>>>(
    params: &mut X,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let mut names = Vec::with_capacity(grads.len());
    let mut shapes_ok = true;
    params.visit_leaves("", &mut |name, t| {
        let i = names.len();
        shapes_ok &= grads.get(i).is_some_and(|g| g.shape() == t.shape())
            && state.m.get(i).is_some_and(|m| m.shape() == t.shape());
        names.push(name.to_string());
    });
    if !shapes_ok || names.len() != grads.len() || state.m.len() != grads.len() || state.v.len() != grads.len() {
        return Err(Error::invalid("adam_step", "gradients and moments must mirror the parameter tree"));
    }
    if let Some(i) = grads.iter().position(|g| g.first_non_finite().is_some()) {
        return Err(Error::NonFiniteGradient { name: names[i].clone() });
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let c1 = T::lit(1.0 - BETA1.powi(t));
    let c2 = T::lit(1.0 - BETA2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(EPSILON));

    let mut i = 0;
    params.visit_leaves_mut("", &mut |_, p| {
        let (g, m, v) = (&grads[i], &mut state.m[i], &mut state.v[i]);
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
        i += 1;
    });
    Ok(())
}
