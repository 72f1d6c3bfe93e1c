use super::{FrameBatchView, NetVladConfig, INTRA_NORM_EPS};
use crate::error::{Error, Result};
use crate::params::{bind_constant, param_tree, Linear};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Soft-assignment layer and anchors of a NetVLAD stream.
#[derive(Clone, Debug, PartialEq)]
pub struct NetVladEncoder<P> {
    /// `[N, K]`
    pub assign_w: P,
    /// `[K]`
    pub assign_b: P,
    /// `[K, N]`
    pub centers: P,
}

param_tree!(NetVladEncoder { leaf assign_w, leaf assign_b, leaf centers });

impl NetVladEncoder<Vec<usize>> {
    pub fn shapes(feature_dim: usize, clusters: usize) -> Self {
        Self {
            assign_w: vec![feature_dim, clusters],
            assign_b: vec![clusters],
            centers: vec![clusters, feature_dim],
        }
    }
}

/// A standalone NetVLAD layer: encoder plus reduction to `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetVladParams<P> {
    pub encoder: NetVladEncoder<P>,
    /// `[N·K, H]`
    pub reduce: Linear<P>,
}

param_tree!(NetVladParams { node encoder, node reduce });

impl NetVladParams<Vec<usize>> {
    pub fn shapes(cfg: &NetVladConfig) -> Self {
        Self {
            encoder: NetVladEncoder::shapes(cfg.feature_dim, cfg.clusters),
            reduce: Linear::shape(cfg.descriptor_dim(), cfg.hidden),
        }
    }
}

/// Records the intra-normalized `[B, K·N]` descriptor of `frames: [B, M, N]`
/// under `mask: [B, M]`.
pub fn netvlad_descriptor<T: Scalar>(
    tape: &mut Tape<T>,
    frames: Var,
    mask: Var,
    enc: &NetVladEncoder<Var>,
) -> Result<Var> {
    let &[b, m, n] = tape.shape(frames) else {
        return Err(Error::invalid("netvlad", format!("frames must be [B, M, N], got {:?}", tape.shape(frames))));
    };
    let &[wn, k] = tape.shape(enc.assign_w) else {
        return Err(Error::invalid("netvlad", "assign_w must be [N, K]"));
    };
    if wn != n {
        return Err(Error::shape("netvlad", tape.shape(frames), tape.shape(enc.assign_w)));
    }
    if tape.shape(mask) != [b, m] {
        return Err(Error::shape("netvlad", tape.shape(frames), tape.shape(mask)));
    }

    let x = tape.reshape(frames, &[b * m, n])?;
    let logits = tape.affine(x, enc.assign_w, enc.assign_b)?;
    let alpha = tape.softmax(logits, 1)?;
    let alpha = tape.reshape(alpha, &[b, m, k])?;
    let mask3 = tape.reshape(mask, &[b, m, 1])?;
    let alpha = tape.mul(alpha, mask3)?;

    // Σ_i α_k(x_i)·x_ij  −  c_kj·Σ_i α_k(x_i)
    let alpha_t = tape.transpose(alpha)?;
    let weighted = tape.matmul(alpha_t, frames)?;
    let mass = tape.sum(alpha, &[1], true)?;
    let mass = tape.transpose(mass)?;
    let anchored = tape.mul(mass, enc.centers)?;
    let residual = tape.sub(weighted, anchored)?;

    let normed = tape.l2_normalize(residual, 2, INTRA_NORM_EPS)?;
    tape.reshape(normed, &[b, k * n])
}

impl NetVladParams<Var> {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, frames: Var, mask: Var) -> Result<Var> {
        let desc = netvlad_descriptor(tape, frames, mask, &self.encoder)?;
        self.reduce.apply(tape, desc)
    }
}

/// NetVLAD layer output `[B, H]` for a padded batch.
pub fn netvlad_forward<T: Scalar>(view: &FrameBatchView<T>, params: &NetVladParams<Tensor<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let frames = tape.constant(view.frames.clone());
    let mask = tape.constant(view.mask.clone());
    let p = bind_constant(&mut tape, params);
    let out = p.forward(&mut tape, frames, mask)?;
    Ok(tape.value(out).clone())
}
