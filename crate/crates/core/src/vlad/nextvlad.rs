use super::{FrameBatchView, NeXtVladConfig, INTRA_NORM_EPS};
use crate::error::{Error, Result};
use crate::params::{bind_constant, param_tree, Linear};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Expansion, group attention, per-group assignment and shared anchors of
/// a NeXtVLAD stream.
#[derive(Clone, Debug, PartialEq)]
pub struct NeXtVladEncoder<P> {
    /// `[N, λN]`
    pub expand_w: P,
    /// `[λN]`
    pub expand_b: P,
    /// `[λN, G]`
    pub attn_w: P,
    /// `[G]`
    pub attn_b: P,
    /// `[λN, G·K]`, column `g·K + k`
    pub assign_w: P,
    /// `[G·K]`
    pub assign_b: P,
    /// `[K, λN/G]`, shared by all groups
    pub centers: P,
}

param_tree!(NeXtVladEncoder {
    leaf expand_w,
    leaf expand_b,
    leaf attn_w,
    leaf attn_b,
    leaf assign_w,
    leaf assign_b,
    leaf centers,
});

impl NeXtVladEncoder<Vec<usize>> {
    pub fn shapes(cfg: &NeXtVladConfig) -> Self {
        let (n, ln, g, k) = (cfg.feature_dim, cfg.expanded_dim(), cfg.groups, cfg.clusters);
        Self {
            expand_w: vec![n, ln],
            expand_b: vec![ln],
            attn_w: vec![ln, g],
            attn_b: vec![g],
            assign_w: vec![ln, g * k],
            assign_b: vec![g * k],
            centers: vec![k, cfg.group_dim()],
        }
    }
}

/// A standalone NeXtVLAD layer: encoder plus reduction to `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeXtVladParams<P> {
    pub encoder: NeXtVladEncoder<P>,
    /// `[λN·K/G, H]`
    pub reduce: Linear<P>,
}

param_tree!(NeXtVladParams { node encoder, node reduce });

impl NeXtVladParams<Vec<usize>> {
    pub fn shapes(cfg: &NeXtVladConfig) -> Self {
        Self {
            encoder: NeXtVladEncoder::shapes(cfg),
            reduce: Linear::shape(cfg.descriptor_dim(), cfg.hidden),
        }
    }
}

/// Records the intra-normalized `[B, K·λN/G]` descriptor of
/// `frames: [B, M, N]` under `mask: [B, M]`.
pub fn nextvlad_descriptor<T: Scalar>(
    tape: &mut Tape<T>,
    frames: Var,
    mask: Var,
    enc: &NeXtVladEncoder<Var>,
) -> Result<Var> {
    let &[b, m, n] = tape.shape(frames) else {
        return Err(Error::invalid("nextvlad", format!("frames must be [B, M, N], got {:?}", tape.shape(frames))));
    };
    let &[wn, ln] = tape.shape(enc.expand_w) else {
        return Err(Error::invalid("nextvlad", "expand_w must be [N, λN]"));
    };
    if wn != n {
        return Err(Error::shape("nextvlad", tape.shape(frames), tape.shape(enc.expand_w)));
    }
    let g = tape.shape(enc.attn_w)[1];
    let &[k, gd] = tape.shape(enc.centers) else {
        return Err(Error::invalid("nextvlad", "centers must be [K, λN/G]"));
    };
    if g * gd != ln || tape.shape(enc.assign_w) != [ln, g * k] {
        return Err(Error::invalid(
            "nextvlad",
            format!("inconsistent shapes: λN={ln}, G={g}, K={k}, group dim {gd}"),
        ));
    }
    if tape.shape(mask) != [b, m] {
        return Err(Error::shape("nextvlad", tape.shape(frames), tape.shape(mask)));
    }

    let x = tape.reshape(frames, &[b * m, n])?;
    let expanded = tape.affine(x, enc.expand_w, enc.expand_b)?;

    // group attention α_g(ẋ_i), zeroed on padding frames
    let attn = tape.affine(expanded, enc.attn_w, enc.attn_b)?;
    let attn = tape.sigmoid(attn)?;
    let attn = tape.reshape(attn, &[b, m, g])?;
    let mask3 = tape.reshape(mask, &[b, m, 1])?;
    let attn = tape.mul(attn, mask3)?;
    let attn = tape.reshape(attn, &[b, m, g, 1])?;

    // per-group soft assignment α_gk(ẋ_i), softmax over K
    let assign = tape.affine(expanded, enc.assign_w, enc.assign_b)?;
    let assign = tape.reshape(assign, &[b * m * g, k])?;
    let assign = tape.softmax(assign, 1)?;
    let assign = tape.reshape(assign, &[b, m, g, k])?;

    let weight = tape.mul(assign, attn)?;
    let weight = tape.reshape(weight, &[b, m * g, k])?;
    let grouped = tape.reshape(expanded, &[b, m * g, gd])?;

    // Σ_{i,g} w·x̃  −  c_kj·Σ_{i,g} w
    let weight_t = tape.transpose(weight)?;
    let weighted = tape.matmul(weight_t, grouped)?;
    let mass = tape.sum(weight, &[1], true)?;
    let mass = tape.transpose(mass)?;
    let anchored = tape.mul(mass, enc.centers)?;
    let residual = tape.sub(weighted, anchored)?;

    let normed = tape.l2_normalize(residual, 2, INTRA_NORM_EPS)?;
    tape.reshape(normed, &[b, k * gd])
}

impl NeXtVladParams<Var> {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, frames: Var, mask: Var) -> Result<Var> {
        let desc = nextvlad_descriptor(tape, frames, mask, &self.encoder)?;
        self.reduce.apply(tape, desc)
    }
}

/// NeXtVLAD layer output `[B, H]` for a padded batch.
pub fn nextvlad_forward<T: Scalar>(view: &FrameBatchView<T>, params: &NeXtVladParams<Tensor<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let frames = tape.constant(view.frames.clone());
    let mask = tape.constant(view.mask.clone());
    let p = bind_constant(&mut tape, params);
    let out = p.forward(&mut tape, frames, mask)?;
    Ok(tape.value(out).clone())
}
