use super::{Encoder, Model, ModelConfig, ModelParams, ModelStats, NetworkParams, NetworkStats, SecgParams, SecgStats};
use crate::data::{Batch, Eigenvalues};
use crate::error::{Error, Result};
use crate::params::{batch_norm_var, bind_constant};
use crate::rng::SplitMix64;
use crate::tensor::{ops, Scalar, Tape, Tensor, Var};
use crate::vlad::{netvlad_descriptor, nextvlad_descriptor, FrameBatchView};

/// `x_j · √e_j` over the last axis.
pub fn reverse_whitening<T: Scalar>(x: &Tensor<T>, eig: &Eigenvalues) -> Result<Tensor<T>> {
    let n = x.shape().last().copied().unwrap_or(0);
    if n != eig.len() {
        return Err(Error::shape("reverse_whitening", x.shape(), &[eig.len()]));
    }
    let scale: Vec<T> = eig.values().iter().map(|&e| T::lit(e.sqrt())).collect();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        row.iter_mut().zip(&scale).for_each(|(v, &s)| *v = *v * s);
    }
    Ok(out)
}

/// Mean over valid frames, `[B, N]`; zero for videos without valid frames.
pub fn masked_mean<T: Scalar>(view: &FrameBatchView<T>) -> Tensor<T> {
    let (b, m, n) = (view.batch(), view.max_frames(), view.feature_dim());
    let mut out = Tensor::zeros([b, n]);
    for r in 0..b {
        let len = view.lengths[r];
        if len == 0 {
            continue;
        }
        let dst = &mut out.data_mut()[r * n..(r + 1) * n];
        for i in 0..len {
            let src = &view.frames.data()[(r * m + i) * n..(r * m + i + 1) * n];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
        }
        let inv = T::lit(1.0 / len as f64);
        dst.iter_mut().for_each(|d| *d = *d * inv);
    }
    out
}

/// Records `x ⊙ σ(BN₂(relu(BN₁(x·W₁))·W₂))`.
pub fn se_context_gating_var<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &SecgParams<Var>,
    stats: &mut SecgStats<Tensor<T>>,
    training: bool,
) -> Result<Var> {
    if tape.shape(x).len() != 2 || tape.shape(x)[1] != tape.shape(p.fc1_w)[0] {
        return Err(Error::shape("se_context_gating", tape.shape(x), tape.shape(p.fc1_w)));
    }
    let h = tape.matmul(x, p.fc1_w)?;
    let h = batch_norm_var(tape, h, &p.bn1, &mut stats.bn1, training)?;
    let h = tape.relu(h)?;
    let g = tape.matmul(h, p.fc2_w)?;
    let g = batch_norm_var(tape, g, &p.bn2, &mut stats.bn2, training)?;
    let g = tape.sigmoid(g)?;
    tape.mul(x, g)
}

pub fn se_context_gating<T: Scalar>(
    x: &Tensor<T>,
    p: &SecgParams<Tensor<T>>,
    stats: &mut SecgStats<Tensor<T>>,
    training: bool,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = bind_constant(&mut tape, p);
    let y = se_context_gating_var(&mut tape, xv, &pv, stats, training)?;
    Ok(tape.value(y).clone())
}

fn encode<T: Scalar>(tape: &mut Tape<T>, enc: &Encoder<Var>, frames: Var, mask: Var) -> Result<Var> {
    match enc {
        Encoder::NetVlad(e) => netvlad_descriptor(tape, frames, mask, e),
        Encoder::NeXtVlad(e) => nextvlad_descriptor(tape, frames, mask, e),
    }
}

struct Inputs {
    video: Var,
    video_mask: Var,
    audio: Var,
    audio_mask: Var,
}

fn model_logits<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &ModelParams<Var>,
    stats: &mut ModelStats<Tensor<T>>,
    x: &Inputs,
    dropout: Option<&mut SplitMix64>,
) -> Result<Var> {
    let training = dropout.is_some();
    let dv = encode(tape, &p.video, x.video, x.video_mask)?;
    let da = encode(tape, &p.audio, x.audio, x.audio_mask)?;
    let mut h = tape.concat(&[dv, da], 1)?;
    if let Some(rng) = dropout {
        h = tape.dropout(h, cfg.dropout_rate, rng, true)?;
    }
    let h = p.reduce.apply(tape, h)?;
    let h = batch_norm_var(tape, h, &p.reduce_bn, &mut stats.reduce_bn, training)?;
    let h = se_context_gating_var(tape, h, &p.secg, &mut stats.secg, training)?;
    p.classifier.apply(tape, h)
}

/// Handles produced by [`network_forward_var`].
#[derive(Clone, Debug)]
pub struct NetworkOutput {
    /// Logits of the single model, or of the mixture.
    pub logits: Var,
    /// Per-expert logits; empty for a single model.
    pub experts: Vec<Var>,
    /// `[B, 3]` gate weights of a mixture.
    pub gates: Option<Var>,
}

/// Records the network on `tape`. Passing a dropout generator selects
/// training mode: dropout is active and batch norm uses (and folds in)
/// batch statistics. Without one the network runs in inference mode.
#[allow(clippy::too_many_arguments)]
pub fn network_forward_var<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    params: &NetworkParams<Var>,
    stats: &mut NetworkStats<Tensor<T>>,
    batch: &Batch<T>,
    eig: Option<&Eigenvalues>,
    mut dropout: Option<&mut SplitMix64>,
) -> Result<NetworkOutput> {
    if batch.visual.feature_dim() != cfg.video_dim || batch.audio.feature_dim() != cfg.audio_dim {
        return Err(Error::invalid(
            "model_forward",
            format!(
                "batch has visual/audio dims {}/{}, model expects {}/{}",
                batch.visual.feature_dim(),
                batch.audio.feature_dim(),
                cfg.video_dim,
                cfg.audio_dim
            ),
        ));
    }
    let video = match eig {
        Some(e) => reverse_whitening(&batch.visual.frames, e)?,
        None => batch.visual.frames.clone(),
    };
    let x = Inputs {
        video: tape.constant(video),
        video_mask: tape.constant(batch.visual.mask.clone()),
        audio: tape.constant(batch.audio.frames.clone()),
        audio_mask: tape.constant(batch.audio.mask.clone()),
    };
    match (params, stats) {
        (NetworkParams::Single(p), NetworkStats::Single(s)) => Ok(NetworkOutput {
            logits: model_logits(tape, cfg, p, s, &x, dropout)?,
            experts: Vec::new(),
            gates: None,
        }),
        (NetworkParams::Mixture(p), NetworkStats::Mixture(s)) => {
            let mut experts = Vec::with_capacity(3);
            for (ep, es) in p.experts().into_iter().zip(s.experts_mut()) {
                experts.push(model_logits(tape, cfg, ep, es, &x, dropout.as_deref_mut())?);
            }
            let mean = ops::concat(&[&masked_mean(&batch.visual), &masked_mean(&batch.audio)], 1)?;
            let mean = tape.constant(mean);
            let gates = p.gate.apply(tape, mean)?;
            let gates = tape.softmax(gates, 1)?;
            let mut mixed = None;
            for (m, &z) in experts.iter().enumerate() {
                let a = tape.slice(gates, 1, m, 1)?;
                let term = tape.mul(a, z)?;
                mixed = Some(match mixed {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            Ok(NetworkOutput {
                logits: mixed.expect("three experts"),
                experts,
                gates: Some(gates),
            })
        }
        _ => Err(Error::invalid("model_forward", "parameters and statistics disagree on mixture layout")),
    }
}

/// Final logits `[B, C]` of a model (the mixture logits for a mixture).
pub fn model_forward<T: Scalar>(model: &mut Model<T>, batch: &Batch<T>, dropout: Option<&mut SplitMix64>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = bind_constant(&mut tape, &model.params);
    let eig = model.whitening().cloned();
    let out = network_forward_var(&mut tape, &model.config, &p, &mut model.stats, batch, eig.as_ref(), dropout)?;
    Ok(tape.value(out.logits).clone())
}

/// Expert logits, mixture logits and gates of a mixture model.
pub fn mixture_forward<T: Scalar>(
    model: &mut Model<T>,
    batch: &Batch<T>,
    dropout: Option<&mut SplitMix64>,
) -> Result<(Vec<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    if !model.config.is_mixture() {
        return Err(Error::invalid("mixture_forward", "model is not a mixture"));
    }
    let mut tape = Tape::new();
    let p = bind_constant(&mut tape, &model.params);
    let eig = model.whitening().cloned();
    let out = network_forward_var(&mut tape, &model.config, &p, &mut model.stats, batch, eig.as_ref(), dropout)?;
    let experts = out.experts.iter().map(|&z| tape.value(z).clone()).collect();
    let gates = tape.value(out.gates.expect("mixture has gates")).clone();
    Ok((experts, tape.value(out.logits).clone(), gates))
}
