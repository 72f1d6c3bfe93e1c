//! Self-checks run by the `verify` command: gradient checks, agreement with
//! the nested-loop references, masking, the metric oracle and the
//! closed-form parameter counts.

use crate::data::{make_batch, Batch, Dataset, VideoRecord};
use crate::error::Result;
use crate::losses::{total_loss_var, LossConfig};
use crate::metrics::{gap_at_20, gap_brute_force, PredictionSet};
use crate::model::{
    model_forward, network_forward_var, se_param_count, Aggregation, Model, ModelConfig, NetworkParams, SecgParams,
};
use crate::params::{init_from_shapes, zeros_like_shapes, Census, ParamTree};
use crate::rng::SplitMix64;
use crate::tensor::{grad_check, FnPrimitive, Scalar, Tape, Tensor, Var, DEFAULT_H, DEFAULT_TOL};
use crate::vlad::{
    netvlad_forward, nextvlad_forward, nextvlad_reference, param_count_netvlad, param_count_nextvlad,
    FrameBatchView, NeXtVladConfig, NeXtVladParams, NetVladConfig, NetVladParams,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

fn leaves(tree: &impl ParamTree<Tensor<f64>>) -> Vec<Tensor<f64>> {
    let mut v = Vec::new();
    tree.visit_leaves("", &mut |_, t| v.push(t.clone()));
    v
}

fn random_view<T: Scalar>(b: usize, m: usize, n: usize, rng: &mut SplitMix64) -> FrameBatchView<T> {
    let lengths: Vec<usize> = (0..b).map(|_| rng.below(m + 1)).collect();
    let mut frames = Tensor::<T>::randn([b, m, n], 1.0, rng);
    for (r, &l) in lengths.iter().enumerate() {
        frames.data_mut()[(r * m + l) * n..(r + 1) * m * n].fill(T::zero());
    }
    FrameBatchView::new(frames, lengths).expect("lengths are within the padded extent")
}

/// A small deterministic toy model configuration.
pub fn toy_model_config(aggregation: Aggregation, experts: usize) -> ModelConfig {
    ModelConfig {
        video_dim: 4,
        audio_dim: 2,
        aggregation,
        clusters: 2,
        hidden: 4,
        se_ratio: 2,
        num_classes: 3,
        dropout_rate: 0.5,
        reverse_whitening: false,
        experts,
    }
}

/// A random batch for [`toy_model_config`]-shaped models.
pub fn toy_batch<T: Scalar>(cfg: &ModelConfig, b: usize, m: usize, seed: u64) -> Result<Batch<T>> {
    let mut rng = SplitMix64::new(seed);
    let mut d = Dataset::new(cfg.video_dim, cfg.audio_dim, cfg.num_classes);
    for i in 0..b {
        let len = 1 + rng.below(m);
        let labels: Vec<u32> = (0..cfg.num_classes as u32).filter(|_| rng.uniform() < 0.5).collect();
        d.records.push(VideoRecord {
            id: format!("toy{i}"),
            labels,
            visual: (0..len * cfg.video_dim).map(|_| rng.normal() as f32).collect(),
            audio: (0..len * cfg.audio_dim).map(|_| rng.normal() as f32).collect(),
        });
    }
    make_batch(&d, &(0..b).collect::<Vec<_>>(), m)
}

fn report(name: &str, r: crate::tensor::GradCheckReport) -> CheckResult {
    CheckResult::new(
        name,
        r.passed,
        format!("max relative error {:.2e} over {} entries", r.max_rel_error, r.checked),
    )
}

/// Float64 gradient checks of both layers, a full model and the
/// distillation loss over a three-expert mixture.
pub fn gradient_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = SplitMix64::new(0x6ead);

    let cfg = NeXtVladConfig::new(3, 2, 2, 2, 3)?;
    let shapes = NeXtVladParams::shapes(&cfg);
    let p: NeXtVladParams<Tensor<f64>> = init_from_shapes(&shapes, &mut rng);
    let view = random_view::<f64>(2, 3, 3, &mut rng);
    let mut inputs = vec![view.frames.clone()];
    inputs.extend(leaves(&p));
    let mask = view.mask.clone();
    let prim = FnPrimitive::new("nextvlad", move |tape: &mut Tape<f64>, xs: &[Var]| {
        let mut it = xs[1..].iter().copied();
        let params = shapes.map_leaves("", &mut |_, _| it.next().expect("one var per leaf"));
        let m = tape.constant(mask.clone());
        params.forward(tape, xs[0], m)
    });
    out.push(report("grad nextvlad_forward", grad_check(&prim, &inputs, DEFAULT_H, DEFAULT_TOL)?));

    let cfg = NetVladConfig::new(3, 3, 2)?;
    let shapes = NetVladParams::shapes(&cfg);
    let p: NetVladParams<Tensor<f64>> = init_from_shapes(&shapes, &mut rng);
    let view = random_view::<f64>(2, 3, 3, &mut rng);
    let mut inputs = vec![view.frames.clone()];
    inputs.extend(leaves(&p));
    let mask = view.mask.clone();
    let prim = FnPrimitive::new("netvlad", move |tape: &mut Tape<f64>, xs: &[Var]| {
        let mut it = xs[1..].iter().copied();
        let params = shapes.map_leaves("", &mut |_, _| it.next().expect("one var per leaf"));
        let m = tape.constant(mask.clone());
        params.forward(tape, xs[0], m)
    });
    out.push(report("grad netvlad_forward", grad_check(&prim, &inputs, DEFAULT_H, DEFAULT_TOL)?));

    for (name, experts) in [("grad model_forward", 1), ("grad total_loss (3-expert mixture)", 3)] {
        let mcfg = toy_model_config(Aggregation::NeXtVlad { expansion: 2, groups: 2 }, experts);
        let model = Model::<f64>::init(mcfg, None, 21)?;
        let batch = toy_batch::<f64>(&mcfg, 3, 4, 22)?;
        let shapes = NetworkParams::shapes(&mcfg)?;
        let stats = model.stats.clone();
        let kd = LossConfig::new(3.0);
        let prim = FnPrimitive::new("network", move |tape: &mut Tape<f64>, xs: &[Var]| {
            let mut it = xs.iter().copied();
            let p = shapes.map_leaves("", &mut |_, _| it.next().expect("one var per leaf"));
            let mut s = stats.clone();
            let mut rng = SplitMix64::new(5);
            let out = network_forward_var(tape, &mcfg, &p, &mut s, &batch, None, Some(&mut rng))?;
            if out.experts.is_empty() {
                Ok(out.logits)
            } else {
                Ok(total_loss_var(tape, &out.experts, out.logits, &batch.labels, &kd)?.0)
            }
        });
        out.push(report(name, grad_check(&prim, &leaves(&model.params), DEFAULT_H, DEFAULT_TOL)?));
    }
    Ok(out)
}

fn random_nextvlad(rng: &mut SplitMix64) -> Result<NeXtVladConfig> {
    let n = 1 + rng.below(5);
    let lambda = 1 + rng.below(3);
    let divisors: Vec<usize> = (1..=lambda * n).filter(|g| (lambda * n).is_multiple_of(*g)).collect();
    let g = divisors[rng.below(divisors.len())];
    NeXtVladConfig::new(n, lambda, g, 1 + rng.below(4), 1 + rng.below(4))
}

fn scaled_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// The vectorized NeXtVLAD against its nested-loop reference on random
/// tiny configurations, in both precisions.
pub fn oracle_suite(configs: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = SplitMix64::new(seed);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for _ in 0..configs {
        let cfg = random_nextvlad(&mut rng)?;
        let mut p: NeXtVladParams<Tensor<f64>> = init_from_shapes(&NeXtVladParams::shapes(&cfg), &mut rng);
        p.visit_leaves_mut("", &mut |_, t| {
            if t.rank() == 1 {
                *t = Tensor::randn(t.shape().to_vec(), 0.5, &mut rng);
            }
        });
        let (b, m) = (1 + rng.below(3), 1 + rng.below(5));
        let view = random_view::<f64>(b, m, cfg.feature_dim, &mut rng);
        let want = nextvlad_reference(&view, &p)?;
        worst64 = worst64.max(scaled_error(&nextvlad_forward(&view, &p)?, &want));
        let p32 = p.map_leaves("", &mut |_, t| t.cast::<f32>());
        let got32 = nextvlad_forward(&view.cast::<f32>(), &p32)?.cast::<f64>();
        worst32 = worst32.max(scaled_error(&got32, &want));
    }
    Ok(vec![
        CheckResult::new("oracle nextvlad float64", worst64 <= 1e-12, format!("{configs} configs, max error {worst64:.2e}")),
        CheckResult::new("oracle nextvlad float32", worst32 <= 1e-6, format!("{configs} configs, max error {worst32:.2e}")),
    ])
}

/// With one group, no expansion and an always-open attention gate,
/// NeXtVLAD reduces to NetVLAD on the same weights.
pub fn reduction_check(seed: u64) -> Result<CheckResult> {
    let mut rng = SplitMix64::new(seed);
    let (n, k, h) = (5, 3, 4);
    let net: NetVladParams<Tensor<f64>> = init_from_shapes(&NetVladParams::shapes(&NetVladConfig::new(n, k, h)?), &mut rng);
    let next_cfg = NeXtVladConfig::new(n, 1, 1, k, h)?;
    let mut next: NeXtVladParams<Tensor<f64>> = zeros_like_shapes(&NeXtVladParams::shapes(&next_cfg));
    for i in 0..n {
        next.encoder.expand_w.data_mut()[i * n + i] = 1.0;
    }
    next.encoder.attn_b = Tensor::full([1], 40.0);
    next.encoder.assign_w = net.encoder.assign_w.clone();
    next.encoder.assign_b = Tensor::randn([k], 0.5, &mut rng);
    let mut net = net;
    net.encoder.assign_b = next.encoder.assign_b.clone();
    next.encoder.centers = net.encoder.centers.clone();
    next.reduce = net.reduce.clone();
    let view = random_view::<f64>(3, 4, n, &mut rng);
    let err = nextvlad_forward(&view, &next)?.max_abs_diff(&netvlad_forward(&view, &net)?)?;
    Ok(CheckResult::new("reduction G=1 λ=1 equals netvlad", err < 1e-6, format!("max difference {err:.2e}")))
}

fn with_padding<T: Scalar>(view: &FrameBatchView<T>, extra: usize, rng: &mut SplitMix64) -> Result<FrameBatchView<T>> {
    let mut padded = view.repad(view.max_frames() + extra)?;
    let (b, m, n) = (padded.batch(), padded.max_frames(), padded.feature_dim());
    for r in 0..b {
        let l = padded.lengths[r];
        for v in &mut padded.frames.data_mut()[(r * m + l) * n..(r + 1) * m * n] {
            *v = T::lit(5.0 * rng.normal());
        }
    }
    Ok(padded)
}

/// Appending arbitrary padding frames leaves descriptors and logits
/// unchanged.
pub fn mask_invariance_suite(batches: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = SplitMix64::new(seed);
    let (mut worst_desc, mut worst_logits) = (0.0f64, 0.0f64);
    let mcfg = toy_model_config(Aggregation::NeXtVlad { expansion: 2, groups: 2 }, 3);
    let mut model = Model::<f64>::init(mcfg, None, seed)?;
    let layer_cfg = NeXtVladConfig::new(4, 2, 2, 3, 3)?;
    let layer: NeXtVladParams<Tensor<f64>> = init_from_shapes(&NeXtVladParams::shapes(&layer_cfg), &mut rng);
    let net_cfg = NetVladConfig::new(4, 3, 3)?;
    let net: NetVladParams<Tensor<f64>> = init_from_shapes(&NetVladParams::shapes(&net_cfg), &mut rng);
    for i in 0..batches {
        let extra = 1 + rng.below(10);
        let view = random_view::<f64>(1 + rng.below(4), 1 + rng.below(6), 4, &mut rng);
        let padded = with_padding(&view, extra, &mut rng)?;
        worst_desc = worst_desc.max(nextvlad_forward(&view, &layer)?.max_abs_diff(&nextvlad_forward(&padded, &layer)?)?);
        worst_desc = worst_desc.max(netvlad_forward(&view, &net)?.max_abs_diff(&netvlad_forward(&padded, &net)?)?);

        let batch = toy_batch::<f64>(&mcfg, 1 + rng.below(4), 1 + rng.below(6), seed ^ i as u64)?;
        let padded = Batch {
            visual: with_padding(&batch.visual, extra, &mut rng)?,
            audio: with_padding(&batch.audio, extra, &mut rng)?,
            labels: batch.labels.clone(),
        };
        let a = model_forward(&mut model, &batch, None)?;
        let b = model_forward(&mut model, &padded, None)?;
        worst_logits = worst_logits.max(a.max_abs_diff(&b)?);
    }
    Ok(vec![
        CheckResult::new("mask invariance descriptors", worst_desc < 1e-6, format!("{batches} batches, max change {worst_desc:.2e}")),
        CheckResult::new("mask invariance logits", worst_logits < 1e-6, format!("{batches} batches, max change {worst_logits:.2e}")),
    ])
}

/// GAP against the quadratic-time oracle on random prediction sets, plus
/// the perfect and total-miss anchors.
pub fn metric_suite(sets: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = SplitMix64::new(seed);
    let mut mismatches = 0;
    let mut checked = 0;
    while checked < sets {
        let classes = 2 + rng.below(10);
        let mut set = PredictionSet::new();
        for _ in 0..1 + rng.below(6) {
            let mut ids: Vec<usize> = (0..classes).collect();
            rng.shuffle(&mut ids);
            let k = 1 + rng.below(classes.min(20));
            let preds = ids[..k].iter().map(|&c| (c, rng.below(6) as f64 / 5.0)).collect();
            let labels: Vec<usize> = (0..classes).filter(|_| rng.uniform() < 0.3).collect();
            set.push(preds, labels)?;
        }
        if set.positives() == 0 {
            continue;
        }
        checked += 1;
        if gap_at_20(&set)? != gap_brute_force(&set)? {
            mismatches += 1;
        }
    }
    let mut perfect = PredictionSet::new();
    perfect.push(vec![(0, 0.9), (1, 0.1)], [0])?;
    perfect.push(vec![(2, 0.8), (3, 0.2)], [2])?;
    let mut miss = PredictionSet::new();
    miss.push((1..=20).map(|c| (c, 0.5)).collect(), [0])?;
    Ok(vec![
        CheckResult::new("gap matches brute-force oracle", mismatches == 0, format!("{mismatches} of {sets} sets differ")),
        CheckResult::new("gap perfect ranking", gap_at_20(&perfect)? == 1.0, "expected 1.0"),
        CheckResult::new("gap total miss", gap_at_20(&miss)? == 0.0, "expected 0.0"),
    ])
}

/// Closed forms against the allocated parameter census.
pub fn param_count_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let net = NetVladConfig::new(1024, 128, 2048)?;
    let formula = param_count_netvlad(&net);
    let census = Census::of(&zeros_like_shapes::<f32, _>(&NetVladParams::shapes(&net))).weights;
    out.push(CheckResult::new(
        "count netvlad 1024/128/2048",
        formula == 268_697_600 && census == formula,
        format!("formula {formula}, census {census}"),
    ));
    let next = NeXtVladConfig::new(1024, 2, 8, 128, 2048)?;
    let formula = param_count_nextvlad(&next)?;
    let census = Census::of(&zeros_like_shapes::<f32, _>(&NeXtVladParams::shapes(&next))).weights;
    out.push(CheckResult::new(
        "count nextvlad λ=2 G=8",
        formula == 71_352_320 && census == formula,
        format!("formula {formula}, census {census}"),
    ));
    let formula = se_param_count(2048, 8)?;
    let census = Census::of(&zeros_like_shapes::<f32, _>(&SecgParams::shapes(2048, 8))).weights;
    out.push(CheckResult::new(
        "count se gating F=2048 r=8",
        formula == 1_048_576 && census == formula,
        format!("formula {formula}, census {census}"),
    ));
    Ok(out)
}

/// Every suite with its default size.
pub fn run_all() -> Result<Vec<CheckResult>> {
    let mut out = gradient_suite()?;
    out.extend(oracle_suite(20, 1)?);
    out.push(reduction_check(2)?);
    out.extend(mask_invariance_suite(20, 3)?);
    out.extend(metric_suite(100, 4)?);
    out.extend(param_count_suite()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for r in run_all().unwrap() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
