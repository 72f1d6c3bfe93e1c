//! Direct nested-loop evaluations of both layers, used as test oracles.

use super::{FrameBatchView, NeXtVladParams, NetVladParams, INTRA_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest `M·G·K·D` (per video) the references accept.
pub const REFERENCE_MAX_WORK: usize = 100_000;

fn check_work(op: &'static str, work: usize) -> Result<()> {
    if work > REFERENCE_MAX_WORK {
        return Err(Error::invalid(op, format!("work {work} exceeds reference bound {REFERENCE_MAX_WORK}")));
    }
    Ok(())
}

fn at2(t: &Tensor<f64>, r: usize, c: usize) -> f64 {
    t.data()[r * t.shape()[1] + c]
}

fn frame(view: &FrameBatchView<f64>, b: usize, i: usize) -> &[f64] {
    let (m, n) = (view.max_frames(), view.feature_dim());
    &view.frames.data()[(b * m + i) * n..(b * m + i + 1) * n]
}

fn softmax(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

fn intra_normalize(desc: &mut [f64], block: usize) {
    for chunk in desc.chunks_mut(block) {
        let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt().max(INTRA_NORM_EPS);
        chunk.iter_mut().for_each(|v| *v /= norm);
    }
}

fn reduce(desc: &[Vec<f64>], w: &Tensor<f64>, bias: &Tensor<f64>) -> Result<Tensor<f64>> {
    let h = w.shape()[1];
    let mut out = Vec::with_capacity(desc.len() * h);
    for d in desc {
        for o in 0..h {
            let mut s = bias.data()[o];
            for (r, v) in d.iter().enumerate() {
                s += v * at2(w, r, o);
            }
            out.push(s);
        }
    }
    Tensor::new([desc.len(), h], out)
}

/// Per-video NetVLAD descriptors before the reduction layer.
pub fn netvlad_reference_descriptor(view: &FrameBatchView<f64>, p: &NetVladParams<Tensor<f64>>) -> Result<Vec<Vec<f64>>> {
    let n = view.feature_dim();
    let k = p.encoder.centers.shape()[0];
    check_work("netvlad_reference", view.max_frames() * k * n)?;
    let mut all = Vec::with_capacity(view.batch());
    for b in 0..view.batch() {
        let mut v = vec![0.0; k * n];
        for i in 0..view.lengths[b] {
            let x = frame(view, b, i);
            let mut a: Vec<f64> = (0..k)
                .map(|kk| p.encoder.assign_b.data()[kk] + (0..n).map(|j| x[j] * at2(&p.encoder.assign_w, j, kk)).sum::<f64>())
                .collect();
            softmax(&mut a);
            for kk in 0..k {
                for j in 0..n {
                    v[kk * n + j] += a[kk] * (x[j] - at2(&p.encoder.centers, kk, j));
                }
            }
        }
        intra_normalize(&mut v, n);
        all.push(v);
    }
    Ok(all)
}

pub fn netvlad_reference(view: &FrameBatchView<f64>, p: &NetVladParams<Tensor<f64>>) -> Result<Tensor<f64>> {
    let desc = netvlad_reference_descriptor(view, p)?;
    reduce(&desc, &p.reduce.w, &p.reduce.b)
}

/// Per-video NeXtVLAD descriptors before the reduction layer.
pub fn nextvlad_reference_descriptor(
    view: &FrameBatchView<f64>,
    p: &NeXtVladParams<Tensor<f64>>,
) -> Result<Vec<Vec<f64>>> {
    let e = &p.encoder;
    let n = view.feature_dim();
    let ln = e.expand_w.shape()[1];
    let g = e.attn_w.shape()[1];
    let (k, gd) = (e.centers.shape()[0], e.centers.shape()[1]);
    check_work("nextvlad_reference", view.max_frames() * g * k * gd)?;
    let mut all = Vec::with_capacity(view.batch());
    for b in 0..view.batch() {
        let mut v = vec![0.0; k * gd];
        for i in 0..view.lengths[b] {
            let x = frame(view, b, i);
            let xd: Vec<f64> = (0..ln)
                .map(|c| e.expand_b.data()[c] + (0..n).map(|j| x[j] * at2(&e.expand_w, j, c)).sum::<f64>())
                .collect();
            for gg in 0..g {
                let z = e.attn_b.data()[gg] + (0..ln).map(|c| xd[c] * at2(&e.attn_w, c, gg)).sum::<f64>();
                let attn = 1.0 / (1.0 + (-z).exp());
                let mut a: Vec<f64> = (0..k)
                    .map(|kk| {
                        let col = gg * k + kk;
                        e.assign_b.data()[col] + (0..ln).map(|c| xd[c] * at2(&e.assign_w, c, col)).sum::<f64>()
                    })
                    .collect();
                softmax(&mut a);
                for kk in 0..k {
                    for j in 0..gd {
                        v[kk * gd + j] += attn * a[kk] * (xd[gg * gd + j] - at2(&e.centers, kk, j));
                    }
                }
            }
        }
        intra_normalize(&mut v, gd);
        all.push(v);
    }
    Ok(all)
}

pub fn nextvlad_reference(view: &FrameBatchView<f64>, p: &NeXtVladParams<Tensor<f64>>) -> Result<Tensor<f64>> {
    let desc = nextvlad_reference_descriptor(view, p)?;
    reduce(&desc, &p.reduce.w, &p.reduce.b)
}
