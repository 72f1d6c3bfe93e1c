//! Seeded multi-label data with planted per-class concept vectors.
//!
//! Each class owns one unit-norm concept vector per stream, drawn
//! independently for the visual and audio streams. A video samples a label
//! set and a length; every frame is the mean of its labels' concepts plus
//! i.i.d. Gaussian noise of standard deviation `noise_sigma`.

use super::{Dataset, VideoRecord};
use crate::error::{Error, Result};
use crate::rng::{stream, SplitMix64};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub num_classes: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_videos: 2000,
            num_classes: 20,
            visual_dim: 64,
            audio_dim: 16,
            min_frames: 8,
            max_frames: 20,
            min_labels: 1,
            max_labels: 3,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// A few short, low-dimensional videos for tests.
    pub fn small(num_videos: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            num_videos,
            num_classes,
            visual_dim: 4,
            audio_dim: 2,
            min_frames: 1,
            max_frames: 4,
            min_labels: 1,
            max_labels: 2.min(num_classes),
            noise_sigma: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.num_classes == 0 || self.visual_dim == 0 || self.audio_dim == 0 {
            return bad("classes and feature dimensions must be ≥ 1".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!("frame range [{}, {}] is invalid", self.min_frames, self.max_frames));
        }
        if self.min_labels == 0 || self.min_labels > self.max_labels {
            return bad(format!("label range [{}, {}] is invalid", self.min_labels, self.max_labels));
        }
        if self.max_labels > self.num_classes {
            return bad(format!("{} labels per video exceeds {} classes", self.max_labels, self.num_classes));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise sigma {} must be finite and ≥ 0", self.noise_sigma));
        }
        Ok(())
    }
}

fn concepts(rng: &mut SplitMix64, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn frames(rng: &mut SplitMix64, m: usize, labels: &[u32], concepts: &[Vec<f64>], sigma: f64) -> Vec<f32> {
    let dim = concepts[0].len();
    let inv = 1.0 / labels.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|j| labels.iter().map(|&l| concepts[l as usize][j]).sum::<f64>() * inv)
        .collect();
    let mut out = Vec::with_capacity(m * dim);
    for _ in 0..m {
        for &mu in &mean {
            let noise = if sigma > 0.0 { sigma * rng.normal() } else { 0.0 };
            out.push((mu + noise) as f32);
        }
    }
    out
}

/// Generates a dataset that is a pure function of `spec`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = SplitMix64::derive(spec.seed, stream::SYNTH, 0);
    let visual_concepts = concepts(&mut rng, spec.num_classes, spec.visual_dim);
    let audio_concepts = concepts(&mut rng, spec.num_classes, spec.audio_dim);
    let mut d = Dataset::new(spec.visual_dim, spec.audio_dim, spec.num_classes);
    let mut classes: Vec<u32> = (0..spec.num_classes as u32).collect();
    for i in 0..spec.num_videos {
        let m = spec.min_frames + rng.below(spec.max_frames - spec.min_frames + 1);
        let nl = spec.min_labels + rng.below(spec.max_labels - spec.min_labels + 1);
        rng.shuffle(&mut classes);
        let mut labels = classes[..nl].to_vec();
        labels.sort_unstable();
        let visual = frames(&mut rng, m, &labels, &visual_concepts, spec.noise_sigma);
        let audio = frames(&mut rng, m, &labels, &audio_concepts, spec.noise_sigma);
        d.records.push(VideoRecord {
            id: format!("vid{i:06}"),
            labels,
            visual,
            audio,
        });
    }
    Ok(d)
}
