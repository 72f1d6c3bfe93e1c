//! Learnable VLAD aggregation of frame-level features.
//!
//! Both layers soft-assign every valid frame to `K` clusters, accumulate the
//! assignment-weighted residuals to the cluster anchors over time,
//! L2-normalize each cluster's block (intra-normalization), flatten, and
//! project the flattened descriptor to `H` dimensions.
//!
//! NeXtVLAD first expands each `N`-dim frame to `λN` dims with a linear
//! layer and splits the result into `G` groups of `λN/G` dims. Each group is
//! encoded against a single shared table of `K` anchors, weighted by a
//! sigmoid group attention, and the residuals are summed over both time and
//! groups. The flattened descriptor therefore has `λN·K/G` entries instead of
//! NetVLAD's `N·K`.
//!
//! Descriptors are flattened cluster-major: entry `k·D + j` holds dimension
//! `j` of cluster `k`, where `D` is the per-cluster block size.

mod netvlad;
mod nextvlad;
mod reference;

pub use netvlad::{netvlad_descriptor, netvlad_forward, NetVladEncoder, NetVladParams};
pub use nextvlad::{nextvlad_descriptor, nextvlad_forward, NeXtVladEncoder, NeXtVladParams};
pub use reference::{
    netvlad_reference, netvlad_reference_descriptor, nextvlad_reference,
    nextvlad_reference_descriptor, REFERENCE_MAX_WORK,
};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Guard for intra-normalization of all-zero cluster blocks.
pub const INTRA_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetVladConfig {
    pub feature_dim: usize,
    pub clusters: usize,
    pub hidden: usize,
}

impl NetVladConfig {
    pub fn new(feature_dim: usize, clusters: usize, hidden: usize) -> Result<Self> {
        let cfg = Self {
            feature_dim,
            clusters,
            hidden,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.clusters == 0 || self.hidden == 0 {
            return Err(Error::invalid("netvlad", format!("all dimensions must be ≥ 1: {self:?}")));
        }
        Ok(())
    }

    pub fn descriptor_dim(&self) -> usize {
        self.feature_dim * self.clusters
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeXtVladConfig {
    pub feature_dim: usize,
    /// Width multiplier applied by the expansion layer.
    pub expansion: usize,
    pub groups: usize,
    pub clusters: usize,
    pub hidden: usize,
}

impl NeXtVladConfig {
    pub const DEFAULT_EXPANSION: usize = 2;

    pub fn new(feature_dim: usize, expansion: usize, groups: usize, clusters: usize, hidden: usize) -> Result<Self> {
        let cfg = Self {
            feature_dim,
            expansion,
            groups,
            clusters,
            hidden,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.feature_dim, self.expansion, self.groups, self.clusters, self.hidden].contains(&0) {
            return Err(Error::invalid("nextvlad", format!("all dimensions must be ≥ 1: {self:?}")));
        }
        if !self.expanded_dim().is_multiple_of(self.groups) {
            return Err(Error::invalid(
                "nextvlad",
                format!("expanded dim {} is not divisible by {} groups", self.expanded_dim(), self.groups),
            ));
        }
        Ok(())
    }

    /// `λN`
    pub fn expanded_dim(&self) -> usize {
        self.expansion * self.feature_dim
    }

    /// `λN / G`
    pub fn group_dim(&self) -> usize {
        self.expanded_dim() / self.groups
    }

    /// `λN·K / G`
    pub fn descriptor_dim(&self) -> usize {
        self.group_dim() * self.clusters
    }
}

/// `N·K·(H+2)`: assignment weights, anchors and the reduction layer,
/// without biases or batch norm.
pub fn param_count_netvlad(cfg: &NetVladConfig) -> u64 {
    let (n, k, h) = (cfg.feature_dim as u64, cfg.clusters as u64, cfg.hidden as u64);
    n * k * (h + 2)
}

/// `λN·(N + G + K·(G + (H+1)/G))` evaluated in exact integer arithmetic as
/// `λN·N + λN·G + λN·G·K + K·λN/G + (λN·K/G)·H`: expansion, group attention,
/// assignment, shared anchors and reduction, without biases or batch norm.
pub fn param_count_nextvlad(cfg: &NeXtVladConfig) -> Result<u64> {
    cfg.validate()?;
    let n = cfg.feature_dim as u64;
    let g = cfg.groups as u64;
    let k = cfg.clusters as u64;
    let h = cfg.hidden as u64;
    let ln = cfg.expansion as u64 * n;
    let gd = ln / g;
    Ok(ln * n + ln * g + ln * g * k + k * gd + gd * k * h)
}

/// A padded batch of frame sequences for one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBatchView<T> {
    /// `[B, M, N]`, zero beyond each sequence's length.
    pub frames: Tensor<T>,
    /// `[B, M]`, 1 for the first `lengths[b]` frames and 0 after.
    pub mask: Tensor<T>,
    pub lengths: Vec<usize>,
}

impl<T: Scalar> FrameBatchView<T> {
    /// Builds the mask from per-sequence lengths.
    pub fn new(frames: Tensor<T>, lengths: Vec<usize>) -> Result<Self> {
        if frames.rank() != 3 {
            return Err(Error::invalid("frame_batch", format!("frames must be [B, M, N], got {:?}", frames.shape())));
        }
        let (b, m) = (frames.shape()[0], frames.shape()[1]);
        if lengths.len() != b {
            return Err(Error::invalid("frame_batch", format!("{} lengths for batch of {b}", lengths.len())));
        }
        if let Some(l) = lengths.iter().find(|&&l| l > m) {
            return Err(Error::invalid("frame_batch", format!("length {l} exceeds padded extent {m}")));
        }
        let mut mask = Tensor::zeros([b, m]);
        for (r, &len) in lengths.iter().enumerate() {
            mask.data_mut()[r * m..r * m + len].fill(T::one());
        }
        Ok(Self { frames, mask, lengths })
    }

    pub fn batch(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn max_frames(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn cast<U: Scalar>(&self) -> FrameBatchView<U> {
        FrameBatchView {
            frames: self.frames.cast(),
            mask: self.mask.cast(),
            lengths: self.lengths.clone(),
        }
    }

    /// Re-pads to `m` frames. Frames past `m` are dropped and lengths clipped.
    pub fn repad(&self, m: usize) -> Result<Self> {
        let (b, old, n) = (self.batch(), self.max_frames(), self.feature_dim());
        let mut frames = Tensor::zeros([b, m, n]);
        let keep = old.min(m);
        for r in 0..b {
            let src = &self.frames.data()[r * old * n..r * old * n + keep * n];
            frames.data_mut()[r * m * n..r * m * n + keep * n].copy_from_slice(src);
        }
        let lengths = self.lengths.iter().map(|&l| l.min(m)).collect();
        Self::new(frames, lengths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn netvlad_count_headline_config() {
        let cfg = NetVladConfig::new(1024, 128, 2048).unwrap();
        assert_eq!(param_count_netvlad(&cfg), 268_697_600);
        assert_eq!(param_count_netvlad(&NetVladConfig::new(1, 1, 1).unwrap()), 3);
    }

    #[test]
    fn nextvlad_count_headline_config() {
        let cfg = NeXtVladConfig::new(1024, 2, 8, 128, 2048).unwrap();
        assert_eq!(param_count_nextvlad(&cfg).unwrap(), 71_352_320);
        assert_eq!(param_count_nextvlad(&NeXtVladConfig::new(1, 1, 1, 1, 1).unwrap()).unwrap(), 5);
        let ratio = 268_697_600.0_f64 / 71_352_320.0;
        assert!((ratio - 3.77).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn nextvlad_count_matches_factored_form() {
        // λN·(N + G + K·(G + (H+1)/G)) with the division carried out over
        // rationals: multiply through by G.
        for (n, l, g, k, h) in [(1024u64, 2u64, 8u64, 128u64, 2048u64), (6, 2, 4, 3, 5), (9, 1, 3, 2, 7)] {
            let cfg = NeXtVladConfig::new(n as usize, l as usize, g as usize, k as usize, h as usize).unwrap();
            let ln = l * n;
            let times_g = ln * (n * g + g * g + k * (g * g + h + 1));
            assert_eq!(param_count_nextvlad(&cfg).unwrap() * g, times_g);
        }
    }

    #[test]
    fn nextvlad_rejects_indivisible_groups() {
        assert!(NeXtVladConfig::new(3, 1, 2, 4, 4).is_err());
        let bad = NeXtVladConfig {
            feature_dim: 3,
            expansion: 1,
            groups: 2,
            clusters: 1,
            hidden: 1,
        };
        assert!(param_count_nextvlad(&bad).is_err());
    }

    #[test]
    fn mask_follows_lengths() {
        let v = FrameBatchView::<f32>::new(Tensor::zeros([2, 5, 1]), vec![3, 5]).unwrap();
        assert_eq!(&v.mask.data()[..5], &[1., 1., 1., 0., 0.]);
        assert_eq!(&v.mask.data()[5..], &[1.; 5]);
        assert!(FrameBatchView::<f32>::new(Tensor::zeros([1, 2, 1]), vec![3]).is_err());
    }
}
