//! The two-stream video classifier and its three-expert mixture.
//!
//! ```text
//! video frames ─ reverse whitening ─ VLAD ─┐
//!                                          ├─ concat ─ dropout ─ reduce ─ BN ─ SE gating ─ classifier ─ logits
//! audio frames ──────────────────────────── VLAD ─┘
//! ```
//!
//! The mixture runs three such models side by side and mixes their logits
//! with a softmax gate computed from the masked frame means of the raw
//! input features.

mod forward;

pub use forward::{
    masked_mean, mixture_forward, model_forward, network_forward_var, reverse_whitening, se_context_gating,
    se_context_gating_var, NetworkOutput,
};

use crate::data::Eigenvalues;
use crate::error::{Error, Result};
use crate::params::{init_from_shapes, param_tree, BatchNormParams, BnStats, Census, Linear, ParamTree};
use crate::rng::{stream, SplitMix64};
use crate::tensor::{Scalar, Tensor};
use crate::vlad::{
    param_count_netvlad, param_count_nextvlad, NeXtVladConfig, NeXtVladEncoder, NetVladConfig, NetVladEncoder,
};

pub const MIXTURE_EXPERTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    NetVlad,
    NeXtVlad { expansion: usize, groups: usize },
}

impl Aggregation {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregation::NetVlad => "netvlad",
            Aggregation::NeXtVlad { .. } => "nextvlad",
        }
    }
}

/// Aggregation settings of one stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamConfig {
    NetVlad(NetVladConfig),
    NeXtVlad(NeXtVladConfig),
}

impl StreamConfig {
    pub fn descriptor_dim(&self) -> usize {
        match self {
            StreamConfig::NetVlad(c) => c.descriptor_dim(),
            StreamConfig::NeXtVlad(c) => c.descriptor_dim(),
        }
    }

    /// Closed-form weight count including this stream's share of the reduction.
    pub fn param_count(&self) -> Result<u64> {
        match self {
            StreamConfig::NetVlad(c) => Ok(param_count_netvlad(c)),
            StreamConfig::NeXtVlad(c) => param_count_nextvlad(c),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub video_dim: usize,
    pub audio_dim: usize,
    pub aggregation: Aggregation,
    pub clusters: usize,
    pub hidden: usize,
    pub se_ratio: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub reverse_whitening: bool,
    /// 1 for a single model, 3 for the distillation mixture.
    pub experts: usize,
}

impl ModelConfig {
    /// The published large-scale setting.
    pub fn published() -> Self {
        Self {
            video_dim: 1024,
            audio_dim: 128,
            aggregation: Aggregation::NeXtVlad { expansion: 2, groups: 8 },
            clusters: 128,
            hidden: 2048,
            se_ratio: 8,
            num_classes: 3862,
            dropout_rate: 0.5,
            reverse_whitening: true,
            experts: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.num_classes == 0 || self.hidden == 0 || self.video_dim == 0 || self.audio_dim == 0 {
            return bad("dimensions and class count must be ≥ 1".into());
        }
        if self.se_ratio == 0 || !self.hidden.is_multiple_of(self.se_ratio) {
            return bad(format!("se ratio {} must divide hidden size {}", self.se_ratio, self.hidden));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} not in [0, 1)", self.dropout_rate));
        }
        if self.experts != 1 && self.experts != MIXTURE_EXPERTS {
            return bad(format!("experts must be 1 or {MIXTURE_EXPERTS}, got {}", self.experts));
        }
        self.stream(self.video_dim)?;
        self.stream(self.audio_dim)?;
        Ok(())
    }

    fn stream(&self, dim: usize) -> Result<StreamConfig> {
        Ok(match self.aggregation {
            Aggregation::NetVlad => StreamConfig::NetVlad(NetVladConfig::new(dim, self.clusters, self.hidden)?),
            Aggregation::NeXtVlad { expansion, groups } => {
                StreamConfig::NeXtVlad(NeXtVladConfig::new(dim, expansion, groups, self.clusters, self.hidden)?)
            }
        })
    }

    pub fn video_stream(&self) -> Result<StreamConfig> {
        self.stream(self.video_dim)
    }

    pub fn audio_stream(&self) -> Result<StreamConfig> {
        self.stream(self.audio_dim)
    }

    pub fn is_mixture(&self) -> bool {
        self.experts == MIXTURE_EXPERTS
    }
}

/// `2F²/r`: weights of the two gating layers, without batch norm.
pub fn se_param_count(features: usize, ratio: usize) -> Result<u64> {
    if ratio == 0 || !features.is_multiple_of(ratio) {
        return Err(Error::invalid("se_context_gating", format!("ratio {ratio} must divide {features}")));
    }
    let f = features as u64;
    Ok(2 * f * f / ratio as u64)
}

/// Closed-form weight counts of a full configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelCount {
    /// Video encoder plus its rows of the reduction layer.
    pub video: u64,
    pub audio: u64,
    pub se: u64,
    pub classifier: u64,
    /// Mixture gate (zero for a single model).
    pub gate: u64,
    /// Expert copies of everything above except the gate.
    pub experts: u64,
}

impl ModelCount {
    pub fn of(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let gate = if cfg.is_mixture() {
            ((cfg.video_dim + cfg.audio_dim) * MIXTURE_EXPERTS) as u64
        } else {
            0
        };
        Ok(Self {
            video: cfg.video_stream()?.param_count()?,
            audio: cfg.audio_stream()?.param_count()?,
            se: se_param_count(cfg.hidden, cfg.se_ratio)?,
            classifier: (cfg.hidden * cfg.num_classes) as u64,
            gate,
            experts: cfg.experts as u64,
        })
    }

    pub fn per_expert(&self) -> u64 {
        self.video + self.audio + self.se + self.classifier
    }

    pub fn total(&self) -> u64 {
        self.experts * self.per_expert() + self.gate
    }
}

/// A stream encoder of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoder<P> {
    NetVlad(NetVladEncoder<P>),
    NeXtVlad(NeXtVladEncoder<P>),
}

impl<P> ParamTree<P> for Encoder<P> {
    type Mapped<Q> = Encoder<Q>;

    fn map_leaves<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Encoder<Q> {
        match self {
            Encoder::NetVlad(e) => Encoder::NetVlad(e.map_leaves(prefix, f)),
            Encoder::NeXtVlad(e) => Encoder::NeXtVlad(e.map_leaves(prefix, f)),
        }
    }

    fn visit_leaves_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        match self {
            Encoder::NetVlad(e) => e.visit_leaves_mut(prefix, f),
            Encoder::NeXtVlad(e) => e.visit_leaves_mut(prefix, f),
        }
    }
}

impl Encoder<Vec<usize>> {
    pub fn shapes(cfg: &StreamConfig) -> Self {
        match cfg {
            StreamConfig::NetVlad(c) => Encoder::NetVlad(NetVladEncoder::shapes(c.feature_dim, c.clusters)),
            StreamConfig::NeXtVlad(c) => Encoder::NeXtVlad(NeXtVladEncoder::shapes(c)),
        }
    }
}

/// Squeeze-and-excitation context gating: two bias-free linear layers,
/// each followed by batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct SecgParams<P> {
    /// `[F, F/r]`
    pub fc1_w: P,
    pub bn1: BatchNormParams<P>,
    /// `[F/r, F]`
    pub fc2_w: P,
    pub bn2: BatchNormParams<P>,
}

param_tree!(SecgParams { leaf fc1_w, node bn1, leaf fc2_w, node bn2 });

impl SecgParams<Vec<usize>> {
    pub fn shapes(features: usize, ratio: usize) -> Self {
        let bottleneck = features / ratio;
        Self {
            fc1_w: vec![features, bottleneck],
            bn1: BatchNormParams::shape(bottleneck),
            fc2_w: vec![bottleneck, features],
            bn2: BatchNormParams::shape(features),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SecgStats<P> {
    pub bn1: BnStats<P>,
    pub bn2: BnStats<P>,
}

param_tree!(SecgStats { node bn1, node bn2 });

impl SecgStats<Vec<usize>> {
    pub fn shapes(features: usize, ratio: usize) -> Self {
        Self {
            bn1: BnStats::shape(features / ratio),
            bn2: BnStats::shape(features),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub video: Encoder<P>,
    pub audio: Encoder<P>,
    /// `[D_v + D_a, H]`, shared by both streams.
    pub reduce: Linear<P>,
    pub reduce_bn: BatchNormParams<P>,
    pub secg: SecgParams<P>,
    /// `[H, C]`
    pub classifier: Linear<P>,
}

param_tree!(ModelParams {
    node video,
    node audio,
    node reduce,
    node reduce_bn,
    node secg,
    node classifier,
});

impl ModelParams<Vec<usize>> {
    pub fn shapes(cfg: &ModelConfig) -> Result<Self> {
        let (v, a) = (cfg.video_stream()?, cfg.audio_stream()?);
        Ok(Self {
            video: Encoder::shapes(&v),
            audio: Encoder::shapes(&a),
            reduce: Linear::shape(v.descriptor_dim() + a.descriptor_dim(), cfg.hidden),
            reduce_bn: BatchNormParams::shape(cfg.hidden),
            secg: SecgParams::shapes(cfg.hidden, cfg.se_ratio),
            classifier: Linear::shape(cfg.hidden, cfg.num_classes),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelStats<P> {
    pub reduce_bn: BnStats<P>,
    pub secg: SecgStats<P>,
}

param_tree!(ModelStats { node reduce_bn, node secg });

impl ModelStats<Vec<usize>> {
    pub fn shapes(cfg: &ModelConfig) -> Self {
        Self {
            reduce_bn: BnStats::shape(cfg.hidden),
            secg: SecgStats::shapes(cfg.hidden, cfg.se_ratio),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams<P> {
    pub expert0: ModelParams<P>,
    pub expert1: ModelParams<P>,
    pub expert2: ModelParams<P>,
    /// `[N_v + N_a, 3]`
    pub gate: Linear<P>,
}

param_tree!(MixtureParams { node expert0, node expert1, node expert2, node gate });

impl<P> MixtureParams<P> {
    pub fn experts(&self) -> [&ModelParams<P>; MIXTURE_EXPERTS] {
        [&self.expert0, &self.expert1, &self.expert2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureStats<P> {
    pub expert0: ModelStats<P>,
    pub expert1: ModelStats<P>,
    pub expert2: ModelStats<P>,
}

param_tree!(MixtureStats { node expert0, node expert1, node expert2 });

impl<P> MixtureStats<P> {
    pub fn experts_mut(&mut self) -> [&mut ModelStats<P>; MIXTURE_EXPERTS] {
        [&mut self.expert0, &mut self.expert1, &mut self.expert2]
    }
}

/// Parameters of either a single model or a mixture.
#[derive(Clone, Debug, PartialEq)]
pub enum NetworkParams<P> {
    Single(ModelParams<P>),
    Mixture(MixtureParams<P>),
}

/// Batch-norm running moments matching [`NetworkParams`].
#[derive(Clone, Debug, PartialEq)]
pub enum NetworkStats<P> {
    Single(ModelStats<P>),
    Mixture(MixtureStats<P>),
}

macro_rules! enum_tree {
    ($ty:ident) => {
        impl<P> ParamTree<P> for $ty<P> {
            type Mapped<Q> = $ty<Q>;

            fn map_leaves<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> $ty<Q> {
                match self {
                    $ty::Single(x) => $ty::Single(x.map_leaves(prefix, f)),
                    $ty::Mixture(x) => $ty::Mixture(x.map_leaves(prefix, f)),
                }
            }

            fn visit_leaves_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
                match self {
                    $ty::Single(x) => x.visit_leaves_mut(prefix, f),
                    $ty::Mixture(x) => x.visit_leaves_mut(prefix, f),
                }
            }
        }
    };
}

enum_tree!(NetworkParams);

impl<P> NetworkParams<P> {
    /// Classifier weight matrices of every expert.
    pub fn classifier_weights(&self) -> Vec<&P> {
        match self {
            NetworkParams::Single(p) => vec![&p.classifier.w],
            NetworkParams::Mixture(m) => m.experts().iter().map(|e| &e.classifier.w).collect(),
        }
    }
}
enum_tree!(NetworkStats);

impl NetworkParams<Vec<usize>> {
    pub fn shapes(cfg: &ModelConfig) -> Result<Self> {
        let one = ModelParams::shapes(cfg)?;
        Ok(if cfg.is_mixture() {
            NetworkParams::Mixture(MixtureParams {
                expert0: one.clone(),
                expert1: one.clone(),
                expert2: one,
                gate: Linear::shape(cfg.video_dim + cfg.audio_dim, MIXTURE_EXPERTS),
            })
        } else {
            NetworkParams::Single(one)
        })
    }
}

impl NetworkStats<Vec<usize>> {
    pub fn shapes(cfg: &ModelConfig) -> Self {
        let one = ModelStats::shapes(cfg);
        if cfg.is_mixture() {
            NetworkStats::Mixture(MixtureStats {
                expert0: one.clone(),
                expert1: one.clone(),
                expert2: one,
            })
        } else {
            NetworkStats::Single(one)
        }
    }
}

/// A network with its configuration, running statistics and optional
/// eigenvalues for reverse whitening.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: NetworkParams<Tensor<T>>,
    pub stats: NetworkStats<Tensor<T>>,
    pub eigenvalues: Option<Eigenvalues>,
}

impl<T: Scalar> Model<T> {
    /// Initializes parameters from `derive(seed, INIT, 0)`.
    pub fn init(config: ModelConfig, eigenvalues: Option<Eigenvalues>, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.reverse_whitening {
            match &eigenvalues {
                None => return Err(Error::Config("reverse whitening is enabled but no eigenvalues were given".into())),
                Some(e) if e.len() != config.video_dim => {
                    return Err(Error::Config(format!(
                        "{} eigenvalues for video dimension {}",
                        e.len(),
                        config.video_dim
                    )))
                }
                _ => {}
            }
        }
        let mut rng = SplitMix64::derive(seed, stream::INIT, 0);
        let params = init_from_shapes(&NetworkParams::shapes(&config)?, &mut rng);
        let stats = init_from_shapes(&NetworkStats::shapes(&config), &mut rng);
        Ok(Self {
            config,
            params,
            stats,
            eigenvalues,
        })
    }

    pub fn census(&self) -> Census {
        Census::of(&self.params)
    }

    /// Eigenvalues to apply, or `None` when reverse whitening is off.
    pub fn whitening(&self) -> Option<&Eigenvalues> {
        self.eigenvalues.as_ref().filter(|_| self.config.reverse_whitening)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(super) fn toy(aggregation: Aggregation, experts: usize) -> ModelConfig {
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

    #[test]
    fn se_count_headline() {
        assert_eq!(se_param_count(2048, 8).unwrap(), 1_048_576);
        let p: SecgParams<Tensor<f32>> = crate::params::zeros_like_shapes(&SecgParams::shapes(2048, 8));
        assert_eq!(Census::of(&p).weights, 1_048_576);
        assert!(se_param_count(10, 3).is_err());
    }

    #[test]
    fn census_matches_closed_forms() {
        for agg in [Aggregation::NetVlad, Aggregation::NeXtVlad { expansion: 2, groups: 2 }] {
            for experts in [1, 3] {
                let cfg = toy(agg, experts);
                let m = Model::<f64>::init(cfg, None, 1).unwrap();
                let count = ModelCount::of(&cfg).unwrap();
                assert_eq!(m.census().weights, count.total(), "{agg:?} × {experts}");
            }
        }
    }

    #[test]
    fn parameter_names_are_unique_and_prefixed() {
        let m = Model::<f32>::init(toy(Aggregation::NeXtVlad { expansion: 2, groups: 2 }, 3), None, 0).unwrap();
        let names = m.params.leaf_names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"expert1.video.centers".to_string()));
        assert!(names.contains(&"gate.w".to_string()));
        assert!(m.stats.leaf_names().contains(&"expert2.secg.bn1.var".to_string()));
    }

    #[test]
    fn experts_start_different() {
        let m = Model::<f64>::init(toy(Aggregation::NetVlad, 3), None, 4).unwrap();
        let NetworkParams::Mixture(p) = &m.params else { panic!() };
        assert_ne!(p.expert0.classifier.w, p.expert1.classifier.w);
    }

    #[test]
    fn config_validation() {
        let mut cfg = toy(Aggregation::NetVlad, 1);
        cfg.se_ratio = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = toy(Aggregation::NetVlad, 2);
        assert!(cfg.validate().is_err());
        cfg.experts = 1;
        cfg.reverse_whitening = true;
        assert!(Model::<f32>::init(cfg, None, 0).is_err());
        assert!(Model::<f32>::init(cfg, Some(Eigenvalues::ones(3)), 0).is_err());
        assert!(Model::<f32>::init(cfg, Some(Eigenvalues::ones(4)), 0).is_ok());
        assert!(ModelConfig::published().validate().is_ok());
    }

    #[test]
    fn published_config_counts() {
        let c = ModelCount::of(&ModelConfig::published()).unwrap();
        let video = NeXtVladConfig::new(1024, 2, 8, 128, 2048).unwrap();
        assert_eq!(c.video, param_count_nextvlad(&video).unwrap());
        assert_eq!(c.video, 71_352_320);
        assert_eq!(c.se, 1_048_576);
    }
}
