//! Named parameter trees.
//!
//! Every parameter bundle is generic over its leaf type `P`: the same
//! struct holds weights (`P = Tensor<T>`), tape handles (`P = Var`),
//! shapes (`P = Vec<usize>`), gradients or optimizer moments. Leaves are
//! visited in declaration order under dotted names such as
//! `video.assign_w` or `expert2.secg.fc1.w`.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{ops, BatchNorm, BatchNormMode, Scalar, Tape, Tensor, Var};

pub trait ParamTree<P> {
    type Mapped<Q>;

    fn map_leaves<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q>;

    fn visit_leaves_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P));

    fn visit_leaves(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        self.map_leaves(prefix, &mut |name, p| f(name, p));
    }

    fn leaf_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_leaves("", &mut |name, _| names.push(name.to_string()));
        names
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements [`ParamTree`] for a struct whose fields are either leaves
/// (`leaf`) or nested trees (`node`).
macro_rules! param_tree {
    ($ty:ident { $($kind:ident $field:ident),* $(,)? }) => {
        impl<P> $crate::params::ParamTree<P> for $ty<P> {
            type Mapped<Q> = $ty<Q>;

            fn map_leaves<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> $ty<Q> {
                $ty { $($field: param_tree!(@map $kind, self, $field, prefix, f)),* }
            }

            fn visit_leaves_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
                $(param_tree!(@visit $kind, self, $field, prefix, f);)*
            }
        }
    };
    (@map leaf, $s:ident, $field:ident, $prefix:ident, $f:ident) => {
        $f(&$crate::params::join($prefix, stringify!($field)), &$s.$field)
    };
    (@map node, $s:ident, $field:ident, $prefix:ident, $f:ident) => {
        $s.$field.map_leaves(&$crate::params::join($prefix, stringify!($field)), $f)
    };
    (@visit leaf, $s:ident, $field:ident, $prefix:ident, $f:ident) => {
        $f(&$crate::params::join($prefix, stringify!($field)), &mut $s.$field)
    };
    (@visit node, $s:ident, $field:ident, $prefix:ident, $f:ident) => {
        $s.$field.visit_leaves_mut(&$crate::params::join($prefix, stringify!($field)), $f)
    };
}
pub(crate) use param_tree;

/// What a leaf is, judged from its name. Closed-form parameter counts
/// include only [`ParamKind::Weight`] leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    /// Cluster anchors; counted with the weights.
    Anchor,
    Bias,
    Norm,
}

impl ParamKind {
    pub fn of(name: &str) -> Self {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        match leaf {
            "gamma" | "beta" | "mean" | "var" => ParamKind::Norm,
            "centers" => ParamKind::Anchor,
            "b" => ParamKind::Bias,
            l if l.ends_with("_b") => ParamKind::Bias,
            _ => ParamKind::Weight,
        }
    }

    pub fn counted(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Anchor)
    }
}

/// Element counts of an allocated tree, split the way the closed-form
/// counts are stated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Census {
    /// Weights and anchors.
    pub weights: u64,
    pub biases: u64,
    pub norm: u64,
}

impl Census {
    pub fn of<T: Scalar, X: ParamTree<Tensor<T>>>(tree: &X) -> Self {
        let mut c = Census::default();
        tree.visit_leaves("", &mut |name, t| {
            let n = t.len() as u64;
            match ParamKind::of(name) {
                ParamKind::Weight | ParamKind::Anchor => c.weights += n,
                ParamKind::Bias => c.biases += n,
                ParamKind::Norm => c.norm += n,
            }
        });
        c
    }

    pub fn total(&self) -> u64 {
        self.weights + self.biases + self.norm
    }
}

/// Allocates a zero tensor for every shape leaf.
pub fn zeros_like_shapes<T: Scalar, X: ParamTree<Vec<usize>>>(shapes: &X) -> X::Mapped<Tensor<T>> {
    shapes.map_leaves("", &mut |_, s| Tensor::zeros(s.clone()))
}

/// Initializes a tree from its shapes, visiting leaves in order:
/// weights `N(0, 2/fan_in)` with `fan_in = shape[0]`, anchors
/// `N(0, 1/shape[1])`, biases and `beta` zero, `gamma` one.
pub fn init_from_shapes<T: Scalar, X: ParamTree<Vec<usize>>>(
    shapes: &X,
    rng: &mut SplitMix64,
) -> X::Mapped<Tensor<T>> {
    shapes.map_leaves("", &mut |name, s| {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        match ParamKind::of(name) {
            ParamKind::Weight => Tensor::randn(s.clone(), (2.0 / s[0] as f64).sqrt(), rng),
            ParamKind::Anchor => Tensor::randn(s.clone(), (1.0 / s[1] as f64).sqrt(), rng),
            ParamKind::Norm if leaf == "gamma" || leaf == "var" => Tensor::ones(s.clone()),
            _ => Tensor::zeros(s.clone()),
        }
    })
}

/// Registers every tensor of a tree as a tape leaf.
pub fn bind<T: Scalar, X: ParamTree<Tensor<T>>>(tape: &mut Tape<T>, tree: &X) -> X::Mapped<Var> {
    tree.map_leaves("", &mut |_, t| tape.leaf(t.clone()))
}

/// Registers every tensor of a tree as a tape constant.
pub fn bind_constant<T: Scalar, X: ParamTree<Tensor<T>>>(tape: &mut Tape<T>, tree: &X) -> X::Mapped<Var> {
    tree.map_leaves("", &mut |_, t| tape.constant(t.clone()))
}

/// Flattens a tree into `(name, tensor)` pairs.
pub fn named_tensors<T: Scalar, X: ParamTree<Tensor<T>>>(tree: &X) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    tree.visit_leaves("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

/// Overwrites every leaf from `lookup`, failing on the first missing or
/// mis-shaped entry.
pub fn fill_from<T: Scalar, X: ParamTree<Tensor<T>>>(
    tree: &mut X,
    prefix: &str,
    mut lookup: impl FnMut(&str) -> Option<Tensor<T>>,
) -> Result<()> {
    let mut err = None;
    tree.visit_leaves_mut(prefix, &mut |name, t| {
        if err.is_some() {
            return;
        }
        match lookup(name) {
            Some(v) if v.shape() == t.shape() => *t = v,
            Some(v) => {
                err = Some(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    v.shape(),
                    t.shape()
                )))
            }
            None => err = Some(Error::Format(format!("missing tensor `{name}`"))),
        }
    });
    err.map_or(Ok(()), Err)
}

/// Affine layer `x · w + b` with `w: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub w: P,
    pub b: P,
}

param_tree!(Linear { leaf w, leaf b });

impl Linear<Vec<usize>> {
    pub fn shape(input: usize, output: usize) -> Self {
        Self {
            w: vec![input, output],
            b: vec![output],
        }
    }
}

impl Linear<Var> {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.affine(x, self.w, self.b)
    }
}

/// Learnable scale and shift of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<P> {
    pub gamma: P,
    pub beta: P,
}

param_tree!(BatchNormParams { leaf gamma, leaf beta });

impl BatchNormParams<Vec<usize>> {
    pub fn shape(features: usize) -> Self {
        Self {
            gamma: vec![features],
            beta: vec![features],
        }
    }
}

/// Running moments of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<P> {
    pub mean: P,
    pub var: P,
}

param_tree!(BnStats { leaf mean, leaf var });

pub const BN_MOMENTUM: f64 = 0.99;

impl BnStats<Vec<usize>> {
    pub fn shape(features: usize) -> Self {
        Self {
            mean: vec![features],
            var: vec![features],
        }
    }
}

impl<T: Scalar> BnStats<Tensor<T>> {
    /// Running mean 0, running variance 1.
    pub fn new(features: usize) -> Self {
        Self {
            mean: Tensor::zeros([features]),
            var: Tensor::ones([features]),
        }
    }

    /// `running ← momentum · running + (1 − momentum) · batch`.
    fn update(&mut self, mean: &[T], var: &[T]) {
        let m = T::lit(BN_MOMENTUM);
        let one_m = T::one() - m;
        for (r, &b) in self.mean.data_mut().iter_mut().zip(mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(var) {
            *r = m * *r + one_m * b;
        }
    }
}

/// Records a batch-norm layer on the tape. In training mode the batch
/// statistics normalize the input and are folded into `stats`; otherwise
/// the running moments are used.
pub fn batch_norm_var<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &BatchNormParams<Var>,
    stats: &mut BnStats<Tensor<T>>,
    training: bool,
) -> Result<Var> {
    let mode = if training {
        let (mean, var) = ops::batch_moments(tape.value(x))?;
        stats.update(&mean, &var);
        BatchNormMode::Batch
    } else {
        BatchNormMode::Running {
            mean: stats.mean.data().to_vec(),
            var: stats.var.data().to_vec(),
        }
    };
    tape.apply(BatchNorm(mode), &[x, params.gamma, params.beta])
}

/// Batch normalization of a `[B, F]` tensor (see [`batch_norm_var`]).
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    params: &BatchNormParams<Tensor<T>>,
    stats: &mut BnStats<Tensor<T>>,
    training: bool,
) -> Result<Tensor<T>> {
    let f = x.shape().get(1).copied().unwrap_or(0);
    if params.gamma.shape() != [f] {
        return Err(Error::shape("batch_norm", x.shape(), params.gamma.shape()));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = bind_constant(&mut tape, params);
    let y = batch_norm_var(&mut tape, xv, &p, stats, training)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_kinds() {
        let l = Linear::shape(3, 2);
        assert_eq!(l.leaf_names(), vec!["w", "b"]);
        assert_eq!(ParamKind::of("video.assign_b"), ParamKind::Bias);
        assert_eq!(ParamKind::of("secg.fc1.b"), ParamKind::Bias);
        assert_eq!(ParamKind::of("reduce_bn.gamma"), ParamKind::Norm);
        assert_eq!(ParamKind::of("video.centers"), ParamKind::Anchor);
        assert_eq!(ParamKind::of("classifier.w"), ParamKind::Weight);
    }

    #[test]
    fn census_splits_kinds() {
        let l: Linear<Tensor<f32>> = zeros_like_shapes(&Linear::shape(3, 2));
        let c = Census::of(&l);
        assert_eq!((c.weights, c.biases, c.norm), (6, 2, 0));
    }

    #[test]
    fn batch_norm_training_updates_running_moments() {
        let x = Tensor::<f64>::from_f64([2, 1], &[1., 3.]).unwrap();
        let p: BatchNormParams<Tensor<f64>> = init_from_shapes(&BatchNormParams::shape(1), &mut SplitMix64::new(0));
        let mut s = BnStats::new(1);
        let y = batch_norm(&x, &p, &mut s, true).unwrap();
        let d = (1.0 + 1e-5f64).sqrt();
        assert!((y.data()[0] + 1.0 / d).abs() < 1e-12);
        assert!((s.mean.data()[0] - 0.02).abs() < 1e-12);
        assert!((s.var.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_inference_identity() {
        let x = Tensor::<f64>::randn([4, 3], 1.0, &mut SplitMix64::new(1));
        let p: BatchNormParams<Tensor<f64>> = init_from_shapes(&BatchNormParams::shape(3), &mut SplitMix64::new(0));
        let mut s = BnStats::new(3);
        let y = batch_norm(&x, &p, &mut s, false).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-4);
        assert!(batch_norm(&Tensor::zeros([0, 3]), &p, &mut s, true).is_err());
    }

    #[test]
    fn fill_from_reports_missing() {
        let mut l: Linear<Tensor<f32>> = zeros_like_shapes(&Linear::shape(2, 2));
        let err = fill_from(&mut l, "", |n| (n == "w").then(|| Tensor::ones([2, 2]))).unwrap_err();
        assert!(err.to_string().contains("missing tensor `b`"));
    }
}
