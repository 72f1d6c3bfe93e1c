//! Multi-label BCE, temperature-softened rank distributions, KL divergence
//! and the combined distillation objective.
//!
//! With expert logits `z^m` and mixture logits `z^e`,
//!
//! ```text
//! L = Σ_m BCE(z^m, y) + BCE(z^e, y) + T²·Σ_m KL(p^e ‖ p^m),   p = softmax(z / T)
//! ```
//!
//! where BCE is summed over classes and averaged over the batch, and KL is
//! averaged over the batch. `T = 0` disables the KL term.

use crate::error::{Error, Result};
use crate::tensor::{ops, BceWithLogits, Scalar, Tape, Tensor, Var};

/// Clamp applied to student probabilities inside `ln`.
pub const KL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub kd_enabled: bool,
    /// Detach the mixture distribution `p^e` so the KL term only trains the experts.
    pub stop_teacher_gradient: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::new(3.0)
    }
}

impl LossConfig {
    /// Distillation is enabled iff `temperature > 0`.
    pub fn new(temperature: f64) -> Self {
        Self {
            temperature,
            kd_enabled: temperature > 0.0,
            stop_teacher_gradient: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be finite and ≥ 0, got {}", self.temperature)));
        }
        if self.kd_enabled && self.temperature == 0.0 {
            return Err(Error::Config("distillation requires a positive temperature".into()));
        }
        Ok(())
    }
}

/// Loss terms as plain numbers, for logging.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// One BCE per expert; empty for a single model.
    pub bce_experts: Vec<f64>,
    /// BCE of the mixture, or of the single model.
    pub bce_output: f64,
    /// `Σ_m KL(p^e ‖ p^m)`
    pub kl_raw: f64,
    /// `T²·kl_raw`, the amount added to the total.
    pub kl_weighted: f64,
}

impl LossBreakdown {
    /// Sum of every BCE term.
    pub fn bce(&self) -> f64 {
        self.bce_experts.iter().sum::<f64>() + self.bce_output
    }
}

/// Stable multi-label BCE from logits.
pub fn bce_loss<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<T> {
    use crate::tensor::Primitive;
    Ok(BceWithLogits::new(labels.clone())?.forward(&[logits])?.item())
}

/// `softmax(z / T)` over classes.
pub fn rank_soft_prediction<T: Scalar>(logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("rank_soft_prediction", format!("temperature must be > 0, got {temperature}")));
    }
    if logits.rank() != 2 {
        return Err(Error::invalid("rank_soft_prediction", format!("logits must be [B, C], got {:?}", logits.shape())));
    }
    ops::softmax(&ops::scale(logits, T::lit(1.0 / temperature)), 1)
}

/// Batch mean of `Σ_c p(c)·ln(p(c) / q(c))`, zero where `p(c) = 0`.
pub fn kl_divergence<T: Scalar>(p_teacher: &Tensor<T>, p_student: &Tensor<T>) -> Result<T> {
    if p_teacher.shape() != p_student.shape() || p_teacher.rank() != 2 {
        return Err(Error::shape("kl_divergence", p_teacher.shape(), p_student.shape()));
    }
    if let Some(i) = p_teacher
        .data()
        .iter()
        .chain(p_student.data())
        .position(|&v| v < T::zero() || v.is_nan())
    {
        return Err(Error::invalid("kl_divergence", format!("negative or NaN probability at flat index {i}")));
    }
    let eps = T::lit(KL_EPS);
    let total: T = p_teacher
        .data()
        .iter()
        .zip(p_student.data())
        .filter(|(&p, _)| p > T::zero())
        .map(|(&p, &q)| p * (p.max(eps).ln() - q.max(eps).ln()))
        .sum();
    Ok(total / T::lit(p_teacher.shape()[0].max(1) as f64))
}

/// Records the batch-mean BCE of `logits` on the tape.
pub fn bce_var<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &Tensor<T>) -> Result<Var> {
    tape.apply(BceWithLogits::new(labels.clone())?, &[logits])
}

/// Records the batch-mean `KL(softmax(t/T) ‖ softmax(s/T))` from logits.
pub fn kl_var<T: Scalar>(tape: &mut Tape<T>, teacher: Var, student: Var, temperature: f64) -> Result<Var> {
    let b = tape.shape(teacher)[0].max(1);
    let t = tape.scale(teacher, 1.0 / temperature)?;
    let s = tape.scale(student, 1.0 / temperature)?;
    let log_p = tape.log_softmax(t, 1)?;
    let p = tape.softmax(t, 1)?;
    let log_q = tape.log_softmax(s, 1)?;
    let diff = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, diff)?;
    let sum = tape.sum_all(terms)?;
    tape.scale(sum, 1.0 / b as f64)
}

/// Records the full objective for a single model: its BCE.
pub fn single_loss_var<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &Tensor<T>) -> Result<(Var, LossBreakdown)> {
    let bce = bce_var(tape, logits, labels)?;
    let v = tape.value(bce).item().as_f64();
    Ok((
        bce,
        LossBreakdown {
            total: v,
            bce_output: v,
            ..Default::default()
        },
    ))
}

/// Records the distillation objective over experts and mixture.
pub fn total_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    experts: &[Var],
    mixture: Var,
    labels: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    if experts.is_empty() {
        return Err(Error::invalid("total_loss", "at least one expert is required"));
    }
    let mut breakdown = LossBreakdown::default();
    let mut total = bce_var(tape, mixture, labels)?;
    breakdown.bce_output = tape.value(total).item().as_f64();
    for &z in experts {
        let bce = bce_var(tape, z, labels)?;
        breakdown.bce_experts.push(tape.value(bce).item().as_f64());
        total = tape.add(total, bce)?;
    }
    if cfg.kd_enabled {
        let teacher = if cfg.stop_teacher_gradient {
            tape.stop_gradient(mixture)?
        } else {
            mixture
        };
        let mut raw = None;
        for &z in experts {
            let kl = kl_var(tape, teacher, z, cfg.temperature)?;
            raw = Some(match raw {
                None => kl,
                Some(acc) => tape.add(acc, kl)?,
            });
        }
        let raw = raw.expect("experts is non-empty");
        let t2 = cfg.temperature * cfg.temperature;
        let weighted = tape.scale(raw, t2)?;
        breakdown.kl_raw = tape.value(raw).item().as_f64();
        breakdown.kl_weighted = tape.value(weighted).item().as_f64();
        total = tape.add(total, weighted)?;
    }
    breakdown.total = tape.value(total).item().as_f64();
    Ok((total, breakdown))
}

/// Evaluates the distillation objective on plain tensors.
pub fn total_loss<T: Scalar>(
    expert_logits: &[Tensor<T>],
    mixture_logits: &Tensor<T>,
    labels: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(T, LossBreakdown)> {
    let mut tape = Tape::new();
    let experts: Vec<Var> = expert_logits.iter().map(|z| tape.constant(z.clone())).collect();
    let mixture = tape.constant(mixture_logits.clone());
    let (total, breakdown) = total_loss_var(&mut tape, &experts, mixture, labels, cfg)?;
    Ok((tape.value(total).item(), breakdown))
}
