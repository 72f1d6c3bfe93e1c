use super::{DType, Primitive, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Denominator floor for the relative error, so gradients that are zero up to
/// finite-difference noise do not register as failures.
const REL_FLOOR: f64 = 1e-3;

/// Seed of the random output cotangent used by [`grad_check`].
const COTANGENT_SEED: u64 = 0x6772_6164;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub primitive: &'static str,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3)`.
    pub max_rel_error: f64,
    /// `(input, flat index)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
}

/// Compares a primitive's VJP against central finite differences.
///
/// The output is contracted with a fixed random cotangent `r`, giving the
/// scalar `L(x) = Σ r ⊙ f(x)`. The VJP of `r` is the analytic gradient of `L`;
/// each input element is then perturbed by `±h` to obtain the numeric one.
pub fn grad_check<T: Scalar>(
    primitive: &dyn Primitive<T>,
    inputs: &[Tensor<T>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if T::DTYPE != DType::F64 {
        return Err(Error::invalid("grad_check", "inputs must be float64"));
    }
    if !(h > 0.0) {
        return Err(Error::invalid("grad_check", "h must be positive"));
    }
    let refs: Vec<&Tensor<T>> = inputs.iter().collect();
    let out = primitive.forward(&refs)?;
    let cot = Tensor::<T>::randn(out.shape().to_vec(), 1.0, &mut SplitMix64::new(COTANGENT_SEED));
    let needs = vec![true; inputs.len()];
    let analytic = primitive.vjp(&refs, &out, &cot, &needs)?;
    if analytic.len() != inputs.len() {
        return Err(Error::invalid(
            "grad_check",
            format!("{} returned {} cotangents for {} inputs", primitive.name(), analytic.len(), inputs.len()),
        ));
    }

    let contract = |y: &Tensor<T>| -> f64 {
        y.data().iter().zip(cot.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum()
    };

    let mut report = GradCheckReport {
        primitive: primitive.name(),
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let grad = grad.clone().unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        if grad.shape() != inputs[i].shape() {
            return Err(Error::shape("grad_check", inputs[i].shape(), grad.shape()));
        }
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + T::lit(h);
            let plus = contract(&primitive.forward(&work.iter().collect::<Vec<_>>())?);
            work[i].data_mut()[j] = orig - T::lit(h);
            let minus = contract(&primitive.forward(&work.iter().collect::<Vec<_>>())?);
            work[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[j].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
            }
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
