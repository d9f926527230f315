//! Central finite-difference gradient checking.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over all inputs.
    pub max_rel_err: f64,
    /// Per-input relative error, in input order.
    pub per_input: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error between an analytic and a numeric gradient of the same
/// tensor: `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`. When both gradients vanish
/// (scale below 1e-7, where central differences are dominated by rounding)
/// the absolute error is returned instead.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut diff = 0.0_f64;
    let mut scale = 0.0_f64;
    for (a, n) in analytic.iter().zip(numeric) {
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    if scale < 1e-7 {
        diff
    } else {
        diff / scale
    }
}

fn eval_sum<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if !value.is_finite() {
        return Err(Error::NumericInstability(format!(
            "non-finite output of shape {:?}",
            value.shape()
        )));
    }
    Ok(value.data().iter().sum())
}

/// Compares the tape's gradient of `sum(op(inputs))` against central
/// differences with the given `step`, for every entry of every input.
pub fn grad_check<F>(op: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::config(format!("grad_check step {step} outside (0, 1e-3]")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    if !tape.value(out).is_finite() {
        return Err(Error::NumericInstability(
            "non-finite output at the unperturbed point".into(),
        ));
    }
    let root = tape.sum(out);
    let grads = tape.backward(root)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + step;
            let plus = eval_sum(&op, &probe)?;
            probe[i].data_mut()[j] = x0 - step;
            let minus = eval_sum(&op, &probe)?;
            probe[i].data_mut()[j] = x0;
            numeric.push((plus - minus) / (2.0 * step));
        }
        per_input.push(relative_error(analytic.data(), &numeric));
    }

    let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        per_input,
        tol,
        passed: max_rel_err <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let report = grad_check(
            |tape, v| tape.mul(v[0], v[0]),
            &[Tensor::scalar(3.0)],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
        assert!(report.passed);
    }

    #[test]
    fn rejects_bad_step() {
        let f = |tape: &mut Tape, v: &[Var]| Ok(tape.sum(v[0]));
        assert!(matches!(
            grad_check(f, &[Tensor::scalar(1.0)], 0.0, 1e-4),
            Err(Error::Config(_))
        ));
        assert!(grad_check(f, &[Tensor::scalar(1.0)], 1e-2, 1e-4).is_err());
    }

    #[test]
    fn non_finite_output_is_instability() {
        let err = grad_check(|tape, v| Ok(tape.ln(v[0])), &[Tensor::scalar(-1.0)], 1e-5, 1e-4)
            .unwrap_err();
        assert!(matches!(err, Error::NumericInstability(_)));
    }

    #[test]
    fn relative_error_scales_by_largest_entry() {
        assert_eq!(relative_error(&[2.0, 0.0], &[2.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[4.0, 1.0], &[4.0, 0.0]), 0.25);
        // vanishing gradients fall back to absolute error
        assert_eq!(relative_error(&[0.0], &[1e-12]), 1e-12);
    }
}
