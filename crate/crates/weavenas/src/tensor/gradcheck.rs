//! Central finite-difference verification of analytic gradients.

use super::{Tensor, TensorError};

/// Compares an analytic gradient against central finite differences.
///
/// `f` maps a tensor to a scalar and must also return the analytic gradient
/// of that scalar with respect to its input (typically computed with a
/// [`super::Tape`], but any route works — the checker itself only re-runs
/// the forward value at perturbed points, so it stays independent of the
/// gradient path it verifies).
///
/// Returns the maximum over entries of
/// `|analytic - central_difference| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, input: &Tensor, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor), TensorError>,
{
    assert!(step > 0.0, "finite_diff_check requires a positive step");
    let (value, analytic) = f(input)?;
    if !value.is_finite() || !analytic.is_finite() {
        return Err(TensorError::NonFinite("finite_diff_check base point".into()));
    }
    if analytic.shape() != input.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "analytic gradient {} does not match input {}",
            analytic.shape(),
            input.shape()
        )));
    }

    let mut max_err: f64 = 0.0;
    let mut probe = input.clone();
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let (up, _) = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let (down, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(TensorError::NonFinite(format!(
                "finite_diff_check probe at entry {i}"
            )));
        }
        let fd = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - fd).abs() / a.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Prim, Shape, Tape};

    #[test]
    fn linear_map_is_exact_up_to_rounding() {
        let input =
            Tensor::from_fn(Shape::new(1, 1, 2, 3), |_, _, h, w| (h * 3 + w) as f64 * 0.375);
        let err = finite_diff_check(
            |x| {
                let st = ParamStore::new();
                let mut tape = Tape::new();
                let xn = tape.input(x.clone());
                let y = tape.apply(&st, Prim::Scale(2.5), &[xn])?;
                let s = tape.apply(&st, Prim::SumAll, &[y])?;
                let g = tape.input_grad(&st, s, xn)?;
                Ok((tape.value(&st, s).scalar_value(), g))
            },
            &input,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10, "linear map FD error {err}");
    }

    #[test]
    fn identity_is_exact() {
        let input = Tensor::from_fn(Shape::new(1, 2, 2, 2), |_, c, h, w| {
            (c as f64) - 0.25 * (h as f64) + 0.125 * (w as f64)
        });
        let err = finite_diff_check(
            |x| {
                let st = ParamStore::new();
                let mut tape = Tape::new();
                let xn = tape.input(x.clone());
                let s = tape.apply(&st, Prim::SumAll, &[xn])?;
                let g = tape.input_grad(&st, s, xn)?;
                Ok((tape.value(&st, s).scalar_value(), g))
            },
            &input,
            0.0009765625, // 2^-10 keeps the central difference exact here
        )
        .unwrap();
        assert!(err <= 1e-12, "identity FD error {err}");
    }

    #[test]
    fn non_finite_function_is_reported() {
        let input = Tensor::scalar(0.0);
        let res = finite_diff_check(
            |x| {
                let v = 1.0 / x.data()[0];
                Ok((v, Tensor::scalar(f64::NAN)))
            },
            &input,
            1e-5,
        );
        assert!(matches!(res, Err(TensorError::NonFinite(_))));
    }
}
