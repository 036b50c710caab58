use super::{Result, Tensor, TensorError};

/// Denominator floor so coordinates with a vanishing gradient do not blow up
/// the relative error.
const DENOM_FLOOR: f64 = 1e-6;

/// Compares backprop gradients of `f` against central differences.
///
/// Returns the maximum over every coordinate of every parameter of
/// `|analytic - numeric| / (|numeric| + 1e-6)`. Parameter buffers are restored
/// exactly; gradients left on the parameters are the analytic ones.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(TensorError::InvalidArgument {
            op: "finite_difference_check",
            reason: format!("step {h} outside (0, 1e-2]"),
        });
    }
    params.iter().for_each(Tensor::zero_grad);
    let loss = f()?;
    if !loss.item().is_finite() {
        return Err(TensorError::NonFinite {
            op: "finite_difference_check",
        });
    }
    loss.backward()?;

    let mut worst: f64 = 0.0;
    for param in params {
        let analytic = param.grad().unwrap_or_else(|| vec![0.0; param.numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let original = param.data()[i];
            param.data_mut()[i] = original + h;
            let plus = f()?.item();
            param.data_mut()[i] = original - h;
            let minus = f()?.item();
            param.data_mut()[i] = original;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(TensorError::NonFinite {
                    op: "finite_difference_check",
                });
            }
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / (numeric.abs() + DENOM_FLOOR));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches() {
        let w = Tensor::param(vec![0.5, -1.5, 2.0], &[3]).unwrap();
        let err = finite_difference_check(|| w.mul(&w)?.sum(), &[w.clone()], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        assert_eq!(w.to_vec(), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let err = finite_difference_check(|| Ok(Tensor::scalar(3.0)), &[w.clone()], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let w = Tensor::param(vec![1.0], &[1]).unwrap();
        let err = finite_difference_check(|| Ok(Tensor::scalar(f64::NAN)), &[w], 1e-5).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn rejects_large_step() {
        let w = Tensor::param(vec![1.0], &[1]).unwrap();
        assert!(finite_difference_check(|| w.sum(), &[w.clone()], 0.5).is_err());
    }
}
