use std::sync::Arc;

use super::{NumericsError, Tape, Tensor, Var};

/// Compares reverse-mode gradients of `f` at `p` with central differences.
///
/// `f` builds a scalar on the given tape from the parameter var. Returns the
/// maximum over coordinates of `|analytic − numeric| / (|analytic| + 1e-8)`.
pub fn gradient_check<F>(f: F, p: &Tensor, h: f64) -> Result<f64, NumericsError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let tape = Tape::new();
    let x = tape.param("p", Arc::new(p.clone()));
    let root = f(&tape, x);
    let analytic = tape.backward(root)?;
    let analytic = analytic.get("p").expect("p registered").clone();

    let eval = |q: Tensor| -> Result<f64, NumericsError> {
        let tape = Tape::new();
        let x = tape.constant(q);
        let v = f(&tape, x).value().item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NumericsError::NonFinite {
                op: "gradient_check",
            })
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let mut plus = p.clone();
        plus.data_mut()[i] += h;
        let mut minus = p.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let p = Tensor::vector(vec![0.3, -1.2, 2.5, 0.7]);
        let err = gradient_check(|_, x| (x * x).sum(), &p, 1e-4).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_negligible_numeric_gradient() {
        let p = Tensor::vector(vec![1.0, 2.0]);
        let err = gradient_check(|t, _| t.constant(Tensor::scalar(3.0)).sum(), &p, 1e-4).unwrap();
        // analytic 0; numeric difference of equal values is exactly 0
        assert!(err <= 1e-8 * 1e-8 / 1e-8);
    }

    #[test]
    fn nan_at_perturbed_point_is_an_error() {
        let p = Tensor::vector(vec![709.7]);
        // exp overflows once the step pushes past ~709.78
        let r = gradient_check(|_, x| x.exp().sum(), &p, 0.5);
        assert!(r.is_err());
    }
}
