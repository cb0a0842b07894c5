use crate::error::{AdError, Result};
use crate::tape::{Tape, Var};

/// Central-difference gradient of `loss` at `theta`.
///
/// Each coordinate is probed at `theta[i] ± step` with every other
/// coordinate held fixed, so the cost is `2 * theta.len()` evaluations.
pub fn finite_diff_gradient<F>(mut loss: F, theta: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(AdError::InvalidStep(step));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = loss(&probe);
        if !plus.is_finite() {
            return Err(AdError::NonFiniteProbe { index: i, value: plus });
        }
        probe[i] = orig - step;
        let minus = loss(&probe);
        if !minus.is_finite() {
            return Err(AdError::NonFiniteProbe { index: i, value: minus });
        }
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Relative error `‖g_ad - g_fd‖ / max(‖g_ad‖, ‖g_fd‖, 1e-8)` between the
/// reverse-mode gradient of a scalar graph and its central differences.
/// `build` must read every parameter through [`Tape::param`] leaves whose
/// offsets index into `theta`.
pub fn gradient_error<F, E>(build: F, theta: &[f64], step: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Tape, &[f64]) -> std::result::Result<Var, E>,
    E: From<AdError>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape, theta)?;
    let ad = tape.backward(out, None)?.param_vector(theta.len());
    let fd = finite_diff_gradient(
        |t| {
            let mut tape = Tape::new();
            build(&mut tape, t).map_or(f64::NAN, |out| tape.value(out).item())
        },
        theta,
        step,
    )?;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = ad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(diff / norm(&ad).max(norm(&fd)).max(1e-8))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_error_of_cube() {
        let e = gradient_error(
            |t, th| -> Result<Var> {
                let x = t.param(crate::Tensor::scalar(th[0]), 0);
                let y = t.mul(x, x)?;
                t.mul(y, x)
            },
            &[1.5],
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-9, "{e}");
    }

    #[test]
    fn square_at_three() {
        let g = finite_diff_gradient(|t| t[0] * t[0], &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn constant_loss_is_flat() {
        let g = finite_diff_gradient(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn rejects_bad_step() {
        assert_eq!(
            finite_diff_gradient(|t| t[0], &[0.0], 0.0).unwrap_err(),
            AdError::InvalidStep(0.0)
        );
        assert!(finite_diff_gradient(|t| t[0], &[0.0], -1.0).is_err());
    }

    #[test]
    fn reports_non_finite_coordinate() {
        let err = finite_diff_gradient(|t| if t[1] > 0.5 { f64::NAN } else { t[0] }, &[0.0, 0.5], 1e-3)
            .unwrap_err();
        assert!(matches!(err, AdError::NonFiniteProbe { index: 1, .. }));
    }
}
