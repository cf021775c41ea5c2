use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FdError {
    #[error("finite-difference step must be positive, got {0}")]
    Step(f64),
    #[error("non-finite function value at coordinate {coord} ({side} side)")]
    NonFinite { coord: usize, side: &'static str },
    #[error("function evaluation failed at coordinate {coord}: {message}")]
    Eval { coord: usize, message: String },
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` of a
/// scalar function of a flat parameter vector.
pub fn fd_gradient<F, E>(mut f: F, point: &[f64], h: f64) -> Result<Vec<f64>, FdError>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
    E: std::fmt::Display,
{
    if !(h > 0.0) {
        return Err(FdError::Step(h));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut eval = |x: &[f64], side| {
            let v = f(x).map_err(|e| FdError::Eval {
                coord: i,
                message: e.to_string(),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(FdError::NonFinite { coord: i, side })
            }
        };
        x[i] = point[i] + h;
        let plus = eval(&x, "plus")?;
        x[i] = point[i] - h;
        let minus = eval(&x, "minus")?;
        x[i] = point[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest discrepancy between an analytic and a finite-difference gradient.
///
/// Coordinates where `|fd| < abs_floor` are compared absolutely; all others
/// use `|a - fd| / max(|a|, |fd|)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err_small: f64,
    pub worst_coord: Option<usize>,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel_err <= rel_tol && self.max_abs_err_small <= abs_tol
    }
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len());
    let mut out = GradCheck {
        max_rel_err: 0.0,
        max_abs_err_small: 0.0,
        worst_coord: None,
    };
    let mut worst = f64::NEG_INFINITY;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        let score = if n.abs() < abs_floor {
            out.max_abs_err_small = out.max_abs_err_small.max(diff);
            diff / abs_floor
        } else {
            let rel = diff / a.abs().max(n.abs());
            out.max_rel_err = out.max_rel_err.max(rel);
            rel
        };
        if score > worst {
            worst = score;
            out.worst_coord = Some(i);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    #[test]
    fn square_at_three() {
        let g = fd_gradient(|x| Ok::<_, Infallible>(x[0] * x[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = fd_gradient(|_| Ok::<_, Infallible>(4.2), &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        assert_eq!(
            fd_gradient(|_| Ok::<_, Infallible>(0.0), &[1.0], 0.0),
            Err(FdError::Step(0.0))
        );
        let err = fd_gradient(|x| Ok::<_, Infallible>(x[0].ln()), &[0.0], 1e-3).unwrap_err();
        assert!(matches!(err, FdError::NonFinite { coord: 0, .. }));
    }
}
