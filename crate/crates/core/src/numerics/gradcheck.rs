use super::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error at this scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(leaf, flat index)` of the coordinate with the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Compares tape adjoints of a scalar function against central differences
/// and returns the maximum relative error over all leaf coordinates.
///
/// The difference quotient uses the five-point central stencil, whose
/// truncation error is O(h⁴), so sharply curved functions (layer norm on a
/// low-variance row, softmax at scale 100) are judged on the adjoint rather
/// than on the stencil.
pub fn grad_check<F>(f: F, point: &[Matrix], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    grad_check_report(f, point, h).map(|r| r.max_rel_error)
}

pub fn grad_check_report<F>(f: F, point: &[Matrix], h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::domain(format!("finite-difference step {h} outside [1e-6, 1e-3]")));
    }
    let analytic = {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = point.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&tape, &leaves);
        let grads = tape.backward(out)?;
        leaves.iter().map(|l| grads.wrt(*l)).collect::<Vec<_>>()
    };

    let eval = |pt: &[Matrix]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = pt.iter().map(|m| tape.leaf(m.clone())).collect();
        let v = f(&tape, &leaves).value();
        if v.shape() != (1, 1) {
            return Err(Error::shape("grad_check", v.shape(), (1, 1)));
        }
        let v = v.get(0, 0);
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite value during finite differences".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut work: Vec<Matrix> = point.to_vec();
    for (leaf, g) in analytic.iter().enumerate() {
        for k in 0..point[leaf].data().len() {
            let x0 = point[leaf].data()[k];
            let mut at = |offset: f64| -> Result<f64> {
                work[leaf].data_mut()[k] = x0 + offset;
                eval(&work)
            };
            let (f1p, f1m, f2p, f2m) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            work[leaf].data_mut()[k] = x0;

            let numeric = (8.0 * (f1p - f1m) - (f2p - f2m)) / (12.0 * h);
            let a = g.data()[k];
            if !a.is_finite() {
                return Err(Error::Numeric("non-finite adjoint".into()));
            }
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((leaf, k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = grad_check(|_, x| x[0].hadamard(x[0]), &[Matrix::scalar(3.0)], 1e-4).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let err = grad_check(
            |t, _| t.leaf(Matrix::scalar(2.5)),
            &[Matrix::row_vector(&[1.0, -2.0])],
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        assert!(grad_check(|_, x| x[0].sum(), &[Matrix::scalar(1.0)], 1e-2).is_err());
    }

    #[test]
    fn non_finite_values_surface_as_numeric_errors() {
        // infinite scale makes every evaluation non-finite
        let r = grad_check(
            |_, x| x[0].scale(f64::INFINITY).sum(),
            &[Matrix::scalar(1.0)],
            1e-4,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
