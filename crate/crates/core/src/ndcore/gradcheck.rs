use crate::error::{invalid, shape, Result};

/// Finite-difference stencil used by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`
    #[default]
    Central3,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`
    Central5,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Relative error per parameter, in parameter order.
    pub errors: Vec<f64>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }

    pub fn worst_index(&self) -> Option<usize> {
        self.errors
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }
}

/// `|a − n| / max(|a|, |n|, 1e−8)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central finite differences of `value` at
/// `params`.
pub fn grad_check<F>(
    mut value: F,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(invalid(format!("finite-difference step must be positive, got {step}")));
    }
    if params.len() != analytic.len() {
        return Err(shape(format!(
            "{} parameters but {} analytic gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let mut probe = params.to_vec();
    let mut at = |probe: &mut Vec<f64>, k: usize, offset: f64| {
        probe[k] = params[k] + offset;
        let v = value(probe);
        probe[k] = params[k];
        v
    };
    let mut numeric = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let n = match stencil {
            Stencil::Central3 => {
                (at(&mut probe, k, step) - at(&mut probe, k, -step)) / (2.0 * step)
            }
            Stencil::Central5 => {
                let p1 = at(&mut probe, k, step);
                let m1 = at(&mut probe, k, -step);
                let p2 = at(&mut probe, k, 2.0 * step);
                let m2 = at(&mut probe, k, -2.0 * step);
                (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step)
            }
        };
        numeric.push(n);
    }
    let errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .collect();
    let max_rel_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        errors,
        analytic: analytic.to_vec(),
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let r = grad_check(|p| p[0] * p[0], &[3.0], &[6.0], 1e-6, Stencil::Central3).unwrap();
        assert!((r.numeric[0] - 6.0).abs() < 1e-9);
        assert!(r.passes(1e-9));
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let f = |p: &[f64]| p[0] * p[0] + p[1].sin();
        let x = [1.3f64, 0.4];
        let wrong = [2.0 * 2.0 * x[0], 2.0 * x[1].cos()];
        let r = grad_check(f, &x, &wrong, 1e-6, Stencil::Central3).unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
        assert!(!r.passes(1e-5));
    }

    #[test]
    fn five_point_is_more_accurate() {
        let f = |p: &[f64]| (3.0 * p[0]).exp();
        let g = [3.0 * (3.0f64 * 0.7).exp()];
        let r3 = grad_check(f, &[0.7], &g, 1e-3, Stencil::Central3).unwrap();
        let r5 = grad_check(f, &[0.7], &g, 1e-3, Stencil::Central5).unwrap();
        assert!(r5.max_rel_error < r3.max_rel_error / 100.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(grad_check(|p| p[0], &[1.0], &[1.0], 0.0, Stencil::Central3).is_err());
        assert!(grad_check(|p| p[0], &[1.0], &[1.0, 2.0], 1e-6, Stencil::Central3).is_err());
    }
}
