//! Central-difference gradient verification.
//!
//! The caller supplies two routes: the analytic gradient from the engine
//! under test, and an independent 64-bit scalar function of the same inputs
//! (typically a naive reference implementation living in test code). The
//! check perturbs every input element and compares.

use super::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Compare analytic gradients against central differences of `reference`.
///
/// `analytic` maps the inputs to `(loss, per-input gradients)`;
/// `reference` evaluates the same scalar function fully in `f64`.
/// Relative error uses denominator `max(|a|, |n|, 1e-8)`; entries where both
/// sides are below `abs_floor` are accepted outright.
pub fn finite_diff_check<F, G>(
    inputs: &[Tensor],
    analytic: F,
    reference: G,
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> GradCheckReport
where
    F: Fn(&[Tensor]) -> (f64, Vec<Vec<f32>>),
    G: Fn(&[Vec<f64>]) -> f64,
{
    let (_, grads) = analytic(inputs);
    assert_eq!(grads.len(), inputs.len(), "one gradient per input expected");

    let base: Vec<Vec<f64>> =
        inputs.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut pass = true;
    let mut work = base.clone();
    for (ti, grad) in grads.iter().enumerate() {
        assert_eq!(grad.len(), inputs[ti].numel());
        for ei in 0..grad.len() {
            let orig = base[ti][ei];
            work[ti][ei] = orig + h;
            let up = reference(&work);
            work[ti][ei] = orig - h;
            let down = reference(&work);
            work[ti][ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad[ei] as f64;
            checked += 1;
            if a.abs() < abs_floor && numeric.abs() < abs_floor {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
            if rel > rel_tol && (a - numeric).abs() > abs_floor {
                pass = false;
            }
        }
    }
    GradCheckReport { max_rel_err: max_rel, checked, pass }
}
