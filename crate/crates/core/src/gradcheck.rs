//! Central finite-difference gradient checking.

use std::fmt;

use crate::error::Result;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::tokenizer::EncodedSequence;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Perturbation size.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Smallest denominator of the relative error. Central differences at
    /// h = 1e-5 carry ~1e-10 of round-off, so gradients much below 1e-6
    /// cannot be resolved to 1e-4 relative.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} coordinates checked, max error {:.3e} (tolerance {:.1e})",
            self.checked, self.max_error, self.tolerance
        )?;
        for m in self.mismatches.iter().take(10) {
            write!(
                f,
                "\n  tensor {} [{}]: analytic {:.6e} numeric {:.6e} error {:.3e}",
                m.tensor, m.index, m.analytic, m.numeric, m.error
            )?;
        }
        Ok(())
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic[t][i]` against `(f(p + h·e) - f(p - h·e)) / 2h` for
/// every coordinate of every tensor in `params`.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    cfg: &GradCheck,
) -> GradCheckReport
where
    F: Fn(&[Tensor]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter tensor");
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_error: 0.0,
        tolerance: cfg.tolerance,
        mismatches: Vec::new(),
    };
    for t in 0..params.len() {
        assert_eq!(params[t].shape(), analytic[t].shape(), "gradient shape for tensor {t}");
        for i in 0..params[t].numel() {
            let orig = params[t].data()[i];
            work[t].data_mut()[i] = orig + cfg.step;
            let up = f(&work);
            work[t].data_mut()[i] = orig - cfg.step;
            let down = f(&work);
            work[t].data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[t].data()[i];
            let error = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            report.max_error = report.max_error.max(error);
            if error >= cfg.tolerance || !error.is_finite() {
                report.mismatches.push(Mismatch {
                    tensor: t,
                    index: i,
                    analytic: a,
                    numeric,
                    error,
                });
            }
        }
    }
    report
}

/// Checks the batch cross-entropy gradients of every parameter of `model`
/// (encoder and head), without dropout.
pub fn check_model_gradients(model: &Model, batch: &[(&EncodedSequence, usize)], cfg: &GradCheck) -> Result<GradCheckReport> {
    let analytic = model.batch_loss_and_grads(batch, None, true)?.grads;
    let params: Vec<Tensor> = model.named().into_iter().map(|(_, t)| t.clone()).collect();
    let f = |ts: &[Tensor]| {
        let mut m = model.clone();
        for (slot, t) in m.tensors_mut().into_iter().zip(ts) {
            slot.data_mut().copy_from_slice(t.data());
        }
        m.batch_loss(batch).unwrap_or(f64::NAN)
    };
    Ok(finite_difference_check(f, &params, &analytic, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let p = vec![Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap()];
        let f = |ps: &[Tensor]| ps[0].data().iter().map(|x| x * x).sum::<f64>();
        let good = vec![Tensor::vector(vec![2.0, -4.0, 1.0]).unwrap()];
        let bad = vec![Tensor::vector(vec![2.0, -4.0, 1.1]).unwrap()];
        assert!(finite_difference_check(f, &p, &good, &GradCheck::default()).passed());
        let report = finite_difference_check(f, &p, &bad, &GradCheck::default());
        assert_eq!(report.mismatches.len(), 1);
        assert_eq!(report.mismatches[0].index, 2);
    }

    #[test]
    fn denominator_never_drops_below_floor() {
        assert!((relative_error(1e-12, 3e-12, 1e-6) - 2e-6).abs() < 1e-18);
        assert!((relative_error(1.0, 1.1, 1e-6) - 0.1 / 1.1).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
    }
}
