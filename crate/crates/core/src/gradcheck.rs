//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates excluded as lying within one step of a kink.
    pub skipped: usize,
}

/// Finite-difference checker. With kink detection enabled, a coordinate is
/// skipped when its forward and backward one-sided differences disagree by
/// more than `kink_tolerance * max(1, |central|)`: the function is not smooth
/// within `step` of that point.
pub struct GradCheck<'a> {
    step: f64,
    kink_tolerance: Option<f64>,
    skip: Option<Box<dyn Fn(usize) -> bool + 'a>>,
}

impl<'a> GradCheck<'a> {
    pub fn new(step: f64) -> Self {
        GradCheck {
            step,
            kink_tolerance: Some(1e-3),
            skip: None,
        }
    }

    pub fn kink_tolerance(mut self, tol: Option<f64>) -> Self {
        self.kink_tolerance = tol;
        self
    }

    /// Excludes coordinates for which `pred(index)` holds.
    pub fn skip_if(mut self, pred: impl Fn(usize) -> bool + 'a) -> Self {
        self.skip = Some(Box::new(pred));
        self
    }

    pub fn run<F>(&self, f: F, x: &Tensor) -> Result<GradCheckReport>
    where
        F: Fn(&Tensor) -> Result<(f64, Tensor)>,
    {
        if self.step.is_nan() || self.step <= 0.0 {
            return Err(Error::InvalidParam("finite-difference step must be > 0".into()));
        }
        let (f0, analytic) = f(x)?;
        if !f0.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        analytic.expect_shape(x.shape())?;
        let mut probe = x.clone();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for i in 0..x.numel() {
            if self.skip.as_ref().is_some_and(|s| s(i)) {
                report.skipped += 1;
                continue;
            }
            let orig = x.data()[i];
            probe.data_mut()[i] = orig + self.step;
            let (fp, _) = f(&probe)?;
            probe.data_mut()[i] = orig - self.step;
            let (fm, _) = f(&probe)?;
            probe.data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite("grad_check objective".into()));
            }
            let central = (fp - fm) / (2.0 * self.step);
            if let Some(tol) = self.kink_tolerance {
                let fwd = (fp - f0) / self.step;
                let bwd = (f0 - fm) / self.step;
                if (fwd - bwd).abs() > tol * central.abs().max(1.0) {
                    report.skipped += 1;
                    continue;
                }
            }
            let a = analytic.data()[i];
            let err = (a - central).abs() / a.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
        Ok(report)
    }
}

/// Max relative error between the analytic gradient returned by `f` and a
/// central difference with the given step, over every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    Ok(GradCheck::new(step).kink_tolerance(None).run(f, x)?.max_rel_error)
}
