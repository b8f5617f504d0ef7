//! Shared driver for contraction (Picard / Neumann) iterations.

use crate::error::{Error, Result};
use crate::field::TimeFourierField;

/// Outcome of a converged fixed-point iteration.
#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub value: TimeFourierField,
    pub iterations: usize,
    /// Largest step ratio `‖x_{n+1} − x_n‖ / ‖x_n − x_{n−1}‖` seen above the noise floor.
    pub ratio: f64,
}

pub(crate) struct Controls {
    pub tol: f64,
    pub max_iter: usize,
    /// Steps below this are treated as rounding noise for ratio estimates and
    /// stagnation.
    pub noise: f64,
}

/// What the caller's error should be when the map does not contract.
pub(crate) enum Failure {
    Contraction,
    Inversion,
}

/// Iterates `x ← map(x)` until the step norm drops below `tol`.
pub(crate) fn iterate(
    start: TimeFourierField,
    ctl: Controls,
    failure: Failure,
    norm: impl Fn(&TimeFourierField) -> f64,
    mut map: impl FnMut(&TimeFourierField) -> Result<TimeFourierField>,
) -> Result<FixedPoint> {
    let mut x = start;
    let mut prev_step = f64::INFINITY;
    let mut ratio: f64 = 0.0;
    let mut growing = 0;
    for it in 1..=ctl.max_iter {
        let next = map(&x)?;
        let step = norm(&next.sub(&x));
        x = next;
        if step <= ctl.tol {
            return Ok(FixedPoint { value: x, iterations: it, ratio });
        }
        if prev_step.is_finite() && prev_step > ctl.noise {
            let r = step / prev_step;
            ratio = ratio.max(r);
            if r >= 1.0 {
                growing += 1;
            } else {
                growing = 0;
            }
        } else if prev_step.is_finite() && step >= 0.9 * prev_step {
            // Stalled at the rounding floor.
            return Ok(FixedPoint { value: x, iterations: it, ratio });
        }
        if growing >= 5 {
            return Err(fail(failure, ratio, it));
        }
        prev_step = step;
    }
    Err(fail(failure, ratio.max(1.0), ctl.max_iter))
}

fn fail(kind: Failure, ratio: f64, iterations: usize) -> Error {
    match kind {
        Failure::Contraction => Error::ContractionFailure { ratio, iterations },
        Failure::Inversion => Error::InversionFailure { ratio, iterations },
    }
}
