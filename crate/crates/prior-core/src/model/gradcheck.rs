//! Central finite-difference verification of the analytic gradients.

use super::checkpoint::CheckpointBundle;
use super::transformer::{forward_backward, forward_job, SequenceJob};
use crate::error::{Error, Result};

/// Epsilons outside this window make the comparison numerically meaningless
/// (truncation error above, cancellation below).
const RELIABLE_EPS: (f64, f64) = (1e-8, 1e-3);

/// Gradients whose magnitude is below this floor are compared against it
/// instead, so finite-difference noise on negligible entries cannot dominate
/// the report. The central difference carries absolute noise of roughly
/// `machine_eps * |loss| / epsilon` (~1e-9 for batch losses of order 10 at
/// epsilon 1e-5); the floor keeps that noise below the 1e-4 relative
/// threshold with a ~30x margin while still flagging any discrepancy larger
/// than a few 1e-9 absolute.
const DENOM_FLOOR: f64 = 3e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub epsilon: f64,
    /// False when the step size is outside the trustworthy window; the
    /// numbers are still reported but should not gate anything.
    pub reliable: bool,
}

/// Sweep every parameter: analytic gradient of the weighted loss vs a
/// central difference. Intended for micro configs; the batch is capped at 8
/// captions to keep the sweep tractable.
pub fn grad_check(
    ckpt: &CheckpointBundle,
    batch: &[SequenceJob],
    epsilon: f64,
) -> Result<GradientReport> {
    if batch.is_empty() || batch.len() > 8 {
        return Err(Error::invalid("grad_check wants 1..=8 captions"));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid("epsilon must be positive and finite"));
    }
    let cfg = &ckpt.config;

    let mut analytic = vec![0.0; ckpt.params.len()];
    for job in batch {
        forward_backward(cfg, &ckpt.params, job, &mut analytic)?;
    }

    let loss_of = |params: &super::transformer::Parameters| -> Result<f64> {
        let mut total = 0.0;
        for job in batch {
            let nlls = forward_job(cfg, params, job, false)?.nlls;
            for (l, t) in nlls.iter().zip(&job.losses) {
                total += t.weight * l;
            }
        }
        Ok(total)
    };

    let mut params = ckpt.params.clone();
    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    for i in 0..params.len() {
        let orig = params.data()[i];
        params.data_mut()[i] = orig + epsilon;
        let up = loss_of(&params)?;
        params.data_mut()[i] = orig - epsilon;
        let down = loss_of(&params)?;
        params.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let rel = (analytic[i] - numeric).abs()
            / analytic[i].abs().max(numeric.abs()).max(DENOM_FLOOR);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }

    Ok(GradientReport {
        max_rel_error: max_rel,
        worst_parameter: ckpt.params.name_of_index(worst).to_string(),
        epsilon,
        reliable: (RELIABLE_EPS.0..=RELIABLE_EPS.1).contains(&epsilon),
    })
}
