//! The training objective: closed-form reconstruction log-likelihood,
//! KL term between smoothed posteriors and one-step transition priors,
//! and a replay-overshooting reconstruction computed from an open-loop
//! rollout started at the smoothed initial belief.
//!
//! Expectations are evaluated at smoothed means with covariance-propagated
//! likelihood terms; there is no Monte-Carlo sampling anywhere, so the
//! objective and its gradients are deterministic.

use crate::autodiff::{Tape, Var};
use crate::ekf::{filter, rollout, rts_smooth, SmoothedTrace};
use crate::error::{Error, Result};
use crate::gaussian::{kl_divergence, log_prob, pushforward_affine_with, Gaussian};
use crate::matrix::Matrix;
use crate::nn::{BoundObservation, BoundTransition};

/// The three objective terms and their weighted assembly
/// `total = alpha * reconstruction + (1 - alpha) * overshoot - kl`.
/// This is a maximization objective; the trainer minimizes its negation.
pub struct LossBreakdown {
    pub reconstruction: Var,
    pub overshoot: Var,
    pub kl: Var,
    pub total: Var,
    pub alpha: f64,
}

/// Sum over t of log N(x_t; g(mu_{t|T}), C Sigma_{t|T} C^T + R), the
/// observation pushforward of each smoothed marginal.
pub fn reconstruction_term(
    smoothed: &SmoothedTrace,
    xs: &Matrix,
    g: &BoundObservation,
    r: &Var,
    jitter: f64,
) -> Result<Var> {
    let steps = smoothed.smoothed.len() - 1;
    if xs.rows() != steps {
        return Err(Error::Contract(format!(
            "reconstruction: {} observations for {} smoothed steps",
            xs.rows(),
            steps
        )));
    }
    let tape = smoothed.smoothed[0].mean.tape().clone();
    let mut total: Option<Var> = None;
    for t in 1..=steps {
        let marginal = &smoothed.smoothed[t];
        let (obs_mean, jac_c) = g.observe_with_jacobian(&marginal.mean)?;
        let predictive = pushforward_affine_with(marginal, &jac_c, &obs_mean, r, jitter)?;
        let x = tape.constant(Matrix::col_vec(xs.row(t - 1)));
        let lp = log_prob(&predictive, &x)?;
        total = Some(match total {
            Some(acc) => acc.add(&lp)?,
            None => lp,
        });
    }
    Ok(total.expect("at least one step"))
}

/// Sum over t of KL between the smoothed marginal at t and the transition
/// prior N(f(mu_{t-1|T}, u_{t-1}), A Sigma_{t-1|T} A^T + Q), with the
/// transition Jacobian evaluated at the smoothed mean.
pub fn kl_term(
    smoothed: &SmoothedTrace,
    us: &Matrix,
    f: &BoundTransition,
    q: &Var,
    jitter: f64,
) -> Result<Var> {
    let steps = smoothed.smoothed.len() - 1;
    if us.rows() != steps {
        return Err(Error::Contract(format!(
            "kl term: {} input rows for {} smoothed steps",
            us.rows(),
            steps
        )));
    }
    let tape = smoothed.smoothed[0].mean.tape().clone();
    let mut total: Option<Var> = None;
    for t in 1..=steps {
        let prev = &smoothed.smoothed[t - 1];
        let u = tape.constant(Matrix::col_vec(us.row(t - 1)));
        let (f_mean, jac_a) = f.step_with_jacobian(&prev.mean, &u)?;
        let prior = pushforward_affine_with(prev, &jac_a, &f_mean, q, jitter)?;
        let kl = kl_divergence(&smoothed.smoothed[t], &prior)?;
        total = Some(match total {
            Some(acc) => acc.add(&kl)?,
            None => kl,
        });
    }
    Ok(total.expect("at least one step"))
}

/// Sum over t of log N(x_t; ...) under the observation pushforwards of an
/// open-loop rollout started from the smoothed initial belief. Training
/// against this term is what makes the transition model usable for
/// multi-step prediction rather than single-step smoothing.
#[allow(clippy::too_many_arguments)]
pub fn overshoot_term(
    smoothed_init: &Gaussian,
    us: &Matrix,
    xs: &Matrix,
    f: &BoundTransition,
    g: &BoundObservation,
    q: &Var,
    r: &Var,
    jitter: f64,
) -> Result<Var> {
    if us.rows() != xs.rows() {
        return Err(Error::ShapeMismatch {
            op: "overshoot_term",
            lhs_rows: us.rows(),
            lhs_cols: us.cols(),
            rhs_rows: xs.rows(),
            rhs_cols: xs.cols(),
        });
    }
    let tape = smoothed_init.mean.tape().clone();
    let rolled = rollout(&tape, smoothed_init, us, f, g, q, r, jitter)?;
    let mut total: Option<Var> = None;
    for (t, (_, obs)) in rolled.iter().enumerate() {
        let x = tape.constant(Matrix::col_vec(xs.row(t)));
        let lp = log_prob(obs, &x)?;
        total = Some(match total {
            Some(acc) => acc.add(&lp)?,
            None => lp,
        });
    }
    Ok(total.expect("at least one step"))
}

/// Runs filter, smoother, and the three terms for one trajectory and
/// assembles the weighted objective. Errors are tagged with the phase
/// that produced them.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &Tape,
    us: &Matrix,
    xs: &Matrix,
    f: &BoundTransition,
    g: &BoundObservation,
    q: &Var,
    r: &Var,
    init: &Gaussian,
    alpha: f64,
    jitter: f64,
) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let trace = filter(tape, us, xs, f, g, q, r, init, jitter)
        .map_err(|e| e.in_phase("filter"))?;
    let smoothed = rts_smooth(&trace, jitter).map_err(|e| e.in_phase("smooth"))?;

    let reconstruction =
        reconstruction_term(&smoothed, xs, g, r, jitter).map_err(|e| e.in_phase("loss"))?;
    let kl = kl_term(&smoothed, us, f, q, jitter).map_err(|e| e.in_phase("loss"))?;
    let overshoot = overshoot_term(&smoothed.smoothed[0], us, xs, f, g, q, r, jitter)
        .map_err(|e| e.in_phase("loss"))?;

    let total = reconstruction
        .scale(alpha)
        .add(&overshoot.scale(1.0 - alpha))?
        .sub(&kl)?;
    Ok(LossBreakdown {
        reconstruction,
        overshoot,
        kl,
        total,
        alpha,
    })
}
