//! Extended Kalman filtering, Rauch-Tung-Striebel smoothing, and
//! open-loop generative rollout, executed over tape variables so a loss
//! built from the results can backpropagate through the full inference
//! pass into network weights, noise covariances, and the initial belief.
//!
//! Indexing convention: `u` row `t-1` drives the step into time `t`
//! everywhere (filter, smoother prior, rollout). The time step itself is
//! implicit: the learned transition absorbs the sampling interval, so
//! datasets must be sampled at the rate used in training.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gaussian::{pushforward_affine_with, sanitize_with, Gaussian};
use crate::matrix::Matrix;
use crate::nn::{BoundObservation, BoundTransition};

/// Everything the forward filtering pass produces, kept on the tape:
/// predicted and filtered marginals for t = 1..T plus the Jacobians
/// evaluated along the way. `jac_a[t]` is the transition Jacobian at the
/// filtered mean of time t (the initial mean for t = 0); `jac_c[t]` is
/// the observation Jacobian at the predicted mean of time t+1.
pub struct FilterTrace {
    pub init: Gaussian,
    pub predicted: Vec<Gaussian>,
    pub filtered: Vec<Gaussian>,
    pub jac_a: Vec<Var>,
    pub jac_c: Vec<Var>,
}

impl FilterTrace {
    pub fn len(&self) -> usize {
        self.filtered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filtered.is_empty()
    }
}

/// Smoothed marginals for t = 0..T (length T + 1) and the smoother gains
/// for t = 0..T-1. The last smoothed marginal equals the last filtered
/// marginal exactly.
pub struct SmoothedTrace {
    pub smoothed: Vec<Gaussian>,
    pub gains: Vec<Var>,
}

/// One prediction step: the prior is pushed through the transition model
/// linearized at its mean. Returns the predicted belief and the Jacobian.
pub fn predict_step(
    prior: &Gaussian,
    u: &Var,
    f: &BoundTransition,
    q: &Var,
    jitter: f64,
) -> Result<(Gaussian, Var)> {
    let (mean, jac) = f.step_with_jacobian(&prior.mean, u)?;
    let predicted = pushforward_affine_with(prior, &jac, &mean, q, jitter)?;
    Ok((predicted, jac))
}

/// One update step: conditions the predicted belief on an observation.
/// The Kalman gain is computed through an SPD solve of the innovation
/// covariance; no inverse is formed.
pub fn update_step(
    pred: &Gaussian,
    x: &Var,
    g: &BoundObservation,
    r: &Var,
    jitter: f64,
) -> Result<(Gaussian, Var)> {
    if x.rows() != g.obs_dim || x.cols() != 1 {
        return Err(Error::Contract(format!(
            "observation must be {}x1, got {}x{}",
            g.obs_dim,
            x.rows(),
            x.cols()
        )));
    }
    let (predicted_obs, jac_c) = g.observe_with_jacobian(&pred.mean)?;
    let innovation_cov = sanitize_with(
        &jac_c
            .matmul(&pred.cov)?
            .matmul(&jac_c.transpose())?
            .add(r)?,
        jitter,
    )?;
    // K = P C^T S^{-1}, assembled as (S^{-1} C P)^T.
    let cp = jac_c.matmul(&pred.cov)?;
    let gain = innovation_cov.solve_spd(&cp)?.transpose();
    let innovation = x.sub(&predicted_obs)?;
    let mean = pred.mean.add(&gain.matmul(&innovation)?)?;
    let eye = pred.mean.tape().identity(pred.dim());
    let closed = eye.sub(&gain.matmul(&jac_c)?)?;
    let cov = sanitize_with(&closed.matmul(&pred.cov)?, jitter)?;
    Ok((Gaussian::new(mean, cov)?, jac_c))
}

/// Runs the filter over one trajectory: alternating predict and update
/// for t = 1..T starting from the initial belief. `us` and `xs` hold one
/// time step per row.
#[allow(clippy::too_many_arguments)]
pub fn filter(
    tape: &Tape,
    us: &Matrix,
    xs: &Matrix,
    f: &BoundTransition,
    g: &BoundObservation,
    q: &Var,
    r: &Var,
    init: &Gaussian,
    jitter: f64,
) -> Result<FilterTrace> {
    let steps = xs.rows();
    if steps == 0 {
        return Err(Error::Contract("filter needs at least one observation".into()));
    }
    if us.rows() != steps {
        return Err(Error::ShapeMismatch {
            op: "filter",
            lhs_rows: us.rows(),
            lhs_cols: us.cols(),
            rhs_rows: xs.rows(),
            rhs_cols: xs.cols(),
        });
    }
    let mut trace = FilterTrace {
        init: init.clone(),
        predicted: Vec::with_capacity(steps),
        filtered: Vec::with_capacity(steps),
        jac_a: Vec::with_capacity(steps),
        jac_c: Vec::with_capacity(steps),
    };
    let mut belief = init.clone();
    for t in 0..steps {
        let u = tape.constant(Matrix::col_vec(us.row(t)));
        let x = tape.constant(Matrix::col_vec(xs.row(t)));
        let (predicted, jac_a) =
            predict_step(&belief, &u, f, q, jitter).map_err(|e| e.at_step(t + 1))?;
        let (filtered, jac_c) =
            update_step(&predicted, &x, g, r, jitter).map_err(|e| e.at_step(t + 1))?;
        trace.predicted.push(predicted);
        trace.jac_a.push(jac_a);
        trace.jac_c.push(jac_c);
        trace.filtered.push(filtered.clone());
        belief = filtered;
    }
    Ok(trace)
}

/// Backward smoothing pass over a completed filter trace. The smoother
/// gains reuse the transition Jacobians evaluated at the filtered means
/// during the forward pass.
pub fn rts_smooth(trace: &FilterTrace, jitter: f64) -> Result<SmoothedTrace> {
    let steps = trace.len();
    if steps == 0 {
        return Err(Error::Contract("cannot smooth an empty filter trace".into()));
    }
    let mut smoothed: Vec<Option<Gaussian>> = vec![None; steps + 1];
    smoothed[steps] = Some(trace.filtered[steps - 1].clone());
    let mut gains: Vec<Option<Var>> = vec![None; steps];

    for t in (0..steps).rev() {
        let filtered_t = if t == 0 {
            &trace.init
        } else {
            &trace.filtered[t - 1]
        };
        let predicted_next = &trace.predicted[t];
        let next_smoothed = smoothed[t + 1].clone().expect("filled by recursion");

        // K^s = P_{t|t} A_t^T (P_{t+1|t})^{-1}, assembled through a solve.
        let ap = trace.jac_a[t].matmul(&filtered_t.cov)?;
        let gain = predicted_next.cov.solve_spd(&ap)?.transpose();

        let mean_resid = next_smoothed.mean.sub(&predicted_next.mean)?;
        let mean = filtered_t.mean.add(&gain.matmul(&mean_resid)?)?;
        let cov_resid = next_smoothed.cov.sub(&predicted_next.cov)?;
        let cov = sanitize_with(
            &filtered_t
                .cov
                .add(&gain.matmul(&cov_resid)?.matmul(&gain.transpose())?)?,
            jitter,
        )?;
        smoothed[t] = Some(Gaussian::new(mean, cov)?);
        gains[t] = Some(gain);
    }

    Ok(SmoothedTrace {
        smoothed: smoothed.into_iter().map(|g| g.expect("filled")).collect(),
        gains: gains.into_iter().map(|g| g.expect("filled")).collect(),
    })
}

/// Open-loop generative prediction: iterates the transition from an
/// initial belief without conditioning on observations, and pushes each
/// latent belief through the observation model. Returns one (latent,
/// observation) belief pair per step.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    tape: &Tape,
    init: &Gaussian,
    us: &Matrix,
    f: &BoundTransition,
    g: &BoundObservation,
    q: &Var,
    r: &Var,
    jitter: f64,
) -> Result<Vec<(Gaussian, Gaussian)>> {
    let steps = us.rows();
    if steps == 0 {
        return Err(Error::Contract("rollout needs at least one input row".into()));
    }
    let mut out = Vec::with_capacity(steps);
    let mut belief = init.clone();
    for t in 0..steps {
        let u = tape.constant(Matrix::col_vec(us.row(t)));
        let (latent, _) = predict_step(&belief, &u, f, q, jitter)?;
        let (obs_mean, jac_c) = g.observe_with_jacobian(&latent.mean)?;
        let obs = pushforward_affine_with(&latent, &jac_c, &obs_mean, r, jitter)?;
        out.push((latent.clone(), obs));
        belief = latent;
    }
    Ok(out)
}
