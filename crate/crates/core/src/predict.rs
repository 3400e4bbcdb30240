//! Response prediction with a trained model. Rollout mode infers the
//! initial latent belief by filtering and smoothing the trajectory, then
//! predicts open-loop from the smoothed initial state; filtered and
//! smoothed modes report the observation pushforward of the respective
//! posteriors.

use crate::autodiff::Tape;
use crate::data::Trajectory;
use crate::ekf::{filter, rollout, rts_smooth};
use crate::error::Result;
use crate::gaussian::{pushforward_affine_with, Gaussian, DEFAULT_JITTER};
use crate::matrix::Matrix;
use crate::model::NeuralEkf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// Open-loop generative prediction from the smoothed initial belief.
    Rollout,
    /// Observation pushforward of the filtered posteriors.
    Filtered,
    /// Observation pushforward of the smoothed posteriors.
    Smoothed,
}

impl PredictMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rollout" => Some(PredictMode::Rollout),
            "filtered" => Some(PredictMode::Filtered),
            "smoothed" => Some(PredictMode::Smoothed),
            _ => None,
        }
    }
}

/// Predicted observations for one trajectory: per-step mean and
/// per-channel variance, in the units the model was trained in.
pub struct Prediction {
    pub mean: Matrix,
    pub variance: Matrix,
}

/// Runs one trajectory through the trained model. The trajectory must
/// already be in model scale (standardized if the model was trained on
/// standardized data).
pub fn predict(model: &NeuralEkf, traj: &Trajectory, mode: PredictMode) -> Result<Prediction> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false)?;
    let steps = traj.len();
    let d_x = model.cfg.obs_dim;

    let observation_beliefs: Vec<Gaussian> = match mode {
        PredictMode::Rollout => {
            let trace = filter(
                &tape,
                &traj.u,
                &traj.x,
                &bound.transition,
                &bound.observation,
                &bound.q,
                &bound.r,
                &bound.init,
                DEFAULT_JITTER,
            )?;
            let smoothed = rts_smooth(&trace, DEFAULT_JITTER)?;
            let rolled = rollout(
                &tape,
                &smoothed.smoothed[0],
                &traj.u,
                &bound.transition,
                &bound.observation,
                &bound.q,
                &bound.r,
                DEFAULT_JITTER,
            )?;
            rolled.into_iter().map(|(_, obs)| obs).collect()
        }
        PredictMode::Filtered | PredictMode::Smoothed => {
            let trace = filter(
                &tape,
                &traj.u,
                &traj.x,
                &bound.transition,
                &bound.observation,
                &bound.q,
                &bound.r,
                &bound.init,
                DEFAULT_JITTER,
            )?;
            let latents: Vec<Gaussian> = match mode {
                PredictMode::Filtered => trace.filtered.clone(),
                _ => {
                    let smoothed = rts_smooth(&trace, DEFAULT_JITTER)?;
                    smoothed.smoothed[1..].to_vec()
                }
            };
            let mut out = Vec::with_capacity(latents.len());
            for latent in &latents {
                let (obs_mean, jac_c) = bound.observation.observe_with_jacobian(&latent.mean)?;
                out.push(pushforward_affine_with(
                    latent,
                    &jac_c,
                    &obs_mean,
                    &bound.r,
                    DEFAULT_JITTER,
                )?);
            }
            out
        }
    };

    let mut mean = Matrix::zeros(steps, d_x);
    let mut variance = Matrix::zeros(steps, d_x);
    for (t, obs) in observation_beliefs.iter().enumerate() {
        let m = obs.mean.value();
        let c = obs.cov.value();
        for j in 0..d_x {
            mean.set(t, j, m.get(j, 0));
            variance.set(t, j, c.get(j, j));
        }
    }
    Ok(Prediction { mean, variance })
}
