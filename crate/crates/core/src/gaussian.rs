//! Multivariate Gaussian beliefs and the closed-form quantities the
//! training objective is assembled from: log-probability, KL divergence,
//! and affine pushforward, plus positive-definite covariance handling.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Default diagonal jitter added by [`sanitize`].
pub const DEFAULT_JITTER: f64 = 1e-6;

/// A Gaussian belief with differentiable mean (d x 1) and covariance
/// (d x d). Values are immutable once constructed; handles are cheap to
/// clone and safe to share read-only.
#[derive(Clone)]
pub struct Gaussian {
    pub mean: Var,
    pub cov: Var,
}

impl Gaussian {
    pub fn new(mean: Var, cov: Var) -> Result<Self> {
        if mean.cols() != 1 || cov.rows() != cov.cols() || cov.rows() != mean.rows() {
            return Err(Error::ShapeMismatch {
                op: "gaussian",
                lhs_rows: mean.rows(),
                lhs_cols: mean.cols(),
                rhs_rows: cov.rows(),
                rhs_cols: cov.cols(),
            });
        }
        Ok(Gaussian { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.rows()
    }
}

/// log N(x; mean, cov) in closed form:
/// -0.5 [ log|cov| + (x - mean)^T cov^{-1} (x - mean) + d log 2pi ].
/// Differentiable with respect to the mean, the covariance, and `x`.
pub fn log_prob(g: &Gaussian, x: &Var) -> Result<Var> {
    if x.rows() != g.dim() || x.cols() != 1 {
        return Err(Error::ShapeMismatch {
            op: "log_prob",
            lhs_rows: g.dim(),
            lhs_cols: 1,
            rhs_rows: x.rows(),
            rhs_cols: x.cols(),
        });
    }
    let d = g.dim() as f64;
    let resid = x.sub(&g.mean)?;
    let quad = g.cov.inv_quad_form(&resid)?;
    let log_det = g.cov.log_det_spd()?;
    Ok(log_det.add(&quad)?.add_scalar(d * LN_2PI).scale(-0.5))
}

/// KL(q || p) for Gaussians, in the analytical form
/// 0.5 [ log(|cov_p| / |cov_q|) - d + Tr(cov_p^{-1} cov_q)
///       + (mean_p - mean_q)^T cov_p^{-1} (mean_p - mean_q) ].
pub fn kl_divergence(q: &Gaussian, p: &Gaussian) -> Result<Var> {
    if q.dim() != p.dim() {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            lhs_rows: q.dim(),
            lhs_cols: q.dim(),
            rhs_rows: p.dim(),
            rhs_cols: p.dim(),
        });
    }
    let d = q.dim() as f64;
    let log_det_p = p.cov.log_det_spd()?;
    let log_det_q = q.cov.log_det_spd()?;
    let trace_term = p.cov.solve_spd(&q.cov)?.trace();
    let mean_diff = p.mean.sub(&q.mean)?;
    let quad = p.cov.inv_quad_form(&mean_diff)?;
    Ok(log_det_p
        .sub(&log_det_q)?
        .add(&trace_term)?
        .add(&quad)?
        .add_scalar(-d)
        .scale(0.5))
}

/// Pushes a Gaussian through a linearized map: the result is
/// N(new_mean, jac cov jac^T + noise_cov), with the covariance sanitized.
pub fn pushforward_affine(
    g: &Gaussian,
    jac: &Var,
    new_mean: &Var,
    noise_cov: &Var,
) -> Result<Gaussian> {
    pushforward_affine_with(g, jac, new_mean, noise_cov, DEFAULT_JITTER)
}

/// [`pushforward_affine`] with an explicit jitter, for pipelines that need
/// exact covariance algebra (the linear-equivalence checks run at zero).
pub fn pushforward_affine_with(
    g: &Gaussian,
    jac: &Var,
    new_mean: &Var,
    noise_cov: &Var,
    jitter: f64,
) -> Result<Gaussian> {
    if jac.cols() != g.dim() {
        return Err(Error::ShapeMismatch {
            op: "pushforward_affine",
            lhs_rows: jac.rows(),
            lhs_cols: jac.cols(),
            rhs_rows: g.dim(),
            rhs_cols: g.dim(),
        });
    }
    let propagated = jac.matmul(&g.cov)?.matmul(&jac.transpose())?;
    let cov = sanitize_with(&propagated.add(noise_cov)?, jitter)?;
    Gaussian::new(new_mean.clone(), cov)
}

/// Repairs a covariance candidate: 0.5 (S + S^T) + eps I with eps = 1e-6.
/// The result passes a Cholesky factorization whenever the symmetric part
/// has minimum eigenvalue above -eps.
pub fn sanitize(cov: &Var) -> Result<Var> {
    sanitize_with(cov, DEFAULT_JITTER)
}

/// [`sanitize`] with an explicit jitter; `eps = 0` only symmetrizes.
pub fn sanitize_with(cov: &Var, eps: f64) -> Result<Var> {
    if cov.rows() != cov.cols() {
        return Err(Error::Contract(format!(
            "sanitize requires a square matrix, got {}x{}",
            cov.rows(),
            cov.cols()
        )));
    }
    let sym = cov.add(&cov.transpose())?.scale(0.5);
    if eps == 0.0 {
        return Ok(sym);
    }
    let jitter = cov.tape().constant(Matrix::identity(cov.rows()).scale(eps));
    sym.add(&jitter)
}

/// Learnable diagonal covariance stored as per-dimension log-variances,
/// so the materialized matrix is positive definite by construction. This
/// is how the process noise, observation noise, and initial covariance
/// are parameterized.
#[derive(Debug, Clone)]
pub struct CovarianceParam {
    log_diag: Matrix,
}

impl CovarianceParam {
    /// All dimensions share one initial variance.
    pub fn isotropic(dim: usize, variance: f64) -> Self {
        assert!(variance > 0.0, "variance must be positive");
        CovarianceParam {
            log_diag: Matrix::from_fn(dim, 1, |_, _| variance.ln()),
        }
    }

    pub fn from_log_diag(log_diag: Matrix) -> Self {
        assert_eq!(log_diag.cols(), 1, "log-diagonal must be a column vector");
        CovarianceParam { log_diag }
    }

    pub fn dim(&self) -> usize {
        self.log_diag.rows()
    }

    pub fn log_diag(&self) -> &Matrix {
        &self.log_diag
    }

    /// Materializes diag(exp(log_diag)) from an on-tape log-diagonal leaf.
    pub fn materialize(log_diag: &Var) -> Result<Var> {
        log_diag.exp().diag_embed()
    }
}

/// Convenience: lifts a plain mean/covariance pair onto a tape as
/// constants (no gradients flow into them).
pub fn constant_gaussian(tape: &Tape, mean: &Matrix, cov: &Matrix) -> Result<Gaussian> {
    Gaussian::new(tape.constant(mean.clone()), tape.constant(cov.clone()))
}
