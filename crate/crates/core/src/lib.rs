//! Learnable extended Kalman filtering for dynamical systems.
//!
//! The toolkit learns neural transition and observation models end-to-end
//! by differentiating through an extended Kalman filter and RTS smoother,
//! maximizing a closed-form Gaussian evidence lower bound with a replay
//! overshooting term. Around that core it provides a Duffing-oscillator
//! simulator, signal preprocessing, open-loop response prediction, and an
//! RMSE / PCA / k-means anomaly analysis pipeline.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod ekf;
pub mod elbo;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod matrix;
pub mod model;
pub mod nn;
pub mod predict;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use matrix::Matrix;
