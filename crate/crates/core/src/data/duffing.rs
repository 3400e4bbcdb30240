//! Synthetic data: an n-DOF oscillator with a cubic stiffness term on
//! the first coordinate, integrated with fixed-step classical RK4.
//!
//! The second-order system M xdd + C xd + K x + k_n x_1^3 e_1 = u(t) is
//! integrated in first-order form over the state [x; xd]. Displacements
//! are recorded as the observations; the applied force per DOF is the
//! input channel.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::{TimeSeriesDataset, Trajectory};

const DIVERGENCE_LIMIT: f64 = 1e6;

/// Forcing applied during simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum Forcing {
    /// Free vibration: zero input (the input channels are kept, zeroed).
    Free,
    /// Zero-order-hold Gaussian noise per DOF, refreshed every step.
    Random { std: f64 },
}

/// Oscillator and integration configuration.
#[derive(Debug, Clone)]
pub struct DuffingConfig {
    pub mass: Matrix,
    pub stiffness: Matrix,
    pub damping: Matrix,
    /// Cubic stiffness coefficient, applied to the first coordinate.
    pub cubic_coeff: f64,
    pub dt: f64,
    pub steps: usize,
    pub forcing: Forcing,
    pub seed: u64,
    /// Mirror the upper triangle of the stiffness matrix onto the lower
    /// one before simulating. The default stiffness has an antisymmetric
    /// off-diagonal sign pattern; this flag selects the symmetric
    /// variant instead.
    pub symmetric_stiffness: bool,
    /// Initial conditions are drawn uniformly from
    /// [-init_amplitude, init_amplitude] per state component.
    pub init_amplitude: f64,
}

impl Default for DuffingConfig {
    fn default() -> Self {
        DuffingConfig {
            mass: Matrix::identity(2),
            stiffness: Matrix::from_rows(2, 2, &[4.0, -0.5, 0.5, 4.0]),
            damping: Matrix::identity(2).scale(0.5),
            cubic_coeff: 1.0,
            dt: 0.01,
            steps: 500,
            forcing: Forcing::Random { std: 1.0 },
            seed: 0,
            symmetric_stiffness: false,
            init_amplitude: 1.0,
        }
    }
}

impl DuffingConfig {
    pub fn dof(&self) -> usize {
        self.mass.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dof();
        if self.mass.cols() != n
            || self.stiffness.rows() != n
            || self.stiffness.cols() != n
            || self.damping.rows() != n
            || self.damping.cols() != n
        {
            return Err(Error::Contract(
                "mass, stiffness and damping matrices must share one square shape".into(),
            ));
        }
        if self.dt <= 0.0 {
            return Err(Error::Contract("dt must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Contract("need at least one step".into()));
        }
        if invert(&self.mass).is_err() {
            return Err(Error::Contract("mass matrix is singular".into()));
        }
        Ok(())
    }

    fn effective_stiffness(&self) -> Matrix {
        if self.symmetric_stiffness {
            let k = &self.stiffness;
            Matrix::from_fn(k.rows(), k.cols(), |i, j| {
                if i > j {
                    k.get(j, i)
                } else {
                    k.get(i, j)
                }
            })
        } else {
            self.stiffness.clone()
        }
    }
}

/// One classical four-stage Runge-Kutta step.
pub fn rk4_step(
    state: &[f64],
    t: f64,
    dt: f64,
    deriv: &mut dyn FnMut(f64, &[f64], &mut [f64]),
) -> Vec<f64> {
    let n = state.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    deriv(t, state, &mut k1);
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * dt * k1[i];
    }
    deriv(t + 0.5 * dt, &tmp, &mut k2);
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * dt * k2[i];
    }
    deriv(t + 0.5 * dt, &tmp, &mut k3);
    for i in 0..n {
        tmp[i] = state[i] + dt * k3[i];
    }
    deriv(t + dt, &tmp, &mut k4);

    (0..n)
        .map(|i| state[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Simulates `n` trajectories. Initial conditions and forcing are drawn
/// from a generator seeded by the config, so identical configs produce
/// bit-identical datasets.
pub fn simulate_duffing(cfg: &DuffingConfig, n: usize) -> Result<TimeSeriesDataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Contract("need at least one trajectory".into()));
    }
    let dof = cfg.dof();
    let m_inv = invert(&cfg.mass)?;
    let k = cfg.effective_stiffness();
    let c = &cfg.damping;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut trajectories = Vec::with_capacity(n);
    for traj_idx in 0..n {
        let mut state: Vec<f64> = (0..2 * dof)
            .map(|_| {
                if cfg.init_amplitude == 0.0 {
                    0.0
                } else {
                    rng.random_range(-cfg.init_amplitude..cfg.init_amplitude)
                }
            })
            .collect();
        let mut u = Matrix::zeros(cfg.steps, dof);
        let mut x = Matrix::zeros(cfg.steps, dof);

        for step in 0..cfg.steps {
            let force: Vec<f64> = match &cfg.forcing {
                Forcing::Free => vec![0.0; dof],
                Forcing::Random { std } => (0..dof).map(|_| std * normal(&mut rng)).collect(),
            };
            let mut deriv = |_t: f64, s: &[f64], out: &mut [f64]| {
                // xdot = v; vdot = M^{-1} (u - K x - C v - k_n x_1^3 e_1).
                for i in 0..dof {
                    out[i] = s[dof + i];
                }
                for i in 0..dof {
                    let mut rhs = force[i];
                    for j in 0..dof {
                        rhs -= k.get(i, j) * s[j] + c.get(i, j) * s[dof + j];
                    }
                    if i == 0 {
                        rhs -= cfg.cubic_coeff * s[0] * s[0] * s[0];
                    }
                    // Row i of M^{-1} applied lazily below; stash rhs.
                    out[dof + i] = rhs;
                }
                // Apply M^{-1} to the acceleration block.
                let accel: Vec<f64> = (0..dof)
                    .map(|i| {
                        (0..dof)
                            .map(|j| m_inv.get(i, j) * out[dof + j])
                            .sum::<f64>()
                    })
                    .collect();
                out[dof..].copy_from_slice(&accel);
            };
            state = rk4_step(&state, step as f64 * cfg.dt, cfg.dt, &mut deriv);
            if state.iter().any(|v| v.abs() > DIVERGENCE_LIMIT || !v.is_finite()) {
                return Err(Error::SimulationDiverged {
                    trajectory: traj_idx,
                    step,
                    limit: DIVERGENCE_LIMIT,
                });
            }
            for i in 0..dof {
                u.set(step, i, force[i]);
                x.set(step, i, state[i]);
            }
        }
        trajectories.push(Trajectory {
            u,
            x,
            source: format!("sim{traj_idx}"),
        });
    }

    Ok(TimeSeriesDataset {
        trajectories,
        sample_rate_hz: 1.0 / cfg.dt,
        input_names: (1..=dof).map(|i| format!("u{i}")).collect(),
        output_names: (1..=dof).map(|i| format!("x{i}")).collect(),
        normalization: None,
        provenance: vec![format!(
            "simulate n={n} dof={dof} dt={} steps={} forcing={:?} seed={} k_n={} symmetric_k={} init_amplitude={}",
            cfg.dt,
            cfg.steps,
            cfg.forcing,
            cfg.seed,
            cfg.cubic_coeff,
            cfg.symmetric_stiffness,
            cfg.init_amplitude
        )],
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Gauss-Jordan inverse with partial pivoting, for the small mass matrix.
fn invert(m: &Matrix) -> Result<Matrix> {
    let n = m.rows();
    let mut a = m.clone();
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| {
                a.get(i, col)
                    .abs()
                    .partial_cmp(&a.get(j, col).abs())
                    .expect("finite")
            })
            .expect("non-empty range");
        if a.get(pivot_row, col).abs() < 1e-12 {
            return Err(Error::Contract("matrix is singular".into()));
        }
        if pivot_row != col {
            for j in 0..n {
                let (x, y) = (a.get(col, j), a.get(pivot_row, j));
                a.set(col, j, y);
                a.set(pivot_row, j, x);
                let (x, y) = (inv.get(col, j), inv.get(pivot_row, j));
                inv.set(col, j, y);
                inv.set(pivot_row, j, x);
            }
        }
        let pivot = a.get(col, col);
        for j in 0..n {
            a.set(col, j, a.get(col, j) / pivot);
            inv.set(col, j, inv.get(col, j) / pivot);
        }
        for i in 0..n {
            if i != col {
                let factor = a.get(i, col);
                for j in 0..n {
                    a.set(i, j, a.get(i, j) - factor * a.get(col, j));
                    inv.set(i, j, inv.get(i, j) - factor * inv.get(col, j));
                }
            }
        }
    }
    Ok(inv)
}
