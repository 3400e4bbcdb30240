//! Shared oracles and builders for the integration suites.
//!
//! The linear-Gaussian oracle here is deliberately independent of the
//! filtering code: it builds the full joint Gaussian over all latents
//! and observations by block construction and conditions it directly.

#![allow(dead_code)]

use neural_ekf::autodiff::Tape;
use neural_ekf::matrix::Matrix;
use neural_ekf::nn::{
    bind_layers, linear_params, BoundMlp, BoundObservation, BoundTransition, ObservationModel,
    TransitionModel,
};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// A random linear-Gaussian state-space system with diagonal noise.
pub struct LinearSystem {
    pub f: Matrix,
    pub b: Matrix,
    pub h: Matrix,
    pub q: Matrix,
    pub r: Matrix,
    pub mu0: Matrix,
    pub s0: Matrix,
}

impl LinearSystem {
    pub fn random(rng: &mut ChaCha8Rng, d_z: usize, d_u: usize, d_x: usize) -> Self {
        let mut f = random_matrix(rng, d_z, d_z, 1.0);
        // Scale to a contraction: the Frobenius norm bounds the spectral
        // norm, so this is conservatively stable.
        let norm = f.frobenius_norm();
        if norm > 0.9 {
            f = f.scale(0.9 / norm);
        }
        LinearSystem {
            f,
            b: random_matrix(rng, d_z, d_u, 1.0),
            h: random_matrix(rng, d_x, d_z, 1.0),
            q: Matrix::diag(
                &(0..d_z).map(|_| rng.random_range(0.02..0.3)).collect::<Vec<_>>(),
            ),
            r: Matrix::diag(
                &(0..d_x).map(|_| rng.random_range(0.02..0.3)).collect::<Vec<_>>(),
            ),
            mu0: random_matrix(rng, d_z, 1, 1.0),
            s0: Matrix::diag(
                &(0..d_z).map(|_| rng.random_range(0.2..1.0)).collect::<Vec<_>>(),
            ),
        }
    }

    pub fn d_z(&self) -> usize {
        self.f.rows()
    }

    pub fn d_x(&self) -> usize {
        self.h.rows()
    }

    /// Exact transition network f(z, u) = F z + B u on a tape.
    pub fn bound_transition(&self, tape: &Tape) -> BoundTransition {
        let (d_z, d_u) = (self.f.rows(), self.b.cols());
        let fb = Matrix::from_fn(d_z, d_z + d_u, |i, j| {
            if j < d_z {
                self.f.get(i, j)
            } else {
                self.b.get(i, j - d_z)
            }
        });
        let (cfg, layers) = linear_params(&fb, &Matrix::zeros(d_z, 1));
        let model = TransitionModel {
            net: cfg.clone(),
            residual: false,
            latent_dim: d_z,
            input_dim: d_u,
        };
        BoundTransition::new(&model, BoundMlp::new(&cfg, bind_layers(tape, &layers, false)))
    }

    /// Exact observation network g(z) = H z on a tape.
    pub fn bound_observation(&self, tape: &Tape) -> BoundObservation {
        let (cfg, layers) = linear_params(&self.h, &Matrix::zeros(self.h.rows(), 1));
        let model = ObservationModel {
            net: cfg.clone(),
            latent_dim: self.h.cols(),
            obs_dim: self.h.rows(),
        };
        BoundObservation::new(&model, BoundMlp::new(&cfg, bind_layers(tape, &layers, false)))
    }
}

/// Means and covariance blocks of the joint Gaussian over
/// (z_0..z_T, x_1..x_T) for a linear system driven by known inputs.
pub struct JointGaussian {
    d_z: usize,
    d_x: usize,
    steps: usize,
    mean_z: Vec<Matrix>,
    /// cov_z[i][j] = Cov(z_i, z_j) for i >= j (transpose for i < j).
    cov_z: Vec<Vec<Matrix>>,
}

impl JointGaussian {
    pub fn build(sys: &LinearSystem, us: &Matrix) -> Self {
        let steps = us.rows();
        let d_z = sys.d_z();
        let mut mean_z = vec![sys.mu0.clone()];
        for t in 0..steps {
            let u = Matrix::col_vec(us.row(t));
            let m = sys
                .f
                .matmul(&mean_z[t])
                .unwrap()
                .add(&sys.b.matmul(&u).unwrap())
                .unwrap();
            mean_z.push(m);
        }
        // Diagonal blocks by the covariance recursion, off-diagonals by
        // powers of F applied to the column block.
        let mut cov_z: Vec<Vec<Matrix>> = Vec::with_capacity(steps + 1);
        for i in 0..=steps {
            let mut row: Vec<Matrix> = Vec::with_capacity(i + 1);
            for j in 0..=i {
                let block = if i == 0 && j == 0 {
                    sys.s0.clone()
                } else if i == j {
                    let prev = &cov_z[i - 1][j - 1];
                    sys.f
                        .matmul(prev)
                        .unwrap()
                        .matmul(&sys.f.transpose())
                        .unwrap()
                        .add(&sys.q)
                        .unwrap()
                } else {
                    // Cov(z_i, z_j) = F Cov(z_{i-1}, z_j).
                    sys.f.matmul(&cov_z[i - 1][j]).unwrap()
                };
                row.push(block);
            }
            cov_z.push(row);
        }
        JointGaussian {
            d_z,
            d_x: sys.d_x(),
            steps,
            mean_z,
            cov_z,
        }
    }

    fn cov_zz(&self, i: usize, j: usize) -> Matrix {
        if i >= j {
            self.cov_z[i][j].clone()
        } else {
            self.cov_z[j][i].transpose()
        }
    }

    /// Exact posterior marginal of z_t given observations x_1..x_m.
    pub fn condition(
        &self,
        sys: &LinearSystem,
        xs: &Matrix,
        t: usize,
        m: usize,
    ) -> (Matrix, Matrix) {
        assert!(m >= 1 && m <= self.steps && t <= self.steps);
        let (d_z, d_x) = (self.d_z, self.d_x);
        let obs_dim = m * d_x;

        // Cov(x_s, x_r) = H Cov(z_s, z_r) H^T + delta R, s, r in 1..=m.
        let mut cov_xx = Matrix::zeros(obs_dim, obs_dim);
        let mut mean_x = Matrix::zeros(obs_dim, 1);
        for s in 1..=m {
            let mx = sys.h.matmul(&self.mean_z[s]).unwrap();
            for a in 0..d_x {
                mean_x.set((s - 1) * d_x + a, 0, mx.get(a, 0));
            }
            for r in 1..=m {
                let mut block = sys
                    .h
                    .matmul(&self.cov_zz(s, r))
                    .unwrap()
                    .matmul(&sys.h.transpose())
                    .unwrap();
                if s == r {
                    block = block.add(&sys.r).unwrap();
                }
                for a in 0..d_x {
                    for b in 0..d_x {
                        cov_xx.set((s - 1) * d_x + a, (r - 1) * d_x + b, block.get(a, b));
                    }
                }
            }
        }
        // Cov(z_t, x_r) = Cov(z_t, z_r) H^T.
        let mut cov_zx = Matrix::zeros(d_z, obs_dim);
        for r in 1..=m {
            let block = self.cov_zz(t, r).matmul(&sys.h.transpose()).unwrap();
            for a in 0..d_z {
                for b in 0..d_x {
                    cov_zx.set(a, (r - 1) * d_x + b, block.get(a, b));
                }
            }
        }
        let mut x_obs = Matrix::zeros(obs_dim, 1);
        for s in 1..=m {
            for a in 0..d_x {
                x_obs.set((s - 1) * d_x + a, 0, xs.get(s - 1, a));
            }
        }

        let resid = x_obs.sub(&mean_x).unwrap();
        let cov_xx_sym = cov_xx.symmetrize();
        let solved_resid = cov_xx_sym.solve_spd(&resid).unwrap();
        let mean = self.mean_z[t].add(&cov_zx.matmul(&solved_resid).unwrap()).unwrap();
        let solved_cross = cov_xx_sym.solve_spd(&cov_zx.transpose()).unwrap();
        let cov = self
            .cov_zz(t, t)
            .sub(&cov_zx.matmul(&solved_cross).unwrap())
            .unwrap()
            .symmetrize();
        (mean, cov)
    }
}
