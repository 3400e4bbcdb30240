//! Finite-difference verification that gradients flow correctly through
//! the entire filter -> smoother -> objective pipeline, for every
//! parameter class: network weights and biases, noise log-variances, and
//! the initial belief.

mod support;

use neural_ekf::autodiff::Tape;
use neural_ekf::elbo::total_loss;
use neural_ekf::gaussian::DEFAULT_JITTER;
use neural_ekf::matrix::Matrix;
use neural_ekf::model::{ModelConfig, NeuralEkf};

fn objective(model: &NeuralEkf, us: &Matrix, xs: &Matrix, alpha: f64) -> f64 {
    let tape = Tape::new();
    let bound = model.bind(&tape, false).unwrap();
    total_loss(
        &tape,
        us,
        xs,
        &bound.transition,
        &bound.observation,
        &bound.q,
        &bound.r,
        &bound.init,
        alpha,
        DEFAULT_JITTER,
    )
    .unwrap()
    .total
    .scalar_value()
}

/// Central finite differences over every scalar parameter, compared to
/// one reverse pass. Returns (checked, worst relative error).
fn check_all_parameters(
    model: &NeuralEkf,
    us: &Matrix,
    xs: &Matrix,
    alpha: f64,
    step: f64,
    grad_floor: f64,
    tol: f64,
) -> (usize, f64) {
    let tape = Tape::new();
    let bound = model.bind(&tape, true).unwrap();
    let loss = total_loss(
        &tape,
        us,
        xs,
        &bound.transition,
        &bound.observation,
        &bound.q,
        &bound.r,
        &bound.init,
        alpha,
        DEFAULT_JITTER,
    )
    .unwrap();
    tape.backward(&loss.total).unwrap();
    let grads = bound.gradients();

    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for id in 0..model.params.len() {
        let shape = (model.params.value(id).rows(), model.params.value(id).cols());
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let analytic = grads[id].get(i, j);
                if analytic.abs() < grad_floor {
                    continue;
                }
                let mut perturbed = model.clone();
                let base = perturbed.params.value(id).get(i, j);
                let mut central = |h: f64| {
                    perturbed.params.value_mut(id).set(i, j, base + h);
                    let up = objective(&perturbed, us, xs, alpha);
                    perturbed.params.value_mut(id).set(i, j, base - h);
                    let down = objective(&perturbed, us, xs, alpha);
                    perturbed.params.value_mut(id).set(i, j, base);
                    (up - down) / (2.0 * h)
                };
                // Richardson extrapolation of the central difference
                // kills the O(h^2) truncation term, which matters in the
                // strongly curved small-noise regions of the objective.
                let fd = (4.0 * central(step / 2.0) - central(step)) / 3.0;
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
                assert!(
                    rel <= tol,
                    "{} [{i},{j}]: analytic {analytic:.6e} vs fd {fd:.6e} (rel {rel:.3e})",
                    model.params.name(id)
                );
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    (checked, worst)
}

#[test]
fn objective_gradient_matches_finite_differences_on_two_latent_model() {
    // 2-latent, T = 5 model: every parameter, relative error <= 1e-4.
    let cfg = ModelConfig {
        latent_dim: 2,
        input_dim: 1,
        obs_dim: 1,
        hidden: vec![6],
        residual: true,
    };
    let model = NeuralEkf::new(cfg, 71).unwrap();
    let steps = 5;
    let us = Matrix::from_fn(steps, 1, |t, _| 0.4 * (t as f64 * 0.9).sin());
    let xs = Matrix::from_fn(steps, 1, |t, _| 0.7 * (t as f64 * 0.6).cos());

    let (checked, worst) = check_all_parameters(&model, &us, &xs, 0.5, 1e-4, 1e-8, 1e-4);
    assert!(checked > 50, "only {checked} parameters checked");
    eprintln!("checked {checked} parameters, worst relative error {worst:.3e}");
}

#[test]
fn gradients_reach_every_parameter_class() {
    let cfg = ModelConfig {
        latent_dim: 2,
        input_dim: 1,
        obs_dim: 2,
        hidden: vec![4],
        residual: true,
    };
    let model = NeuralEkf::new(cfg, 5).unwrap();
    let steps = 6;
    let us = Matrix::from_fn(steps, 1, |t, _| 0.3 * (t as f64).sin());
    let xs = Matrix::from_fn(steps, 2, |t, j| 0.5 * ((t + j) as f64 * 0.8).cos());

    let tape = Tape::new();
    let bound = model.bind(&tape, true).unwrap();
    let loss = total_loss(
        &tape,
        &us,
        &xs,
        &bound.transition,
        &bound.observation,
        &bound.q,
        &bound.r,
        &bound.init,
        0.5,
        DEFAULT_JITTER,
    )
    .unwrap();
    tape.backward(&loss.total).unwrap();
    let grads = bound.gradients();
    for id in 0..model.params.len() {
        assert!(
            grads[id].frobenius_norm() > 0.0,
            "no gradient reached {}",
            model.params.name(id)
        );
    }
}
