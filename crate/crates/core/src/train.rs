//! Batched stochastic-gradient training of the full parameter set:
//! network weights, noise covariances, and the initial belief. The
//! objective is maximized by minimizing its negation, so every logged
//! "loss" is the negated objective.
//!
//! Per-trajectory losses and gradients inside a batch are evaluated
//! concurrently on independent tapes; gradients are merged by summation
//! in batch order (then averaged), so results are bit-identical
//! regardless of thread scheduling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::TimeSeriesDataset;
use crate::elbo::total_loss;
use crate::error::{Error, Result};
use crate::gaussian::DEFAULT_JITTER;
use crate::matrix::Matrix;
use crate::model::{NeuralEkf, ParamStore};

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight between the smoothed reconstruction and the overshoot
    /// reconstruction.
    pub alpha: f64,
    pub seed: u64,
    /// Global gradient-norm cap.
    pub gradient_clip: f64,
    /// Checkpoint every n epochs (0 = only on completion; the caller
    /// decides what "checkpoint" means through the epoch callback).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            alpha: 0.5,
            seed: 0,
            gradient_clip: 10.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Contract("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Contract(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Contract(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// First and second Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn for_params(params: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = (0..params.len())
            .map(|id| {
                let p = params.value(id);
                Matrix::zeros(p.rows(), p.cols())
            })
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam update with bias correction over every parameter tensor.
pub fn adam_step(params: &mut ParamStore, grads: &[Matrix], state: &mut AdamState, lr: f64) {
    assert_eq!(grads.len(), params.len(), "gradient count mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    for id in 0..params.len() {
        let g = &grads[id];
        let m = &mut state.m[id];
        let v = &mut state.v[id];
        let p = params.value_mut(id);
        for k in 0..g.data().len() {
            let gd = g.data()[k];
            m.data_mut()[k] = ADAM_BETA1 * m.data()[k] + (1.0 - ADAM_BETA1) * gd;
            v.data_mut()[k] = ADAM_BETA2 * v.data()[k] + (1.0 - ADAM_BETA2) * gd * gd;
            let m_hat = m.data()[k] / bias1;
            let v_hat = v.data()[k] / bias2;
            p.data_mut()[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Scales gradients in place so the global Frobenius norm does not
/// exceed `max_norm`. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
    norm
}

/// Per-epoch means over every trajectory visited in the epoch. `loss`
/// is the negated objective; the three terms are reported raw.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub overshoot: f64,
    pub kl: f64,
}

impl EpochStats {
    /// One comma-separated log line; see [`log_header`].
    pub fn log_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.loss, self.reconstruction, self.overshoot, self.kl
        )
    }
}

/// Header for the per-epoch training log.
pub fn log_header() -> &'static str {
    "epoch,loss,reconstruction,overshoot,kl"
}

/// Everything training evolves: the model, optimizer moments, epoch
/// counter, and loss history. Checkpoints serialize exactly this.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: NeuralEkf,
    pub adam: AdamState,
    /// Completed epochs (training resumes after this epoch).
    pub epoch: usize,
    pub history: Vec<EpochStats>,
    /// Resolved configuration echo persisted alongside checkpoints.
    pub config_echo: String,
    /// Standardization record of the training data, if any, so
    /// predictions on new data can use the training statistics.
    pub normalization: Option<crate::data::Normalization>,
}

impl TrainState {
    pub fn new(model: NeuralEkf) -> Self {
        let adam = AdamState::for_params(&model.params);
        TrainState {
            model,
            adam,
            epoch: 0,
            history: Vec::new(),
            config_echo: String::new(),
            normalization: None,
        }
    }
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    // Per-epoch stream: a resumed run shuffles exactly like the
    // continuous one.
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Worker cap: NEURAL_EKF_THREADS if set, otherwise the machine cores.
pub fn worker_count() -> usize {
    if let Ok(v) = std::env::var("NEURAL_EKF_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

struct MemberResult {
    total: f64,
    reconstruction: f64,
    overshoot: f64,
    kl: f64,
    grads: Vec<Matrix>,
}

fn evaluate_member(
    model: &NeuralEkf,
    dataset: &TimeSeriesDataset,
    idx: usize,
    alpha: f64,
) -> Result<MemberResult> {
    let tape = Tape::new();
    let bound = model.bind(&tape, true)?;
    let traj = &dataset.trajectories[idx];
    let loss = total_loss(
        &tape,
        &traj.u,
        &traj.x,
        &bound.transition,
        &bound.observation,
        &bound.q,
        &bound.r,
        &bound.init,
        alpha,
        DEFAULT_JITTER,
    )?;
    // Gradients of the minimized quantity -L.
    tape.backward(&loss.total.neg())?;
    Ok(MemberResult {
        total: loss.total.scalar_value(),
        reconstruction: loss.reconstruction.scalar_value(),
        overshoot: loss.overshoot.scalar_value(),
        kl: loss.kl.scalar_value(),
        grads: bound.gradients(),
    })
}

/// Evaluates a closure over items on up to `workers` scoped threads,
/// returning results in item order.
pub fn parallel_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let mut slots: Vec<Option<R>> = Vec::with_capacity(n);
    slots.resize_with(n, || None);
    let work: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let queue = std::sync::Mutex::new(work);
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let item = queue.lock().expect("queue lock").pop();
                let Some((idx, item)) = item else { break };
                let r = f(item);
                results.lock().expect("result lock")[idx] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("worker filled slot")).collect()
}

/// Runs epochs `state.epoch + 1 ..= cfg.epochs` over the dataset. The
/// callback fires after every completed epoch (logging, checkpoints).
pub fn train(
    state: &mut TrainState,
    dataset: &TimeSeriesDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState, &EpochStats) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    dataset.validate()?;
    if dataset.input_dim() != state.model.cfg.input_dim
        || dataset.output_dim() != state.model.cfg.obs_dim
    {
        return Err(Error::Contract(format!(
            "dataset dims (u:{}, x:{}) do not match the model (u:{}, x:{})",
            dataset.input_dim(),
            dataset.output_dim(),
            state.model.cfg.input_dim,
            state.model.cfg.obs_dim
        )));
    }
    let workers = worker_count();

    for epoch in (state.epoch + 1)..=cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed(cfg.seed, epoch));
        order.shuffle(&mut rng);

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = parallel_map(batch.to_vec(), workers, |idx| {
                evaluate_member(&state.model, dataset, idx, cfg.alpha)
            });
            let mut merged: Option<Vec<Matrix>> = None;
            let mut batch_count = 0usize;
            for result in results {
                let member = result?;
                if !member.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        param_norms: param_norms(&state.model.params),
                    });
                }
                sums.0 += -member.total;
                sums.1 += member.reconstruction;
                sums.2 += member.overshoot;
                sums.3 += member.kl;
                batch_count += 1;
                merged = Some(match merged {
                    None => member.grads,
                    Some(mut acc) => {
                        for (a, g) in acc.iter_mut().zip(&member.grads) {
                            *a = a.add(g)?;
                        }
                        acc
                    }
                });
            }
            let mut grads = merged.expect("non-empty batch");
            // Per-sequence losses are averaged across the batch.
            let scale = 1.0 / batch_count as f64;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            clip_gradients(&mut grads, cfg.gradient_clip);
            adam_step(&mut state.model.params, &grads, &mut state.adam, cfg.learning_rate);
            debug_assert!(noise_params_are_positive(&state.model));
        }

        let n = dataset.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: sums.0 / n,
            reconstruction: sums.1 / n,
            overshoot: sums.2 / n,
            kl: sums.3 / n,
        };
        state.epoch = epoch;
        state.history.push(stats.clone());
        on_epoch(state, &stats)?;
    }
    Ok(())
}

/// Mean negated objective over a dataset with the current parameters
/// (no gradient work). Used for held-out evaluation.
pub fn evaluate_loss(model: &NeuralEkf, dataset: &TimeSeriesDataset, alpha: f64) -> Result<f64> {
    dataset.validate()?;
    let mut sum = 0.0;
    for traj in &dataset.trajectories {
        let tape = Tape::new();
        let bound = model.bind(&tape, false)?;
        let loss = total_loss(
            &tape,
            &traj.u,
            &traj.x,
            &bound.transition,
            &bound.observation,
            &bound.q,
            &bound.r,
            &bound.init,
            alpha,
            DEFAULT_JITTER,
        )?;
        sum += -loss.total.scalar_value();
    }
    Ok(sum / dataset.len() as f64)
}

fn param_norms(params: &ParamStore) -> String {
    let mut parts: Vec<String> = Vec::new();
    for (name, value) in params.iter() {
        parts.push(format!("{name}={:.3e}", value.frobenius_norm()));
    }
    parts.join(", ")
}

fn noise_params_are_positive(model: &NeuralEkf) -> bool {
    [crate::model::PROCESS_NOISE_LOGVAR, crate::model::OBS_NOISE_LOGVAR]
        .iter()
        .all(|name| {
            model
                .params
                .get(name)
                .map(|v| v.data().iter().all(|x| x.is_finite() && x.exp() > 0.0))
                .unwrap_or(false)
        })
}
