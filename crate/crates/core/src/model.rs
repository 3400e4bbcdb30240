//! The full learnable model: transition and observation networks, noise
//! covariances, and the initial belief, all held in a named parameter
//! store so the optimizer and checkpointing can treat them uniformly.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gaussian::{CovarianceParam, Gaussian};
use crate::matrix::Matrix;
use crate::nn::{
    init_params, BoundMlp, BoundObservation, BoundTransition, ObservationModel, TransitionModel,
};

/// Shape of the learnable system.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Latent state dimension; twice the degrees of freedom of the
    /// modeled system is the standard choice.
    pub latent_dim: usize,
    /// Control/forcing input dimension.
    pub input_dim: usize,
    /// Observation dimension.
    pub obs_dim: usize,
    /// Hidden layer widths shared by both networks.
    pub hidden: Vec<usize>,
    /// Residual transition: the network output is added to z.
    pub residual: bool,
}

impl ModelConfig {
    pub fn new(latent_dim: usize, input_dim: usize, obs_dim: usize) -> Self {
        ModelConfig {
            latent_dim,
            input_dim,
            obs_dim,
            hidden: vec![64, 64, 64],
            residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.obs_dim == 0 {
            return Err(Error::Contract(
                "latent and observation dimensions must be at least 1".into(),
            ));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Contract("hidden widths must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// Ordered, named collection of parameter tensors. Iteration order is
/// the registration order and is stable, which keeps gradient merging,
/// optimizer state, and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: usize) -> &Matrix {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Matrix {
        &mut self.values[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.id_of(name).map(|id| &self.values[id])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.rows() * m.cols()).sum()
    }
}

/// Learnable system: networks plus noise and initial-belief parameters.
#[derive(Debug, Clone)]
pub struct NeuralEkf {
    pub cfg: ModelConfig,
    pub transition: TransitionModel,
    pub observation: ObservationModel,
    pub params: ParamStore,
}

/// Names of the non-network parameters in the store.
pub const INIT_MEAN: &str = "init.mean";
pub const INIT_LOGVAR: &str = "init.logvar";
pub const PROCESS_NOISE_LOGVAR: &str = "noise.q_logvar";
pub const OBS_NOISE_LOGVAR: &str = "noise.r_logvar";

/// Initial log-variances: moderate noise, broad initial belief.
const INIT_NOISE_VARIANCE: f64 = 1e-2;
const INIT_BELIEF_VARIANCE: f64 = 1.0;

impl NeuralEkf {
    /// Builds a model with Xavier-initialized networks (deterministic
    /// under the seed), zero initial mean, and default log-variances.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let transition =
            TransitionModel::new(cfg.latent_dim, cfg.input_dim, cfg.hidden.clone(), cfg.residual);
        let observation = ObservationModel::new(cfg.latent_dim, cfg.obs_dim, cfg.hidden.clone());

        let mut params = ParamStore::new();
        for (i, (w, b)) in init_params(&transition.net, seed)?.into_iter().enumerate() {
            params.insert(format!("f.layer{i}.weight"), w);
            params.insert(format!("f.layer{i}.bias"), b);
        }
        for (i, (w, b)) in init_params(&observation.net, seed.wrapping_add(1))?
            .into_iter()
            .enumerate()
        {
            params.insert(format!("g.layer{i}.weight"), w);
            params.insert(format!("g.layer{i}.bias"), b);
        }
        params.insert(INIT_MEAN, Matrix::zeros(cfg.latent_dim, 1));
        params.insert(
            INIT_LOGVAR,
            CovarianceParam::isotropic(cfg.latent_dim, INIT_BELIEF_VARIANCE)
                .log_diag()
                .clone(),
        );
        params.insert(
            PROCESS_NOISE_LOGVAR,
            CovarianceParam::isotropic(cfg.latent_dim, INIT_NOISE_VARIANCE)
                .log_diag()
                .clone(),
        );
        params.insert(
            OBS_NOISE_LOGVAR,
            CovarianceParam::isotropic(cfg.obs_dim, INIT_NOISE_VARIANCE)
                .log_diag()
                .clone(),
        );

        Ok(NeuralEkf {
            cfg,
            transition,
            observation,
            params,
        })
    }

    /// Rebuilds a model around an existing parameter store (checkpoint
    /// loading). The store must contain exactly the names this config
    /// generates.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let fresh = NeuralEkf::new(cfg.clone(), 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Contract(format!(
                "parameter store has {} tensors, config expects {}",
                params.len(),
                fresh.params.len()
            )));
        }
        for (name, value) in fresh.params.iter() {
            let loaded = params.get(name).ok_or_else(|| {
                Error::Contract(format!("parameter store is missing tensor {name}"))
            })?;
            if loaded.rows() != value.rows() || loaded.cols() != value.cols() {
                return Err(Error::Contract(format!(
                    "tensor {name} has shape {}x{}, config expects {}x{}",
                    loaded.rows(),
                    loaded.cols(),
                    value.rows(),
                    value.cols()
                )));
            }
        }
        Ok(NeuralEkf {
            transition: fresh.transition,
            observation: fresh.observation,
            cfg,
            params,
        })
    }

    /// Binds every parameter onto a tape. With `requires_grad`, the
    /// returned leaves accumulate gradients on backward.
    pub fn bind(&self, tape: &Tape, requires_grad: bool) -> Result<BoundNeuralEkf> {
        let mut leaves = Vec::with_capacity(self.params.len());
        for (_, value) in self.params.iter() {
            leaves.push(tape.leaf(value.clone(), requires_grad));
        }

        let f_layer_count = self.transition.net.hidden.len() + 1;
        let g_layer_count = self.observation.net.hidden.len() + 1;
        let f_vars: Vec<(Var, Var)> = (0..f_layer_count)
            .map(|i| (leaves[2 * i].clone(), leaves[2 * i + 1].clone()))
            .collect();
        let g_off = 2 * f_layer_count;
        let g_vars: Vec<(Var, Var)> = (0..g_layer_count)
            .map(|i| (leaves[g_off + 2 * i].clone(), leaves[g_off + 2 * i + 1].clone()))
            .collect();

        let init_mean = leaves[self.params.id_of(INIT_MEAN).expect("registered")].clone();
        let init_logvar = leaves[self.params.id_of(INIT_LOGVAR).expect("registered")].clone();
        let q_logvar =
            leaves[self.params.id_of(PROCESS_NOISE_LOGVAR).expect("registered")].clone();
        let r_logvar = leaves[self.params.id_of(OBS_NOISE_LOGVAR).expect("registered")].clone();

        let transition = BoundTransition::new(
            &self.transition,
            BoundMlp::new(&self.transition.net, f_vars),
        );
        let observation = BoundObservation::new(
            &self.observation,
            BoundMlp::new(&self.observation.net, g_vars),
        );
        let init = Gaussian::new(init_mean, CovarianceParam::materialize(&init_logvar)?)?;

        Ok(BoundNeuralEkf {
            transition,
            observation,
            q: CovarianceParam::materialize(&q_logvar)?,
            r: CovarianceParam::materialize(&r_logvar)?,
            init,
            leaves,
        })
    }
}

/// A model bound to one tape: ready for filtering, loss evaluation, and
/// gradient extraction.
pub struct BoundNeuralEkf {
    pub transition: BoundTransition,
    pub observation: BoundObservation,
    /// Materialized diagonal process noise covariance.
    pub q: Var,
    /// Materialized diagonal observation noise covariance.
    pub r: Var,
    /// Initial belief (mu_{0|0}, Sigma_{0|0}).
    pub init: Gaussian,
    /// Parameter leaves in store order.
    pub leaves: Vec<Var>,
}

impl BoundNeuralEkf {
    /// Gradients per parameter in store order; zero matrices where no
    /// gradient reached a leaf.
    pub fn gradients(&self) -> Vec<Matrix> {
        self.leaves
            .iter()
            .map(|leaf| {
                leaf.grad()
                    .unwrap_or_else(|| Matrix::zeros(leaf.rows(), leaf.cols()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_layout_is_stable_and_named() {
        let cfg = ModelConfig {
            latent_dim: 2,
            input_dim: 1,
            obs_dim: 1,
            hidden: vec![4, 4],
            residual: true,
        };
        let model = NeuralEkf::new(cfg, 3).unwrap();
        // 3 f layers + 3 g layers, two tensors each, plus 4 extras.
        assert_eq!(model.params.len(), 2 * 3 + 2 * 3 + 4);
        assert!(model.params.get(INIT_MEAN).is_some());
        assert!(model.params.get("f.layer0.weight").is_some());
        assert!(model.params.get("g.layer2.bias").is_some());
        assert_eq!(model.params.get(INIT_MEAN).unwrap().rows(), 2);
    }

    #[test]
    fn same_seed_reproduces_parameters_exactly() {
        let cfg = ModelConfig::new(2, 1, 1);
        let a = NeuralEkf::new(cfg.clone(), 9).unwrap();
        let b = NeuralEkf::new(cfg, 9).unwrap();
        for ((na, va), (nb, vb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va, vb);
        }
    }

    #[test]
    fn bound_model_evaluates_and_accumulates_gradients() {
        let cfg = ModelConfig {
            latent_dim: 2,
            input_dim: 1,
            obs_dim: 1,
            hidden: vec![4],
            residual: true,
        };
        let model = NeuralEkf::new(cfg, 5).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape, true).unwrap();
        let us = Matrix::from_fn(4, 1, |t, _| 0.1 * t as f64);
        let xs = Matrix::from_fn(4, 1, |t, _| (t as f64 * 0.5).sin());
        let loss = crate::elbo::total_loss(
            &tape,
            &us,
            &xs,
            &bound.transition,
            &bound.observation,
            &bound.q,
            &bound.r,
            &bound.init,
            0.5,
            1e-6,
        )
        .unwrap();
        tape.backward(&loss.total.neg()).unwrap();
        let grads = bound.gradients();
        assert_eq!(grads.len(), model.params.len());
        // Every parameter class receives some gradient on a generic
        // instance.
        let norm: f64 = grads.iter().map(|g| g.frobenius_norm()).sum();
        assert!(norm > 0.0);
        let q_id = model.params.id_of(PROCESS_NOISE_LOGVAR).unwrap();
        assert!(grads[q_id].frobenius_norm() > 0.0);
    }

    #[test]
    fn from_params_rejects_mismatched_store() {
        let cfg = ModelConfig::new(2, 1, 1);
        let model = NeuralEkf::new(cfg.clone(), 1).unwrap();
        let mut params = model.params.clone();
        *params.value_mut(0) = Matrix::zeros(1, 1);
        assert!(NeuralEkf::from_params(cfg, params).is_err());
    }
}
