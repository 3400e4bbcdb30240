//! Learnable transition and observation models: multilayer perceptrons
//! whose state-Jacobians are assembled as tape expressions, so the
//! training loss can differentiate through the Jacobians themselves.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Activation applied after every hidden layer. The output layer is
/// always linear. Activations must be smooth because the Jacobians enter
/// the training loss and are differentiated again.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

/// Multilayer perceptron shape.
#[derive(Debug, Clone)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl MlpConfig {
    /// Three tanh hidden layers of the given width.
    pub fn new(input_dim: usize, output_dim: usize, width: usize) -> Self {
        MlpConfig {
            input_dim,
            output_dim,
            hidden: vec![width; 3],
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Contract(
                "MLP input and output dimensions must be at least 1".into(),
            ));
        }
        if self.hidden.is_empty() {
            return Err(Error::Contract("MLP needs at least one hidden layer".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Contract("hidden layer widths must be at least 1".into()));
        }
        Ok(())
    }

    /// (fan_in, fan_out) per weight matrix, in layer order.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &w in &self.hidden {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.output_dim));
        dims
    }
}

/// One weight matrix (out x in) and bias column (out x 1) per layer.
pub type LayerParams = Vec<(Matrix, Matrix)>;

/// Xavier-uniform weights with zero biases, deterministic under the seed:
/// each weight is drawn from U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn init_params(cfg: &MlpConfig, seed: u64) -> Result<LayerParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for (fan_in, fan_out) in cfg.layer_dims() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound));
        let b = Matrix::zeros(fan_out, 1);
        layers.push((w, b));
    }
    Ok(layers)
}

/// An MLP bound to a tape: all weights and biases are tape nodes.
#[derive(Clone)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    activation: Activation,
    input_dim: usize,
    output_dim: usize,
}

impl BoundMlp {
    pub fn new(cfg: &MlpConfig, layers: Vec<(Var, Var)>) -> Self {
        debug_assert_eq!(layers.len(), cfg.hidden.len() + 1);
        BoundMlp {
            layers,
            activation: cfg.activation,
            input_dim: cfg.input_dim,
            output_dim: cfg.output_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn check_input(&self, x: &Var) -> Result<()> {
        if x.rows() != self.input_dim || x.cols() != 1 {
            return Err(Error::Contract(format!(
                "MLP expects a {}x1 input, got {}x{}",
                self.input_dim,
                x.rows(),
                x.cols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Var) -> Result<Var> {
        Ok(self.forward_traced(x)?.0)
    }

    /// Forward pass keeping the post-activation of every hidden layer;
    /// the Jacobian expression reuses them.
    fn forward_traced(&self, x: &Var) -> Result<(Var, Vec<Var>)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut hidden_acts = Vec::with_capacity(self.layers.len() - 1);
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let pre = w.matmul(&h)?.add(b)?;
            let last = i + 1 == self.layers.len();
            h = if last {
                pre
            } else {
                match self.activation {
                    Activation::Tanh => {
                        let act = pre.tanh();
                        hidden_acts.push(act.clone());
                        act
                    }
                    Activation::Identity => {
                        hidden_acts.push(pre.clone());
                        pre
                    }
                }
            };
        }
        Ok((h, hidden_acts))
    }

    /// Output together with the exact Jacobian d(output)/d(input),
    /// assembled right-to-left as W_L diag(act') ... diag(act') W_1. The
    /// Jacobian is itself a tape expression, so a scalar function of it
    /// can be differentiated with respect to the weights.
    pub fn forward_with_jacobian(&self, x: &Var) -> Result<(Var, Var)> {
        let (out, hidden_acts) = self.forward_traced(x)?;
        let mut jac = self.layers[0].0.clone();
        for (i, act) in hidden_acts.iter().enumerate() {
            let deriv = match self.activation {
                // tanh'(a) = 1 - tanh(a)^2, from the stored activation.
                Activation::Tanh => act.elem_mul(act)?.scale(-1.0).add_scalar(1.0),
                Activation::Identity => act.scale(0.0).add_scalar(1.0),
            };
            let scaled = deriv.row_scale(&jac)?;
            jac = self.layers[i + 1].0.matmul(&scaled)?;
        }
        Ok((out, jac))
    }
}

/// Learnable latent transition z_next = f(z, u), optionally residual
/// (the network output is added to z, which makes the map the identity
/// at zero weights and keeps early filtering stable).
#[derive(Debug, Clone)]
pub struct TransitionModel {
    pub net: MlpConfig,
    pub residual: bool,
    pub latent_dim: usize,
    pub input_dim: usize,
}

impl TransitionModel {
    pub fn new(latent_dim: usize, input_dim: usize, hidden: Vec<usize>, residual: bool) -> Self {
        TransitionModel {
            net: MlpConfig {
                input_dim: latent_dim + input_dim,
                output_dim: latent_dim,
                hidden,
                activation: Activation::Tanh,
            },
            residual,
            latent_dim,
            input_dim,
        }
    }
}

/// A transition model bound to a tape.
#[derive(Clone)]
pub struct BoundTransition {
    pub net: BoundMlp,
    pub residual: bool,
    latent_dim: usize,
    input_dim: usize,
}

impl BoundTransition {
    pub fn new(model: &TransitionModel, net: BoundMlp) -> Self {
        BoundTransition {
            net,
            residual: model.residual,
            latent_dim: model.latent_dim,
            input_dim: model.input_dim,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn check_dims(&self, z: &Var, u: &Var) -> Result<()> {
        if z.rows() != self.latent_dim || z.cols() != 1 || u.rows() != self.input_dim || u.cols() != 1
        {
            return Err(Error::Contract(format!(
                "transition expects z {}x1 and u {}x1, got {}x{} and {}x{}",
                self.latent_dim,
                self.input_dim,
                z.rows(),
                z.cols(),
                u.rows(),
                u.cols()
            )));
        }
        Ok(())
    }

    /// Next latent state.
    pub fn step(&self, z: &Var, u: &Var) -> Result<Var> {
        self.check_dims(z, u)?;
        let input = z.concat_rows(u)?;
        let delta = self.net.forward(&input)?;
        if self.residual {
            z.add(&delta)
        } else {
            Ok(delta)
        }
    }

    /// Next latent state together with the exact state-Jacobian
    /// d f(z, u) / d z, sliced out of the network Jacobian over [z; u]
    /// (plus the identity when residual).
    pub fn step_with_jacobian(&self, z: &Var, u: &Var) -> Result<(Var, Var)> {
        self.check_dims(z, u)?;
        let input = z.concat_rows(u)?;
        let (delta, full_jac) = self.net.forward_with_jacobian(&input)?;
        let jac_z = full_jac.slice_cols(0, self.latent_dim)?;
        if self.residual {
            let next = z.add(&delta)?;
            let eye = z.tape().identity(self.latent_dim);
            Ok((next, jac_z.add(&eye)?))
        } else {
            Ok((delta, jac_z))
        }
    }
}

/// Learnable observation model x = g(z). Control inputs never enter the
/// observation network.
#[derive(Debug, Clone)]
pub struct ObservationModel {
    pub net: MlpConfig,
    pub latent_dim: usize,
    pub obs_dim: usize,
}

impl ObservationModel {
    pub fn new(latent_dim: usize, obs_dim: usize, hidden: Vec<usize>) -> Self {
        ObservationModel {
            net: MlpConfig {
                input_dim: latent_dim,
                output_dim: obs_dim,
                hidden,
                activation: Activation::Tanh,
            },
            latent_dim,
            obs_dim,
        }
    }
}

/// An observation model bound to a tape.
#[derive(Clone)]
pub struct BoundObservation {
    pub net: BoundMlp,
    pub obs_dim: usize,
}

impl BoundObservation {
    pub fn new(model: &ObservationModel, net: BoundMlp) -> Self {
        BoundObservation {
            net,
            obs_dim: model.obs_dim,
        }
    }

    pub fn observe(&self, z: &Var) -> Result<Var> {
        self.net.forward(z)
    }

    pub fn observe_with_jacobian(&self, z: &Var) -> Result<(Var, Var)> {
        self.net.forward_with_jacobian(z)
    }
}

/// Parameters realizing an exact affine map `out = A in + c` as a
/// single-hidden-layer identity-activation network. Useful for linear
/// baselines, where the EKF linearization is exact.
pub fn linear_params(a: &Matrix, c: &Matrix) -> (MlpConfig, LayerParams) {
    let (out_dim, in_dim) = (a.rows(), a.cols());
    let cfg = MlpConfig {
        input_dim: in_dim,
        output_dim: out_dim,
        hidden: vec![in_dim],
        activation: Activation::Identity,
    };
    let layers = vec![
        (Matrix::identity(in_dim), Matrix::zeros(in_dim, 1)),
        (a.clone(), c.clone()),
    ];
    (cfg, layers)
}

/// Binds plain layer parameters onto a tape. When `requires_grad` is set
/// the returned leaves accumulate gradients.
pub fn bind_layers(tape: &Tape, layers: &LayerParams, requires_grad: bool) -> Vec<(Var, Var)> {
    layers
        .iter()
        .map(|(w, b)| {
            (
                tape.leaf(w.clone(), requires_grad),
                tape.leaf(b.clone(), requires_grad),
            )
        })
        .collect()
}

/// Value-level forward pass over plain matrices (no tape). Used when
/// generating data from a known model and in tests.
pub fn forward_values(
    cfg: &MlpConfig,
    layers: &LayerParams,
    x: &Matrix,
) -> Result<Matrix> {
    let mut h = x.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        let pre = w.matmul(&h)?.add(b)?;
        let last = i + 1 == layers.len();
        h = if last {
            pre
        } else {
            match cfg.activation {
                Activation::Tanh => pre.map(f64::tanh),
                Activation::Identity => pre,
            }
        };
    }
    Ok(h)
}
