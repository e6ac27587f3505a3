//! Network architectures: a convolutional VAE for unsupervised latent features and a
//! small CNN classifier, both with analytic gradients.

pub mod checkpoint;
mod cnn;
pub mod layers;
mod vae;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, ModelKind};
pub use cnn::{ClassifierLoss, CnnModel};
pub use layers::ParamView;
pub use vae::{LatentCode, VaeLoss, VaeModel};

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::tensor::Tensor;

/// Height, width and channel count of one input instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub const MNIST: InputShape = InputShape {
        height: 28,
        width: 28,
        channels: 1,
    };

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.height, self.width, self.channels]
    }

    fn validate(&self) -> Result<()> {
        if !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) || self.channels == 0 {
            return Err(Error::Parameter(format!(
                "input {}x{}x{} must have spatial sides divisible by 4",
                self.height, self.width, self.channels
            )));
        }
        Ok(())
    }
}

/// Encoder: conv → pool → conv → pool → dense → (mean, log-variance) heads.
/// The decoder mirrors it with nearest-neighbour upsampling and ends in a 1×1 conv.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeArch {
    pub input: InputShape,
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl VaeArch {
    /// Full-width MNIST VAE: 32/32 conv channels, 512 dense, 64-d encoding.
    pub fn mnist() -> Self {
        Self {
            input: InputShape::MNIST,
            conv1: 32,
            conv2: 32,
            hidden: 512,
            latent: 64,
        }
    }

    /// Half the convolution channels of [`VaeArch::mnist`].
    pub fn mnist_half() -> Self {
        Self {
            conv1: 16,
            conv2: 16,
            ..Self::mnist()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.input.validate()?;
        if [self.conv1, self.conv2, self.hidden, self.latent].contains(&0) {
            return Err(Error::Parameter("VAE layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// conv → pool → conv → pool → dropout → dense → softmax.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnArch {
    pub input: InputShape,
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
    pub classes: usize,
    pub dropout: f64,
}

impl CnnArch {
    /// Full-width MNIST classifier: 64/32 conv channels, dropout 0.2, 128 dense, 10 classes.
    pub fn mnist() -> Self {
        Self {
            input: InputShape::MNIST,
            conv1: 64,
            conv2: 32,
            hidden: 128,
            classes: 10,
            dropout: 0.2,
        }
    }

    /// Half the convolution channels of [`CnnArch::mnist`].
    pub fn mnist_half() -> Self {
        Self {
            conv1: 32,
            conv2: 16,
            ..Self::mnist()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.input.validate()?;
        if [self.conv1, self.conv2, self.hidden].contains(&0) || self.classes < 2 {
            return Err(Error::Parameter(
                "CNN widths must be positive with at least two classes".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// One gradient block per parameter block, in the model's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub names: Vec<String>,
    pub blocks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn global_norm(&self) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Fails with the name of the first block holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        for (name, block) in self.names.iter().zip(&self.blocks) {
            if block.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("gradient of {name}")));
            }
        }
        Ok(())
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            self.blocks.iter_mut().flatten().for_each(|g| *g *= s);
        }
        norm
    }
}

/// Access to a model's parameter blocks in a fixed order.
pub trait Parameterized {
    fn param_views(&self) -> Vec<ParamView<'_>>;

    fn param_blocks_mut(&mut self) -> Vec<&mut Vec<f64>>;

    fn param_count(&self) -> usize {
        self.param_views().iter().map(|p| p.values.len()).sum()
    }
}

/// The objective a gradient is taken of.
#[derive(Clone, Copy, Debug)]
pub enum LossSpec<'a> {
    /// Classifier objective. `dropout_seed: None` evaluates without dropout.
    Classifier {
        kind: LossKind,
        weak_labels: &'a [usize],
        cluster_labels: Option<&'a [usize]>,
        dropout_seed: Option<u64>,
    },
    /// VAE evidence lower bound with the reparameterization noise drawn from `noise_seed`.
    Elbo { noise_seed: u64 },
}

pub trait Differentiable: Parameterized {
    /// Scalar loss and its gradient with respect to every parameter block.
    fn loss_and_gradients(&self, batch: &Tensor, spec: &LossSpec<'_>) -> Result<(f64, Gradients)>;

    /// Discrete forward-pass decisions under `spec` (ReLU sides, max-pool winners,
    /// probability clamps). The loss is smooth in the parameters wherever this is constant.
    fn activation_pattern(&self, batch: &Tensor, spec: &LossSpec<'_>) -> Result<Vec<usize>>;
}

/// Parameter gradients of `model` under `spec`, checked for finiteness.
pub fn model_gradients<M: Differentiable>(
    model: &M,
    batch: &Tensor,
    spec: &LossSpec<'_>,
) -> Result<Gradients> {
    let (_, grads) = model.loss_and_gradients(batch, spec)?;
    grads.check_finite()?;
    Ok(grads)
}
