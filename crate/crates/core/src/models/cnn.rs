use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv2d, Dense, Layer, Mode, ParamView, Sequential};
use super::{CnnArch, Differentiable, Gradients, LossSpec, Parameterized};
use crate::error::{Error, Result};
use crate::losses::{self, LossKind};
use crate::tensor::Tensor;

/// Classifier loss with both cross-entropy terms reported separately.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierLoss {
    pub total: f64,
    /// `CCE(y, p)` against the weak bag labels.
    pub weak: f64,
    /// `CCE(ŷ, p)` against the cluster-classes, when they were supplied.
    pub cluster: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel {
    pub arch: CnnArch,
    net: Sequential,
}

impl CnnModel {
    pub fn new(arch: CnnArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inp = arch.input;
        let flat = (inp.height / 4) * (inp.width / 4) * arch.conv2;
        let net = Sequential::new(
            "cnn",
            vec![
                Layer::Conv(Conv2d::new(3, inp.channels, arch.conv1, &mut rng)),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv(Conv2d::new(3, arch.conv1, arch.conv2, &mut rng)),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Dropout(arch.dropout),
                Layer::Dense(Dense::new(flat, arch.hidden, &mut rng)),
                Layer::Relu,
                Layer::Dense(Dense::new(arch.hidden, arch.classes, &mut rng)),
            ],
        );
        Ok(Self { arch, net })
    }

    fn logits(&self, batch: &Tensor, dropout_seed: Option<u64>) -> Result<(Tensor, Vec<super::layers::Cache>)> {
        batch.expect_shape("CNN input", &self.arch.input.batch_shape(batch.batch()))?;
        match dropout_seed {
            Some(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                self.net.forward(batch.clone(), &mut Mode::Train(&mut rng))
            }
            None => self.net.forward(batch.clone(), &mut Mode::Eval),
        }
    }

    /// Class probabilities `(B, classes)`. Dropout is active only in `train_mode`.
    pub fn forward(&self, batch: &Tensor, train_mode: bool, dropout_seed: u64) -> Result<Tensor> {
        let (logits, _) = self.logits(batch, train_mode.then_some(dropout_seed))?;
        losses::softmax(&logits)
    }

    /// Evaluation-mode prediction: argmax class per instance, with probabilities.
    pub fn predict(&self, batch: &Tensor) -> Result<(Vec<usize>, Tensor)> {
        let p = self.forward(batch, false, 0)?;
        let c = self.arch.classes;
        let classes = p
            .data()
            .chunks_exact(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect();
        Ok((classes, p))
    }

    /// Loss under `kind`, plus gradients when requested. `dropout_seed: None` disables dropout.
    pub fn loss_with_gradients(
        &self,
        batch: &Tensor,
        kind: LossKind,
        weak_labels: &[usize],
        cluster_labels: Option<&[usize]>,
        dropout_seed: Option<u64>,
    ) -> Result<(ClassifierLoss, Gradients)> {
        kind.validate()?;
        if kind.needs_cluster_labels() && cluster_labels.is_none() {
            return Err(Error::Config("CCE+ requires cluster-class labels".into()));
        }
        let (logits, caches) = self.logits(batch, dropout_seed)?;
        let p = losses::softmax(&logits)?;
        let weak = losses::cce(weak_labels, &p)?;
        let cluster = cluster_labels.map(|c| losses::cce(c, &p)).transpose()?;
        let alpha = kind.weak_weight();
        let total = match kind {
            LossKind::Cce => weak,
            LossKind::CcePlus { .. } => alpha * weak + (1.0 - alpha) * cluster.unwrap_or(0.0),
        };

        let mut d_logits = vec![0.0; logits.len()];
        losses::accumulate_cce_logit_grad(weak_labels, &p, alpha, &mut d_logits)?;
        if let (LossKind::CcePlus { .. }, Some(c)) = (kind, cluster_labels) {
            losses::accumulate_cce_logit_grad(c, &p, 1.0 - alpha, &mut d_logits)?;
        }
        let (blocks, _) = self
            .net
            .backward(caches, Tensor::new(logits.shape().to_vec(), d_logits)?);
        let names = self.param_views().into_iter().map(|v| v.name).collect();
        Ok((
            ClassifierLoss {
                total,
                weak,
                cluster,
            },
            Gradients { names, blocks },
        ))
    }
}

impl Parameterized for CnnModel {
    fn param_views(&self) -> Vec<ParamView<'_>> {
        self.net.params()
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.net.params_mut()
    }
}

impl Differentiable for CnnModel {
    fn loss_and_gradients(&self, batch: &Tensor, spec: &LossSpec<'_>) -> Result<(f64, Gradients)> {
        match *spec {
            LossSpec::Classifier {
                kind,
                weak_labels,
                cluster_labels,
                dropout_seed,
            } => {
                let (loss, grads) =
                    self.loss_with_gradients(batch, kind, weak_labels, cluster_labels, dropout_seed)?;
                Ok((loss.total, grads))
            }
            LossSpec::Elbo { .. } => Err(Error::Parameter(
                "the classifier has no ELBO objective".into(),
            )),
        }
    }

    fn activation_pattern(&self, batch: &Tensor, spec: &LossSpec<'_>) -> Result<Vec<usize>> {
        let LossSpec::Classifier {
            weak_labels,
            cluster_labels,
            dropout_seed,
            ..
        } = *spec
        else {
            return Err(Error::Parameter("the classifier has no ELBO objective".into()));
        };
        let (logits, caches) = self.logits(batch, dropout_seed)?;
        let mut pattern = self.net.activation_pattern(&caches);
        let p = losses::softmax(&logits)?;
        let c = self.arch.classes;
        for labels in std::iter::once(weak_labels).chain(cluster_labels) {
            pattern.extend(
                labels
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| (p.data()[i * c + y] < losses::PROB_EPSILON) as usize),
            );
        }
        Ok(pattern)
    }
}
