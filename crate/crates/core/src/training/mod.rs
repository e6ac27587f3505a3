//! Training loops: Adam for the VAE and SGD with exponential decay for the classifier
//! (either optimizer can drive either model).

mod optim;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};

use crate::data::{Bag, ImageInstance, InstancePool};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::losses::LossKind;
use crate::models::{Checkpoint, CnnModel, Gradients, Parameterized, VaeModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Multiplicative decay per `decay_steps` updates (SGD only).
    pub decay_rate: f64,
    /// Defaults to one epoch's worth of updates.
    pub decay_steps: Option<f64>,
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 0.001,
            decay_rate: 1.0,
            decay_steps: None,
        }
    }

    pub fn sgd_exp_decay() -> Self {
        Self {
            kind: OptimizerKind::SgdExpDecay,
            learning_rate: 0.001,
            decay_rate: 0.95,
            decay_steps: None,
        }
    }

    pub fn build(&self, steps_per_epoch: usize) -> Result<OptimizerState> {
        let state = match self.kind {
            OptimizerKind::Adam => OptimizerState::adam(self.learning_rate),
            OptimizerKind::SgdExpDecay => OptimizerState::sgd_exp_decay(
                self.learning_rate,
                self.decay_rate,
                self.decay_steps.unwrap_or(steps_per_epoch.max(1) as f64),
            ),
        };
        state.validate()?;
        Ok(state)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Ignored by VAE training, which always minimizes the ELBO.
    pub loss: LossKind,
    /// Save a checkpoint every this many epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl TrainRunSpec {
    pub fn new(epochs: usize, batch_size: usize, seed: u64, optimizer: OptimizerConfig) -> Self {
        Self {
            epochs,
            batch_size,
            seed,
            optimizer,
            loss: LossKind::Cce,
            checkpoint_every: 0,
            clip_norm: Some(5.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        self.loss.validate()
    }
}

/// Serializable ChaCha8 position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    pub stream: u64,
    /// `u128` word position, as decimal text.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |m: &str| Error::format("rng state", m);
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed is not 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("bad word position"))?);
        Ok(rng)
    }
}

/// A model together with its optimizer, shuffle RNG, and completed-epoch count.
#[derive(Clone, Debug)]
pub struct Session<M> {
    pub model: M,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
    pub epochs_done: usize,
}

impl<M: Parameterized> Session<M> {
    pub fn new(model: M, spec: &TrainRunSpec, examples: usize) -> Result<Self> {
        let steps = examples.div_ceil(spec.batch_size.max(1));
        Ok(Self {
            model,
            optimizer: spec.optimizer.build(steps)?,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            epochs_done: 0,
        })
    }

    fn apply(&mut self, mut grads: Gradients, clip: Option<f64>) -> Result<()> {
        grads.check_finite()?;
        if let Some(max) = clip {
            grads.clip_global_norm(max);
        }
        self.optimizer.step(self.model.param_blocks_mut(), &grads)
    }

    /// Runs one epoch, rolling the whole session back if a numeric error occurs.
    fn guarded_epoch<T>(
        &mut self,
        body: impl FnOnce(&mut Self) -> Result<T>,
    ) -> Result<T>
    where
        M: Clone,
    {
        let snapshot = (self.model.clone(), self.optimizer.clone(), self.rng.clone());
        match body(self) {
            Err(Error::Numeric(message)) => {
                (self.model, self.optimizer, self.rng) = snapshot;
                Err(Error::Diverged {
                    epoch: self.epochs_done + 1,
                    message,
                })
            }
            other => other,
        }
    }
}

impl Session<VaeModel> {
    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut c = Checkpoint::from_vae(&self.model, config_hash, self.epochs_done);
        c.optimizer = Some(self.optimizer.clone());
        c.rng = Some(RngState::capture(&self.rng));
        c
    }

    pub fn resume(checkpoint: &Checkpoint) -> Result<Self> {
        resume_parts(checkpoint).and_then(|(o, r)| {
            Ok(Self {
                model: checkpoint.vae()?,
                optimizer: o,
                rng: r,
                epochs_done: checkpoint.epoch,
            })
        })
    }
}

impl Session<CnnModel> {
    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut c = Checkpoint::from_cnn(&self.model, config_hash, self.epochs_done);
        c.optimizer = Some(self.optimizer.clone());
        c.rng = Some(RngState::capture(&self.rng));
        c
    }

    pub fn resume(checkpoint: &Checkpoint) -> Result<Self> {
        resume_parts(checkpoint).and_then(|(o, r)| {
            Ok(Self {
                model: checkpoint.cnn()?,
                optimizer: o,
                rng: r,
                epochs_done: checkpoint.epoch,
            })
        })
    }
}

fn resume_parts(checkpoint: &Checkpoint) -> Result<(OptimizerState, ChaCha8Rng)> {
    let optimizer = checkpoint
        .optimizer
        .clone()
        .ok_or_else(|| Error::Config("checkpoint carries no optimizer state".into()))?;
    let rng = checkpoint
        .rng
        .as_ref()
        .ok_or_else(|| Error::Config("checkpoint carries no RNG state".into()))?
        .restore()?;
    Ok((optimizer, rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeEpoch {
    pub epoch: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub lr_eff: f64,
    pub wall_seconds: f64,
}

impl VaeEpoch {
    /// Tab-separated log line (no trailing newline).
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{:.3}",
            self.epoch, self.total, self.reconstruction, self.kl, self.lr_eff, self.wall_seconds
        )
    }
}

pub const VAE_LOG_HEADER: &str = "epoch\ttotal\treconstruction\tkl\tlr_eff\twall_seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean `CCE(y, p)` over the epoch's batches.
    pub cce_component: f64,
    /// Mean `CCE(ŷ, p)`, when cluster-classes were available.
    pub cluster_component: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub lr_eff: f64,
    pub wall_seconds: f64,
}

pub const CLASSIFIER_LOG_HEADER: &str =
    "epoch\ttrain_loss\tcce_component\tcluster_component\ttest_accuracy\tlr_eff\twall_seconds";

impl ClassifierEpoch {
    /// Tab-separated log line; absent values print as `nan`.
    pub fn log_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_owned(), |v| v.to_string());
        let mut s = String::new();
        write!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.3}",
            self.epoch,
            self.train_loss,
            self.cce_component,
            opt(self.cluster_component),
            opt(self.test_accuracy),
            self.lr_eff,
            self.wall_seconds
        )
        .unwrap();
        s
    }

    /// Everything except wall-clock time.
    pub fn metrics(&self) -> (usize, f64, f64, Option<f64>, Option<f64>, f64) {
        (
            self.epoch,
            self.train_loss,
            self.cce_component,
            self.cluster_component,
            self.test_accuracy,
            self.lr_eff,
        )
    }
}

/// Callback invoked after every completed epoch, e.g. to write checkpoints and logs.
pub type EpochHook<'a, M, E> = &'a mut dyn FnMut(&Session<M>, &E) -> Result<()>;

/// Trains a VAE on every instance of `pool` for `spec.epochs` epochs.
pub fn train_vae(pool: &InstancePool, model: VaeModel, spec: &TrainRunSpec) -> Result<(VaeModel, Vec<VaeEpoch>)> {
    spec.validate()?;
    let mut session = Session::new(model, spec, pool.len())?;
    let history = train_vae_session(pool, &mut session, spec, &mut |_, _| Ok(()))?;
    Ok((session.model, history))
}

/// Continues `session` until `spec.epochs` epochs are complete.
pub fn train_vae_session(
    pool: &InstancePool,
    session: &mut Session<VaeModel>,
    spec: &TrainRunSpec,
    on_epoch: EpochHook<'_, VaeModel, VaeEpoch>,
) -> Result<Vec<VaeEpoch>> {
    spec.validate()?;
    if pool.is_empty() {
        return Err(Error::Parameter("empty training pool".into()));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut history = Vec::new();
    while session.epochs_done < spec.epochs {
        let started = Instant::now();
        let (total, recon, kl) = session.guarded_epoch(|s| {
            order.sort_unstable();
            order.shuffle(&mut s.rng);
            let (mut total, mut recon, mut kl) = (0.0, 0.0, 0.0);
            for chunk in order.chunks(spec.batch_size) {
                let batch = pool.batch(chunk)?;
                let noise_seed = s.rng.next_u64();
                let (loss, grads) = s.model.loss_with_gradients(&batch, noise_seed)?;
                let w = chunk.len() as f64;
                total += loss.total * w;
                recon += loss.reconstruction * w;
                kl += loss.kl * w;
                s.apply(grads, spec.clip_norm)?;
            }
            let n = order.len() as f64;
            Ok((total / n, recon / n, kl / n))
        })?;
        session.epochs_done += 1;
        let record = VaeEpoch {
            epoch: session.epochs_done,
            total,
            reconstruction: recon,
            kl,
            lr_eff: session.optimizer.effective_lr(),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("vae {}", record.log_line());
        on_epoch(session, &record)?;
        history.push(record);
    }
    Ok(history)
}

/// One classifier training example: an instance slot from a bag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub id: usize,
    pub weak_label: usize,
    pub cluster_label: Option<usize>,
}

/// Expands bags into per-instance examples. Every instance takes its bag's label as the
/// weak label; `cluster_labels` supplies `ŷ` and must cover every instance under CCE+.
pub fn examples_from_bags(
    bags: &[Bag],
    cluster_labels: Option<&HashMap<usize, usize>>,
    loss: LossKind,
) -> Result<Vec<TrainingExample>> {
    if loss.needs_cluster_labels() && cluster_labels.is_none() {
        return Err(Error::Config(
            "CCE+ training needs the cluster-class cache".into(),
        ));
    }
    let mut out = Vec::new();
    for bag in bags {
        for &id in &bag.instance_ids {
            let cluster_label = match cluster_labels {
                Some(map) => match map.get(&id) {
                    Some(&y) => Some(y),
                    None if loss.needs_cluster_labels() => {
                        return Err(Error::Config(format!(
                            "instance {id} has no cached cluster-class"
                        )))
                    }
                    None => None,
                },
                None => None,
            };
            out.push(TrainingExample {
                id,
                weak_label: bag.bag_label,
                cluster_label,
            });
        }
    }
    Ok(out)
}

/// Trains a classifier on bag instances, evaluating on `test` after every epoch.
pub fn train_classifier(
    pool: &InstancePool,
    bags: &[Bag],
    cluster_labels: Option<&HashMap<usize, usize>>,
    test: Option<&[ImageInstance]>,
    model: CnnModel,
    spec: &TrainRunSpec,
) -> Result<(CnnModel, Vec<ClassifierEpoch>)> {
    spec.validate()?;
    let examples = examples_from_bags(bags, cluster_labels, spec.loss)?;
    let mut session = Session::new(model, spec, examples.len())?;
    let history = train_classifier_session(pool, &examples, test, &mut session, spec, &mut |_, _| Ok(()))?;
    Ok((session.model, history))
}

pub fn train_classifier_session(
    pool: &InstancePool,
    examples: &[TrainingExample],
    test: Option<&[ImageInstance]>,
    session: &mut Session<CnnModel>,
    spec: &TrainRunSpec,
    on_epoch: EpochHook<'_, CnnModel, ClassifierEpoch>,
) -> Result<Vec<ClassifierEpoch>> {
    spec.validate()?;
    if examples.is_empty() {
        return Err(Error::Parameter("no training examples".into()));
    }
    let has_clusters = examples.iter().all(|e| e.cluster_label.is_some());
    if spec.loss.needs_cluster_labels() && !has_clusters {
        return Err(Error::Config("CCE+ training needs a cluster-class for every example".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::new();
    while session.epochs_done < spec.epochs {
        let started = Instant::now();
        let (loss, weak, cluster) = session.guarded_epoch(|s| {
            order.sort_unstable();
            order.shuffle(&mut s.rng);
            let (mut loss, mut weak, mut cluster) = (0.0, 0.0, 0.0);
            for chunk in order.chunks(spec.batch_size) {
                let ids: Vec<usize> = chunk.iter().map(|&i| examples[i].id).collect();
                let y: Vec<usize> = chunk.iter().map(|&i| examples[i].weak_label).collect();
                let yh: Option<Vec<usize>> = has_clusters
                    .then(|| chunk.iter().map(|&i| examples[i].cluster_label.unwrap()).collect());
                let batch = pool.batch(&ids)?;
                let dropout_seed = s.rng.next_u64();
                let (l, grads) =
                    s.model
                        .loss_with_gradients(&batch, spec.loss, &y, yh.as_deref(), Some(dropout_seed))?;
                let w = chunk.len() as f64;
                loss += l.total * w;
                weak += l.weak * w;
                cluster += l.cluster.unwrap_or(0.0) * w;
                s.apply(grads, spec.clip_norm)?;
            }
            let n = order.len() as f64;
            Ok((loss / n, weak / n, cluster / n))
        })?;
        session.epochs_done += 1;
        let test_accuracy = match test {
            Some(t) => Some(evaluation::evaluate_accuracy(&session.model, t)?),
            None => None,
        };
        let record = ClassifierEpoch {
            epoch: session.epochs_done,
            train_loss: loss,
            cce_component: weak,
            cluster_component: has_clusters.then_some(cluster),
            test_accuracy,
            lr_eff: session.optimizer.effective_lr(),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("cnn {}", record.log_line());
        on_epoch(session, &record)?;
        history.push(record);
    }
    Ok(history)
}
