use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Gradients;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdExpDecay,
}

/// Optimizer hyperparameters plus the running state a checkpoint must carry.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// Initial learning rate.
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub decay_steps: f64,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            decay_rate: 1.0,
            decay_steps: 1.0,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// SGD with `lr = learning_rate * decay_rate^(step / decay_steps)`.
    pub fn sgd_exp_decay(learning_rate: f64, decay_rate: f64, decay_steps: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdExpDecay,
            learning_rate,
            decay_rate,
            decay_steps,
            ..Self::adam(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Parameter(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.kind == OptimizerKind::SgdExpDecay
            && (!(self.decay_rate > 0.0 && self.decay_rate <= 1.0) || !(self.decay_steps > 0.0))
        {
            return Err(Error::Parameter(format!(
                "decay rate {} must be in (0, 1] and decay steps {} positive",
                self.decay_rate, self.decay_steps
            )));
        }
        Ok(())
    }

    /// Learning rate the next step will use.
    pub fn effective_lr(&self) -> f64 {
        match self.kind {
            OptimizerKind::Adam => self.learning_rate,
            OptimizerKind::SgdExpDecay => {
                self.learning_rate
                    * self
                        .decay_rate
                        .powf(self.step_count as f64 / self.decay_steps)
            }
        }
    }

    /// Applies one update to `params` (in the same block order as `grads`).
    pub fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: &Gradients) -> Result<()> {
        grads.check_finite()?;
        if params.len() != grads.blocks.len() {
            return Err(Error::shape("gradient blocks", params.len(), grads.blocks.len()));
        }
        for (p, g) in params.iter().zip(&grads.blocks) {
            if p.len() != g.len() {
                return Err(Error::shape("gradient block", p.len(), g.len()));
            }
        }
        match self.kind {
            OptimizerKind::Adam => self.adam_step(params, grads),
            OptimizerKind::SgdExpDecay => {
                let lr = self.effective_lr();
                for (p, g) in params.into_iter().zip(&grads.blocks) {
                    p.iter_mut().zip(g).for_each(|(w, d)| *w -= lr * d);
                }
            }
        }
        self.step_count += 1;
        Ok(())
    }

    fn adam_step(&mut self, params: Vec<&mut Vec<f64>>, grads: &Gradients) {
        if self.first_moment.is_empty() {
            self.first_moment = grads.blocks.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        let t = (self.step_count + 1) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let lr = self.learning_rate;
        for (((p, g), m), v) in params
            .into_iter()
            .zip(&grads.blocks)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            }
        }
    }
}
