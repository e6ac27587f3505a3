use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::{Conv2d, Dense, Layer, Mode, ParamView, Sequential};
use super::{Differentiable, Gradients, LossSpec, Parameterized, VaeArch};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaussian posterior parameters and the encoding `f` drawn from them.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
    pub sample: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    pub arch: VaeArch,
    encoder: Sequential,
    mean_head: Dense,
    logvar_head: Dense,
    decoder: Sequential,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Encoded {
    hidden: Tensor,
    caches: Vec<super::layers::Cache>,
    mean: Tensor,
    logvar: Tensor,
}

impl VaeModel {
    pub fn new(arch: VaeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inp = arch.input;
        let (qh, qw) = (inp.height / 4, inp.width / 4);
        let flat = qh * qw * arch.conv2;
        let encoder = Sequential::new(
            "encoder",
            vec![
                Layer::Conv(Conv2d::new(3, inp.channels, arch.conv1, &mut rng)),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv(Conv2d::new(3, arch.conv1, arch.conv2, &mut rng)),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Dense(Dense::new(flat, arch.hidden, &mut rng)),
                Layer::Relu,
            ],
        );
        let mean_head = Dense::new(arch.hidden, arch.latent, &mut rng);
        let logvar_head = Dense::new(arch.hidden, arch.latent, &mut rng);
        let decoder = Sequential::new(
            "decoder",
            vec![
                Layer::Dense(Dense::new(arch.latent, arch.hidden, &mut rng)),
                Layer::Relu,
                Layer::Dense(Dense::new(arch.hidden, flat, &mut rng)),
                Layer::Relu,
                Layer::Reshape(vec![qh, qw, arch.conv2]),
                Layer::Upsample2,
                Layer::Conv(Conv2d::new(3, arch.conv2, arch.conv2, &mut rng)),
                Layer::Relu,
                Layer::Upsample2,
                Layer::Conv(Conv2d::new(3, arch.conv2, arch.conv1, &mut rng)),
                Layer::Relu,
                Layer::Conv(Conv2d::new(1, arch.conv1, inp.channels, &mut rng)),
            ],
        );
        Ok(Self {
            arch,
            encoder,
            mean_head,
            logvar_head,
            decoder,
        })
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        batch.expect_shape("VAE input", &self.arch.input.batch_shape(batch.batch()))
    }

    fn encode_raw(&self, batch: &Tensor) -> Result<Encoded> {
        self.check_batch(batch)?;
        let (hidden, caches) = self.encoder.forward(batch.clone(), &mut Mode::Eval)?;
        let mean = self.mean_head.forward(&hidden)?;
        let logvar = self.logvar_head.forward(&hidden)?;
        if !mean.all_finite() {
            return Err(Error::Numeric("mean_head".into()));
        }
        if !logvar.all_finite() {
            return Err(Error::Numeric("logvar_head".into()));
        }
        Ok(Encoded {
            hidden,
            caches,
            mean,
            logvar,
        })
    }

    fn noise(&self, batch: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..batch * self.arch.latent)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }

    /// Encodes a `(B, H, W, C)` batch. With `stochastic` off the sample equals the mean.
    pub fn encode(&self, batch: &Tensor, noise_seed: u64, stochastic: bool) -> Result<Vec<LatentCode>> {
        let enc = self.encode_raw(batch)?;
        let d = self.arch.latent;
        let noise = stochastic.then(|| self.noise(batch.batch(), noise_seed));
        Ok((0..batch.batch())
            .map(|i| {
                let mean = enc.mean.item(i).to_vec();
                let log_variance = enc.logvar.item(i).to_vec();
                let sample = match &noise {
                    Some(eps) => mean
                        .iter()
                        .zip(&log_variance)
                        .zip(&eps[i * d..(i + 1) * d])
                        .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
                        .collect(),
                    None => mean.clone(),
                };
                LatentCode {
                    mean,
                    log_variance,
                    sample,
                }
            })
            .collect())
    }

    /// Deterministic encodings (posterior means) for a batch.
    pub fn encode_means(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        let enc = self.encode_raw(batch)?;
        Ok((0..batch.batch()).map(|i| enc.mean.item(i).to_vec()).collect())
    }

    /// Decodes the `sample` of each code into a `(B, H, W, C)` image batch in `[0, 1]`.
    pub fn decode(&self, codes: &[LatentCode]) -> Result<Tensor> {
        let d = self.arch.latent;
        if let Some(bad) = codes.iter().find(|c| c.sample.len() != d) {
            return Err(Error::shape("latent code", d, bad.sample.len()));
        }
        let z = Tensor::new(
            vec![codes.len(), d],
            codes.iter().flat_map(|c| c.sample.iter().copied()).collect(),
        )?;
        let (mut out, _) = self.decoder.forward(z, &mut Mode::Eval)?;
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok(out)
    }

    /// ELBO terms without gradients.
    pub fn loss(&self, batch: &Tensor, noise_seed: u64) -> Result<VaeLoss> {
        Ok(self.elbo(batch, noise_seed, false)?.0)
    }

    /// ELBO terms and parameter gradients of `total`.
    pub fn loss_with_gradients(&self, batch: &Tensor, noise_seed: u64) -> Result<(VaeLoss, Gradients)> {
        let (loss, grads) = self.elbo(batch, noise_seed, true)?;
        Ok((loss, grads.expect("gradients requested")))
    }

    fn elbo(&self, batch: &Tensor, noise_seed: u64, want_grad: bool) -> Result<(VaeLoss, Option<Gradients>)> {
        let b = batch.batch();
        if b == 0 {
            return Err(Error::Parameter("empty VAE batch".into()));
        }
        let d = self.arch.latent;
        let enc = self.encode_raw(batch)?;
        let eps = self.noise(b, noise_seed);
        let std: Vec<f64> = enc.logvar.data().iter().map(|lv| (lv / 2.0).exp()).collect();
        let z: Vec<f64> = enc
            .mean
            .data()
            .iter()
            .zip(&std)
            .zip(&eps)
            .map(|((m, s), e)| m + s * e)
            .collect();
        let (logits, dec_caches) = self
            .decoder
            .forward(Tensor::new(vec![b, d], z)?, &mut Mode::Eval)?;

        let bf = b as f64;
        let target = batch.data();
        let reconstruction = logits
            .data()
            .iter()
            .zip(target)
            .map(|(&l, &x)| softplus(l) - x * l)
            .sum::<f64>()
            / bf;
        let kl = enc
            .mean
            .data()
            .iter()
            .zip(enc.logvar.data())
            .map(|(m, lv)| -0.5 * (1.0 + lv - m * m - lv.exp()))
            .sum::<f64>()
            / bf;
        let loss = VaeLoss {
            total: reconstruction + kl,
            reconstruction,
            kl,
        };
        if !loss.total.is_finite() {
            let at = if reconstruction.is_finite() { "kl term" } else { "reconstruction term" };
            return Err(Error::Numeric(at.into()));
        }
        if !want_grad {
            return Ok((loss, None));
        }

        let d_logits: Vec<f64> = logits
            .data()
            .iter()
            .zip(target)
            .map(|(&l, &x)| (sigmoid(l) - x) / bf)
            .collect();
        let (dec_grads, dz) = self
            .decoder
            .backward(dec_caches, Tensor::new(logits.shape().to_vec(), d_logits)?);
        let dz = dz.data();
        let lv = enc.logvar.data();
        let d_mean: Vec<f64> = dz
            .iter()
            .zip(enc.mean.data())
            .map(|(g, m)| g + m / bf)
            .collect();
        let d_logvar: Vec<f64> = (0..b * d)
            .map(|i| dz[i] * 0.5 * std[i] * eps[i] + 0.5 * (lv[i].exp() - 1.0) / bf)
            .collect();
        let (dh_mean, dw_mean, db_mean) = self
            .mean_head
            .backward(&enc.hidden, &Tensor::new(vec![b, d], d_mean)?);
        let (dh_lv, dw_lv, db_lv) = self
            .logvar_head
            .backward(&enc.hidden, &Tensor::new(vec![b, d], d_logvar)?);
        let mut dh = dh_mean;
        dh.data_mut()
            .iter_mut()
            .zip(dh_lv.data())
            .for_each(|(a, b)| *a += b);
        let (enc_grads, _) = self.encoder.backward(enc.caches, dh);

        let mut blocks = enc_grads;
        blocks.extend([dw_mean, db_mean, dw_lv, db_lv]);
        blocks.extend(dec_grads);
        let names = self.param_views().into_iter().map(|p| p.name).collect();
        Ok((loss, Some(Gradients { names, blocks })))
    }
}

impl Parameterized for VaeModel {
    fn param_views(&self) -> Vec<ParamView<'_>> {
        let mut out = self.encoder.params();
        out.extend(self.mean_head.param_views("mean_head"));
        out.extend(self.logvar_head.param_views("logvar_head"));
        out.extend(self.decoder.params());
        out
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = self.encoder.params_mut();
        out.push(&mut self.mean_head.weight);
        out.push(&mut self.mean_head.bias);
        out.push(&mut self.logvar_head.weight);
        out.push(&mut self.logvar_head.bias);
        out.extend(self.decoder.params_mut());
        out
    }
}

impl Differentiable for VaeModel {
    fn loss_and_gradients(&self, batch: &Tensor, spec: &LossSpec<'_>) -> Result<(f64, Gradients)> {
        match *spec {
            LossSpec::Elbo { noise_seed } => {
                let (loss, grads) = self.loss_with_gradients(batch, noise_seed)?;
                Ok((loss.total, grads))
            }
            LossSpec::Classifier { .. } => Err(Error::Parameter(
                "the VAE is trained only under the ELBO".into(),
            )),
        }
    }

    fn activation_pattern(&self, batch: &Tensor, spec: &LossSpec<'_>) -> Result<Vec<usize>> {
        let LossSpec::Elbo { noise_seed } = *spec else {
            return Err(Error::Parameter("the VAE is trained only under the ELBO".into()));
        };
        let enc = self.encode_raw(batch)?;
        let eps = self.noise(batch.batch(), noise_seed);
        let z: Vec<f64> = enc
            .mean
            .data()
            .iter()
            .zip(enc.logvar.data())
            .zip(&eps)
            .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
            .collect();
        let (_, dec_caches) = self
            .decoder
            .forward(Tensor::new(vec![batch.batch(), self.arch.latent], z)?, &mut Mode::Eval)?;
        let mut pattern = self.encoder.activation_pattern(&enc.caches);
        pattern.extend(self.decoder.activation_pattern(&dec_caches));
        Ok(pattern)
    }
}
