//! Layer primitives with hand-written backward passes.
//!
//! Activations are NHWC (`[batch, height, width, channels]`) for spatial layers and
//! `[batch, features]` for dense layers. Every forward pass returns a [`Cache`] holding
//! exactly what the matching backward pass needs, so a model is never mutated by
//! evaluation and may be shared across threads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = alpha * a·b + beta * c` for row-major operands described by explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller passes slices whose extents cover every strided access;
    // debug builds check the output extent above and the inputs are sized by the layer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Uniform fan-in initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub(crate) fn fan_in_uniform(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[kernel * kernel * in_channels, out_channels]`, row index `(ky * k + kx) * cin + c`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        Self {
            kernel,
            in_channels,
            out_channels,
            weight: fan_in_uniform(rng, fan_in, fan_in * out_channels),
            bias: vec![0.0; out_channels],
        }
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn im2col(&self, input: &Tensor) -> Vec<f64> {
        let &[b, h, w, c] = input.shape() else {
            unreachable!("checked by caller")
        };
        let k = self.kernel;
        let pad = k / 2;
        let cols_per_row = self.patch_len();
        let mut cols = vec![0.0; b * h * w * cols_per_row];
        let src = input.data();
        for n in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let row = ((n * h + y) * w + x) * cols_per_row;
                    for ky in 0..k {
                        let sy = y as isize + ky as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = x as isize + kx as isize - pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let from = ((n * h + sy as usize) * w + sx as usize) * c;
                            let to = row + (ky * k + kx) * c;
                            cols[to..to + c].copy_from_slice(&src[from..from + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], shape: &[usize]) -> Tensor {
        let &[b, h, w, c] = shape else {
            unreachable!("checked by caller")
        };
        let k = self.kernel;
        let pad = k / 2;
        let cols_per_row = self.patch_len();
        let mut out = Tensor::zeros(shape.to_vec());
        let dst = out.data_mut();
        for n in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let row = ((n * h + y) * w + x) * cols_per_row;
                    for ky in 0..k {
                        let sy = y as isize + ky as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = x as isize + kx as isize - pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let to = ((n * h + sy as usize) * w + sx as usize) * c;
                            let from = row + (ky * k + kx) * c;
                            for (d, s) in dst[to..to + c].iter_mut().zip(&cols[from..from + c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        match input.shape() {
            [_, _, _, c] if *c == self.in_channels => Ok(()),
            other => Err(Error::shape(
                "conv2d input",
                format!("[B, H, W, {}]", self.in_channels),
                other,
            )),
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let &[b, h, w, _] = input.shape() else {
            unreachable!()
        };
        let rows = b * h * w;
        let kdim = self.patch_len();
        let cols = self.im2col(input);
        let cout = self.out_channels;
        let mut out = vec![0.0; rows * cout];
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(&self.bias);
        }
        gemm(
            rows,
            kdim,
            cout,
            &cols,
            (kdim as isize, 1),
            &self.weight,
            (cout as isize, 1),
            1.0,
            &mut out,
        );
        Tensor::new(vec![b, h, w, cout], out)
    }

    /// Returns `(d_input, d_weight, d_bias)`.
    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
        let &[b, h, w, _] = input.shape() else {
            unreachable!()
        };
        let rows = b * h * w;
        let kdim = self.patch_len();
        let cout = self.out_channels;
        let cols = self.im2col(input);
        let dy = grad_out.data();

        let mut d_weight = vec![0.0; kdim * cout];
        gemm(
            kdim,
            rows,
            cout,
            &cols,
            (1, kdim as isize),
            dy,
            (cout as isize, 1),
            0.0,
            &mut d_weight,
        );
        let mut d_bias = vec![0.0; cout];
        for row in dy.chunks_exact(cout) {
            for (db, g) in d_bias.iter_mut().zip(row) {
                *db += g;
            }
        }
        let mut d_cols = vec![0.0; rows * kdim];
        gemm(
            rows,
            cout,
            kdim,
            dy,
            (cout as isize, 1),
            &self.weight,
            (1, cout as isize),
            0.0,
            &mut d_cols,
        );
        (self.col2im(&d_cols, input.shape()), d_weight, d_bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[inputs, outputs]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inputs,
            outputs,
            weight: fan_in_uniform(rng, inputs, inputs * outputs),
            bias: vec![0.0; outputs],
        }
    }

    /// Treats every batch item as a flat vector.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.item_len() != self.inputs {
            return Err(Error::shape(
                "dense input",
                format!("[B, {}]", self.inputs),
                input.shape(),
            ));
        }
        let b = input.batch();
        let mut out = vec![0.0; b * self.outputs];
        for row in out.chunks_exact_mut(self.outputs) {
            row.copy_from_slice(&self.bias);
        }
        gemm(
            b,
            self.inputs,
            self.outputs,
            input.data(),
            (self.inputs as isize, 1),
            &self.weight,
            (self.outputs as isize, 1),
            1.0,
            &mut out,
        );
        Tensor::new(vec![b, self.outputs], out)
    }

    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
        let b = input.batch();
        let dy = grad_out.data();
        let mut d_weight = vec![0.0; self.inputs * self.outputs];
        gemm(
            self.inputs,
            b,
            self.outputs,
            input.data(),
            (1, self.inputs as isize),
            dy,
            (self.outputs as isize, 1),
            0.0,
            &mut d_weight,
        );
        let mut d_bias = vec![0.0; self.outputs];
        for row in dy.chunks_exact(self.outputs) {
            for (db, g) in d_bias.iter_mut().zip(row) {
                *db += g;
            }
        }
        let mut d_input = vec![0.0; b * self.inputs];
        gemm(
            b,
            self.outputs,
            self.inputs,
            dy,
            (self.outputs as isize, 1),
            &self.weight,
            (1, self.outputs as isize),
            0.0,
            &mut d_input,
        );
        let d_input = Tensor::new(input.shape().to_vec(), d_input).expect("same extent");
        (d_input, d_weight, d_bias)
    }
}

fn spatial_dims(context: &str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::shape(context, "[B, H, W, C]", t.shape())),
    }
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and the flat argmax of
/// every output cell (first maximum wins on ties).
pub fn max_pool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (b, h, w, c) = spatial_dims("maxpool input", input)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("maxpool input", "even height and width", input.shape()));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = vec![0.0; b * oh * ow * c];
    let mut argmax = vec![0usize; out.len()];
    for n in 0..b {
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..c {
                    let o = ((n * oh + y) * ow + x) * c + ch;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((n * h + 2 * y + dy) * w + 2 * x + dx) * c + ch;
                        if src[i] > best {
                            best = src[i];
                            best_at = i;
                        }
                    }
                    out[o] = best;
                    argmax[o] = best_at;
                }
            }
        }
    }
    Ok((Tensor::new(vec![b, oh, ow, c], out)?, argmax))
}

pub fn max_pool2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut d = Tensor::zeros(input_shape.to_vec());
    let dst = d.data_mut();
    for (&i, g) in argmax.iter().zip(grad_out.data()) {
        dst[i] += g;
    }
    d
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(input: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = spatial_dims("upsample input", input)?;
    let (oh, ow) = (2 * h, 2 * w);
    let src = input.data();
    let mut out = vec![0.0; b * oh * ow * c];
    for n in 0..b {
        for y in 0..oh {
            for x in 0..ow {
                let from = ((n * h + y / 2) * w + x / 2) * c;
                let to = ((n * oh + y) * ow + x) * c;
                out[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
    }
    Tensor::new(vec![b, oh, ow, c], out)
}

pub fn upsample2_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let &[b, h, w, c] = input_shape else {
        unreachable!("upsample input is 4-d")
    };
    let (oh, ow) = (2 * h, 2 * w);
    let mut d = Tensor::zeros(input_shape.to_vec());
    let dst = d.data_mut();
    let g = grad_out.data();
    for n in 0..b {
        for y in 0..oh {
            for x in 0..ow {
                let to = ((n * h + y / 2) * w + x / 2) * c;
                let from = ((n * oh + y) * ow + x) * c;
                for ch in 0..c {
                    dst[to + ch] += g[from + ch];
                }
            }
        }
    }
    d
}

/// A named, shaped view of one parameter block.
#[derive(Clone, Debug)]
pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
}

impl Dense {
    pub(crate) fn param_views(&self, name: &str) -> [ParamView<'_>; 2] {
        [
            ParamView {
                name: format!("{name}.weight"),
                shape: vec![self.inputs, self.outputs],
                values: &self.weight,
            },
            ParamView {
                name: format!("{name}.bias"),
                shape: vec![self.outputs],
                values: &self.bias,
            },
        ]
    }
}

/// One stage of a [`Sequential`] network.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Dense(Dense),
    Relu,
    MaxPool2,
    Upsample2,
    /// Inverted dropout with drop probability `p`; identity in evaluation mode.
    Dropout(f64),
    /// Reshape every batch item to the given per-item shape.
    Reshape(Vec<usize>),
}

impl Layer {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::MaxPool2 => "maxpool",
            Layer::Upsample2 => "upsample",
            Layer::Dropout(_) => "dropout",
            Layer::Reshape(_) => "reshape",
        }
    }
}

/// What a layer keeps from its forward pass.
#[derive(Debug)]
pub enum Cache {
    Input(Tensor),
    Mask(Vec<f64>),
    Argmax(Vec<usize>, Vec<usize>),
    Shape(Vec<usize>),
    Identity,
}

/// Forward-pass mode. Training mode carries the RNG that draws dropout masks.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(name: impl Into<String>, layers: Vec<Layer>) -> Self {
        Self {
            name: name.into(),
            layers,
        }
    }

    /// ReLU input signs and max-pool winners recorded in `caches`.
    pub fn activation_pattern(&self, caches: &[Cache]) -> Vec<usize> {
        let mut out = Vec::new();
        for (layer, cache) in self.layers.iter().zip(caches) {
            match (layer, cache) {
                (Layer::Relu, Cache::Input(x)) => out.extend(x.data().iter().map(|&v| (v > 0.0) as usize)),
                (Layer::MaxPool2, Cache::Argmax(_, winners)) => out.extend_from_slice(winners),
                _ => {}
            }
        }
        out
    }

    /// Runs the network, returning its output and one cache per layer.
    pub fn forward(&self, input: Tensor, mode: &mut Mode<'_>) -> Result<(Tensor, Vec<Cache>)> {
        let mut x = input;
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = match layer {
                Layer::Conv(conv) => (conv.forward(&x)?, Cache::Input(x)),
                Layer::Dense(dense) => (dense.forward(&x)?, Cache::Input(x)),
                Layer::Relu => {
                    let mut y = x.clone();
                    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    (y, Cache::Input(x))
                }
                Layer::MaxPool2 => {
                    let shape = x.shape().to_vec();
                    let (y, argmax) = max_pool2(&x)?;
                    (y, Cache::Argmax(shape, argmax))
                }
                Layer::Upsample2 => (upsample2(&x)?, Cache::Shape(x.shape().to_vec())),
                Layer::Dropout(p) => match mode {
                    Mode::Eval => (x, Cache::Identity),
                    Mode::Train(rng) => {
                        let keep = 1.0 - p;
                        let mask: Vec<f64> = (0..x.len())
                            .map(|_| {
                                if rng.random::<f64>() < keep {
                                    1.0 / keep
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let mut y = x;
                        y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                        (y, Cache::Mask(mask))
                    }
                },
                Layer::Reshape(item_shape) => {
                    let shape = x.shape().to_vec();
                    let mut target = vec![x.batch()];
                    target.extend_from_slice(item_shape);
                    (x.reshape(target)?, Cache::Shape(shape))
                }
            };
            if !y.all_finite() {
                return Err(Error::Numeric(format!(
                    "{}.{} ({})",
                    self.name,
                    i,
                    layer.kind()
                )));
            }
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    /// Backpropagates `grad_out` through the network. Returns the parameter gradients
    /// (in [`Sequential::params`] order) and the gradient with respect to the input.
    pub fn backward(&self, caches: Vec<Cache>, grad_out: Tensor) -> (Vec<Vec<f64>>, Tensor) {
        let mut grads: Vec<Vec<f64>> = Vec::new();
        let mut g = grad_out;
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            g = match (layer, cache) {
                (Layer::Conv(conv), Cache::Input(x)) => {
                    let (dx, dw, db) = conv.backward(&x, &g);
                    grads.push(db);
                    grads.push(dw);
                    dx
                }
                (Layer::Dense(dense), Cache::Input(x)) => {
                    let (dx, dw, db) = dense.backward(&x, &g);
                    grads.push(db);
                    grads.push(dw);
                    dx
                }
                (Layer::Relu, Cache::Input(x)) => {
                    g.data_mut()
                        .iter_mut()
                        .zip(x.data())
                        .for_each(|(d, &v)| {
                            if v <= 0.0 {
                                *d = 0.0
                            }
                        });
                    g
                }
                (Layer::MaxPool2, Cache::Argmax(shape, argmax)) => {
                    max_pool2_backward(&shape, &argmax, &g)
                }
                (Layer::Upsample2, Cache::Shape(shape)) => upsample2_backward(&shape, &g),
                (Layer::Dropout(_), Cache::Mask(mask)) => {
                    g.data_mut().iter_mut().zip(&mask).for_each(|(d, m)| *d *= m);
                    g
                }
                (Layer::Dropout(_), Cache::Identity) => g,
                (Layer::Reshape(_), Cache::Shape(shape)) => {
                    g.reshape(shape).expect("reshape preserves extent")
                }
                (layer, cache) => unreachable!("cache {cache:?} does not belong to {layer:?}"),
            };
        }
        grads.reverse();
        (grads, g)
    }

    /// Parameter blocks, weight before bias for each layer.
    pub fn params(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, w_shape, b) = match layer {
                Layer::Conv(c) => (
                    &c.weight,
                    vec![c.kernel, c.kernel, c.in_channels, c.out_channels],
                    &c.bias,
                ),
                Layer::Dense(d) => (&d.weight, vec![d.inputs, d.outputs], &d.bias),
                _ => continue,
            };
            out.push(ParamView {
                name: format!("{}.{}.weight", self.name, i),
                shape: w_shape,
                values: w,
            });
            out.push(ParamView {
                name: format!("{}.{}.bias", self.name, i),
                shape: vec![b.len()],
                values: b,
            });
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                Layer::Dense(d) => {
                    out.push(&mut d.weight);
                    out.push(&mut d.bias);
                }
                _ => {}
            }
        }
        out
    }
}
