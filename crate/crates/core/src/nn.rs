//! Layers built on the tape: dense layers, MLPs and the small convolutional encoder.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Whether a forward pass binds parameters as trainable or as constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Train,
    Frozen,
}

pub(crate) fn bind(tape: &mut Tape, store: &ParamStore, id: ParamId, mode: Binding) -> Var {
    match mode {
        Binding::Train => tape.param(store, id),
        Binding::Frozen => tape.frozen_param(store, id),
    }
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_tensor(&[in_dim, out_dim], bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mode: Binding, x: Var) -> Result<Var> {
        let w = bind(tape, store, self.weight, mode);
        let b = bind(tape, store, self.bias, mode);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Dense layers with ReLU between successive layers (none after the last).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mode: Binding, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = tape.relu(x)?;
            }
            x = layer.forward(tape, store, mode, x)?;
        }
        Ok(x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub projector_hidden: usize,
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: vec![16, 32, 64],
            kernel: 3,
            stride: 1,
            projector_hidden: 128,
            feature_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config("encoder.channels", "channels must be a non-empty list of positive counts"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::config("encoder.kernel", "kernel must be odd and positive"));
        }
        if self.stride == 0 {
            return Err(Error::config("encoder.stride", "stride must be positive"));
        }
        if self.projector_hidden == 0 {
            return Err(Error::config("encoder.projector_hidden", "projector_hidden must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("encoder.feature_dim", "feature_dim must be positive"));
        }
        Ok(())
    }

    /// Width of the pooled backbone output.
    pub fn backbone_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&3)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
}

/// Conv stack (conv, ReLU, 2x2 average pool per stage), global average pool, MLP projector.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    convs: Vec<ConvLayer>,
    projector: Mlp,
}

pub struct EncoderOutput {
    /// Pooled backbone features `[N, C_last]`.
    pub backbone: Var,
    /// Projector output `[N, d]`.
    pub projection: Var,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let mut in_c = 3;
        let mut convs = Vec::new();
        for (i, &out_c) in config.channels.iter().enumerate() {
            let fan_in = in_c * k * k;
            let bound = (6.0 / fan_in as f64).sqrt();
            let weight = store.add(
                format!("{name}.conv{i}.weight"),
                uniform_tensor(&[out_c, in_c, k, k], bound, rng),
            );
            let bias = store.add(format!("{name}.conv{i}.bias"), Tensor::zeros(&[out_c]));
            convs.push(ConvLayer { weight, bias });
            in_c = out_c;
        }
        let projector = Mlp::new(
            store,
            &format!("{name}.projector"),
            &[in_c, config.projector_hidden, config.feature_dim],
            rng,
        );
        Ok(Encoder {
            config: config.clone(),
            convs,
            projector,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn projector(&self) -> &Mlp {
        &self.projector
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.convs.iter().flat_map(|c| [c.weight, c.bias]).collect();
        ids.extend(self.projector.param_ids());
        ids
    }

    /// `x` is an `[N, 3, H, W]` batch with values in `[0, 1]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mode: Binding, x: Var) -> Result<EncoderOutput> {
        let mut h = x;
        let pad = self.config.kernel / 2;
        for conv in &self.convs {
            let w = bind(tape, store, conv.weight, mode);
            let b = bind(tape, store, conv.bias, mode);
            h = tape.conv2d(h, w, Some(b), self.config.stride, pad)?;
            h = tape.relu(h)?;
            let s = tape.value(h).shape();
            if s[2] >= 2 && s[3] >= 2 {
                h = tape.avg_pool2d(h, 2, 2)?;
            }
        }
        let s = tape.value(h).shape().to_vec();
        h = tape.avg_pool2d(h, s[2], s[3])?;
        let backbone = tape.reshape(h, &[s[0], s[1]])?;
        let projection = self.projector.forward(tape, store, mode, backbone)?;
        Ok(EncoderOutput { backbone, projection })
    }
}
