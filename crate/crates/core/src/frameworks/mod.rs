//! Siamese contrastive frameworks with an optional hallucinated positive on one branch.

pub mod losses;
mod moco;
mod simclr;
mod simsiam;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::Result;
use crate::hallucinator::Hallucinator;
use crate::nn::{Binding, Encoder, Mlp};
use crate::optim::Sgd;
use crate::tensor::Tensor;

pub use moco::{FeatureQueue, MocoState};
pub use simclr::SimclrState;
pub use simsiam::SimsiamState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    Moco,
    Simclr,
    Simsiam,
}

impl Framework {
    pub fn name(self) -> &'static str {
        match self {
            Framework::Moco => "moco",
            Framework::Simclr => "simclr",
            Framework::Simsiam => "simsiam",
        }
    }
}

/// Where the hallucinator sits on the predictor branch of the stop-gradient framework.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimsiamPlacement {
    /// On the projector output, so the hallucinated feature also passes through the predictor.
    #[default]
    BeforePredictor,
    /// On the predictor output.
    AfterPredictor,
}

/// Every trainable piece of a framework, sharing one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub hallucinator: Option<Hallucinator>,
    pub predictor: Option<Mlp>,
}

/// Graph handles and diagnostics from one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    /// Value that is back-propagated.
    pub loss: Var,
    /// Loss over the ordinary positive pairs only.
    pub plain: Var,
    /// Loss over the hallucinated pairs, if the hallucinator is enabled.
    pub hallucinated: Option<Var>,
    /// Target-branch features (keys for MoCo).
    pub keys: Var,
    pub sim_qk: f64,
    pub sim_qhat_k: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub sim_qk: f64,
    pub sim_qhat_k: Option<f64>,
    pub lambda_mean: f64,
}

/// Projected features of an `[N, 3, H, W]` batch, without recording gradients.
pub fn encode(encoder: &Encoder, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone())?;
    let out = encoder.forward(&mut tape, store, Binding::Frozen, x)?;
    Ok(tape.value(out.projection).clone())
}

/// Pooled backbone features, computed in chunks of `chunk` images.
pub fn backbone_features(encoder: &Encoder, store: &ParamStore, images: &Tensor, chunk: usize) -> Result<Tensor> {
    let shape = images.shape().to_vec();
    let per = shape[1..].iter().product::<usize>();
    let mut data = Vec::new();
    let mut width = 0;
    for start in (0..shape[0]).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(shape[0]);
        let mut s = shape.clone();
        s[0] = end - start;
        let part = Tensor::new(s, images.data()[start * per..end * per].to_vec())?;
        let mut tape = Tape::new();
        let x = tape.constant(part)?;
        let out = encoder.forward(&mut tape, store, Binding::Frozen, x)?;
        let feats = tape.value(out.backbone);
        width = feats.shape()[1];
        data.extend_from_slice(feats.data());
    }
    Tensor::new(vec![shape[0], width], data)
}

/// Framework-specific trainable state.
#[derive(Clone, Debug, PartialEq)]
pub enum FrameworkState {
    Moco(MocoState),
    Simclr(SimclrState),
    Simsiam(SimsiamState),
}

impl FrameworkState {
    pub fn framework(&self) -> Framework {
        match self {
            FrameworkState::Moco(_) => Framework::Moco,
            FrameworkState::Simclr(_) => Framework::Simclr,
            FrameworkState::Simsiam(_) => Framework::Simsiam,
        }
    }

    pub fn nets(&self) -> &Networks {
        match self {
            FrameworkState::Moco(s) => &s.nets,
            FrameworkState::Simclr(s) => &s.nets,
            FrameworkState::Simsiam(s) => &s.nets,
        }
    }

    pub fn nets_mut(&mut self) -> &mut Networks {
        match self {
            FrameworkState::Moco(s) => &mut s.nets,
            FrameworkState::Simclr(s) => &mut s.nets,
            FrameworkState::Simsiam(s) => &mut s.nets,
        }
    }

    /// Builds the loss graph against `store`, which must share the layout of `nets().store`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x1: &Tensor,
        x2: &Tensor,
        lambdas: &[f64],
    ) -> Result<LossParts> {
        match self {
            FrameworkState::Moco(s) => s.loss(tape, store, x1, x2, lambdas),
            FrameworkState::Simclr(s) => s.loss(tape, store, x1, x2, lambdas),
            FrameworkState::Simsiam(s) => s.loss(tape, store, x1, x2, lambdas),
        }
    }

    pub fn step(&mut self, opt: &mut Sgd, lr: f64, x1: &Tensor, x2: &Tensor, lambdas: &[f64]) -> Result<StepStats> {
        match self {
            FrameworkState::Moco(s) => s.step(opt, lr, x1, x2, lambdas),
            FrameworkState::Simclr(s) => s.step(opt, lr, x1, x2, lambdas),
            FrameworkState::Simsiam(s) => s.step(opt, lr, x1, x2, lambdas),
        }
    }
}

/// Shared tail of every step: backward, optimizer update, statistics.
pub(crate) fn apply_update(
    tape: &Tape,
    parts: &LossParts,
    store: &mut ParamStore,
    opt: &mut Sgd,
    lr: f64,
    lambdas: &[f64],
) -> Result<StepStats> {
    store.zero_grad();
    tape.backward(parts.loss, store)?;
    opt.step(store, lr);
    let lambda_mean = if lambdas.is_empty() {
        0.0
    } else {
        lambdas.iter().sum::<f64>() / lambdas.len() as f64
    };
    Ok(StepStats {
        loss: tape.value(parts.loss).item(),
        sim_qk: parts.sim_qk,
        sim_qhat_k: parts.sim_qhat_k,
        lambda_mean,
    })
}
