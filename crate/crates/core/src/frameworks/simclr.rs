use crate::autodiff::{ParamStore, Tape};
use crate::error::Result;
use crate::frameworks::losses::{blend, mean_row_dot, nt_xent};
use crate::frameworks::{apply_update, LossParts, Networks, StepStats};
use crate::nn::Binding;
use crate::optim::Sgd;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SimclrState {
    pub nets: Networks,
    pub temperature: f64,
    pub hallucinated_weight: f64,
}

impl SimclrState {
    pub fn new(nets: Networks, temperature: f64, hallucinated_weight: f64) -> Self {
        SimclrState {
            nets,
            temperature,
            hallucinated_weight,
        }
    }

    /// Both branches share the encoder and both receive gradients.
    ///
    /// The hallucinated feature of the first view replaces that view as a positive only; the
    /// negatives for every anchor are always drawn from the real views.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x1: &Tensor,
        x2: &Tensor,
        lambdas: &[f64],
    ) -> Result<LossParts> {
        let enc = &self.nets.encoder;
        let a = tape.constant(x1.clone())?;
        let z1 = enc.forward(tape, store, Binding::Train, a)?.projection;
        let z1 = tape.l2_normalize(z1)?;
        let b = tape.constant(x2.clone())?;
        let z2 = enc.forward(tape, store, Binding::Train, b)?.projection;
        let z2 = tape.l2_normalize(z2)?;

        let views = tape.concat(z1, z2, 0)?;
        let swapped = tape.concat(z2, z1, 0)?;
        let plain = nt_xent(tape, views, swapped, views, self.temperature)?;
        let sim_qk = mean_row_dot(tape, z1, z2);

        let Some(hall) = &self.nets.hallucinator else {
            return Ok(LossParts {
                loss: plain,
                plain,
                hallucinated: None,
                keys: z2,
                sim_qk,
                sim_qhat_k: None,
            });
        };
        let z_hat = hall.generate(tape, store, z1, z2, lambdas)?;
        let z_hat = tape.l2_normalize(z_hat)?;
        let anchors = tape.concat(z_hat, z2, 0)?;
        let positives = tape.concat(z2, z_hat, 0)?;
        let extra = nt_xent(tape, anchors, positives, views, self.temperature)?;
        let loss = blend(tape, plain, extra, self.hallucinated_weight)?;
        Ok(LossParts {
            loss,
            plain,
            hallucinated: Some(extra),
            keys: z2,
            sim_qk,
            sim_qhat_k: Some(mean_row_dot(tape, z_hat, z2)),
        })
    }

    pub fn step(&mut self, opt: &mut Sgd, lr: f64, x1: &Tensor, x2: &Tensor, lambdas: &[f64]) -> Result<StepStats> {
        let mut tape = Tape::new();
        let parts = self.loss(&mut tape, &self.nets.store, x1, x2, lambdas)?;
        apply_update(&tape, &parts, &mut self.nets.store, opt, lr, lambdas)
    }
}
