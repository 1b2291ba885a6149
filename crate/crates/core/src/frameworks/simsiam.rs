use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::frameworks::losses::{blend, mean_row_cosine, negative_cosine};
use crate::frameworks::{apply_update, LossParts, Networks, SimsiamPlacement, StepStats};
use crate::nn::{Binding, Mlp};
use crate::optim::Sgd;
use crate::tensor::Tensor;

struct Half {
    loss: Var,
    plain: Var,
    extra: Option<Var>,
    sim: Option<f64>,
}

fn average(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let s = tape.add(a, b)?;
    tape.scale(s, 0.5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimsiamState {
    pub nets: Networks,
    pub placement: SimsiamPlacement,
    pub hallucinated_weight: f64,
}

impl SimsiamState {
    pub fn new(nets: Networks, placement: SimsiamPlacement, hallucinated_weight: f64) -> Result<Self> {
        if nets.predictor.is_none() {
            return Err(Error::Invalid("simsiam needs a predictor network".into()));
        }
        Ok(SimsiamState {
            nets,
            placement,
            hallucinated_weight,
        })
    }

    fn predictor(&self) -> &Mlp {
        self.nets.predictor.as_ref().expect("checked at construction")
    }

    /// One direction of the symmetric loss: predict `target` (detached) from `online`.
    fn half(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        online: Var,
        target: Var,
        lambdas: &[f64],
    ) -> Result<Half> {
        let pred = self.predictor();
        let target = tape.detach(target)?;
        let p = pred.forward(tape, store, Binding::Train, online)?;
        let plain = negative_cosine(tape, p, target)?;
        let Some(hall) = &self.nets.hallucinator else {
            return Ok(Half {
                loss: plain,
                plain,
                extra: None,
                sim: None,
            });
        };
        let p_hat = match self.placement {
            SimsiamPlacement::BeforePredictor => {
                let z_hat = hall.generate(tape, store, online, target, lambdas)?;
                pred.forward(tape, store, Binding::Train, z_hat)?
            }
            SimsiamPlacement::AfterPredictor => hall.generate(tape, store, p, target, lambdas)?,
        };
        let extra = negative_cosine(tape, p_hat, target)?;
        let sim = mean_row_cosine(tape, p_hat, target);
        let loss = blend(tape, plain, extra, self.hallucinated_weight)?;
        Ok(Half {
            loss,
            plain,
            extra: Some(extra),
            sim: Some(sim),
        })
    }

    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x1: &Tensor,
        x2: &Tensor,
        lambdas: &[f64],
    ) -> Result<LossParts> {
        self.loss_with_target(tape, store, None, x1, x2, lambdas)
    }

    /// Like [`SimsiamState::loss`], but with `target_store` given the targets come from a
    /// separate frozen forward pass with those parameters instead of detaching the online
    /// features. With `target_store == store` both routes compute the same values and gradients.
    pub fn loss_with_target(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        target_store: Option<&ParamStore>,
        x1: &Tensor,
        x2: &Tensor,
        lambdas: &[f64],
    ) -> Result<LossParts> {
        let enc = &self.nets.encoder;
        let a = tape.constant(x1.clone())?;
        let z1 = enc.forward(tape, store, Binding::Train, a)?.projection;
        let b = tape.constant(x2.clone())?;
        let z2 = enc.forward(tape, store, Binding::Train, b)?.projection;
        let (t1, t2) = match target_store {
            Some(ts) => (
                enc.forward(tape, ts, Binding::Frozen, a)?.projection,
                enc.forward(tape, ts, Binding::Frozen, b)?.projection,
            ),
            None => (z1, z2),
        };

        let h1 = self.half(tape, store, z1, t2, lambdas)?;
        let h2 = self.half(tape, store, z2, t1, lambdas)?;
        let loss = average(tape, h1.loss, h2.loss)?;
        let plain = average(tape, h1.plain, h2.plain)?;
        let hallucinated = match (h1.extra, h2.extra) {
            (Some(e1), Some(e2)) => Some(average(tape, e1, e2)?),
            _ => None,
        };
        Ok(LossParts {
            loss,
            plain,
            hallucinated,
            keys: z2,
            sim_qk: mean_row_cosine(tape, z1, z2),
            sim_qhat_k: h1.sim.zip(h2.sim).map(|(a, b)| 0.5 * (a + b)),
        })
    }

    pub fn step(&mut self, opt: &mut Sgd, lr: f64, x1: &Tensor, x2: &Tensor, lambdas: &[f64]) -> Result<StepStats> {
        let mut tape = Tape::new();
        let parts = self.loss(&mut tape, &self.nets.store, x1, x2, lambdas)?;
        apply_update(&tape, &parts, &mut self.nets.store, opt, lr, lambdas)
    }
}
