use std::collections::VecDeque;

use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::frameworks::losses::{blend, info_nce, mean_row_dot};
use crate::frameworks::{apply_update, LossParts, Networks, StepStats};
use crate::nn::Binding;
use crate::optim::Sgd;
use crate::tensor::Tensor;

/// FIFO of unit-norm negative features, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    rows: VecDeque<Vec<f64>>,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        FeatureQueue {
            capacity,
            dim,
            rows: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Appends the rows of `batch` (`[B, d]`) and drops the oldest beyond capacity.
    pub fn enqueue(&mut self, batch: &Tensor) -> Result<()> {
        let (_, d) = batch.dims2("enqueue")?;
        if d != self.dim {
            return Err(Error::ShapeMismatch {
                op: "enqueue",
                lhs: vec![self.capacity, self.dim],
                rhs: batch.shape().to_vec(),
            });
        }
        for row in batch.rows() {
            self.rows.push_back(row.to_vec());
            if self.rows.len() > self.capacity {
                self.rows.pop_front();
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.iter().map(Vec::as_slice)
    }

    /// `[len, d]` snapshot, oldest first.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.rows.len(), self.dim], self.rows.iter().flatten().copied().collect())
    }

    /// Replaces the contents with the rows of `t`, keeping at most `capacity` newest rows.
    pub fn restore(&mut self, t: &Tensor) -> Result<()> {
        self.rows.clear();
        self.enqueue(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MocoState {
    pub nets: Networks,
    /// Momentum copy of the encoder; never receives gradients.
    pub key_store: ParamStore,
    pub queue: FeatureQueue,
    pub momentum: f64,
    pub temperature: f64,
    pub hallucinated_weight: f64,
}

impl MocoState {
    /// The key encoder starts as an exact copy of the query encoder.
    pub fn new(nets: Networks, queue: FeatureQueue, momentum: f64, temperature: f64, hallucinated_weight: f64) -> Self {
        MocoState {
            key_store: nets.store.clone(),
            nets,
            queue,
            momentum,
            temperature,
            hallucinated_weight,
        }
    }

    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x1: &Tensor,
        x2: &Tensor,
        lambdas: &[f64],
    ) -> Result<LossParts> {
        if self.queue.is_empty() {
            return Err(Error::Invalid("negative queue is empty".into()));
        }
        let enc = &self.nets.encoder;
        let xq = tape.constant(x1.clone())?;
        let q = enc.forward(tape, store, Binding::Train, xq)?.projection;
        let q = tape.l2_normalize(q)?;

        let xk = tape.constant(x2.clone())?;
        let k = enc.forward(tape, &self.key_store, Binding::Frozen, xk)?.projection;
        let k = tape.l2_normalize(k)?;
        let k = tape.detach(k)?;

        let negatives = tape.constant(self.queue.to_tensor()?)?;
        let plain = info_nce(tape, q, k, negatives, self.temperature)?;
        let sim_qk = mean_row_dot(tape, q, k);

        let Some(hall) = &self.nets.hallucinator else {
            return Ok(LossParts {
                loss: plain,
                plain,
                hallucinated: None,
                keys: k,
                sim_qk,
                sim_qhat_k: None,
            });
        };
        let q_hat = hall.generate(tape, store, q, k, lambdas)?;
        let q_hat = tape.l2_normalize(q_hat)?;
        let extra = info_nce(tape, q_hat, k, negatives, self.temperature)?;
        let loss = blend(tape, plain, extra, self.hallucinated_weight)?;
        Ok(LossParts {
            loss,
            plain,
            hallucinated: Some(extra),
            keys: k,
            sim_qk,
            sim_qhat_k: Some(mean_row_dot(tape, q_hat, k)),
        })
    }

    /// `theta_k <- m theta_k + (1 - m) theta_q` over the encoder parameters.
    pub fn momentum_update(&mut self) {
        let m = self.momentum;
        for id in self.nets.encoder.param_ids() {
            let q = self.nets.store.value(id).data().to_vec();
            for (k, q) in self.key_store.get_mut(id).value.data_mut().iter_mut().zip(q) {
                *k = m * *k + (1.0 - m) * q;
            }
        }
    }

    /// One optimization step: loss, backward, SGD update, momentum update, enqueue keys.
    pub fn step(&mut self, opt: &mut Sgd, lr: f64, x1: &Tensor, x2: &Tensor, lambdas: &[f64]) -> Result<StepStats> {
        let mut tape = Tape::new();
        let parts = self.loss(&mut tape, &self.nets.store, x1, x2, lambdas)?;
        let stats = apply_update(&tape, &parts, &mut self.nets.store, opt, lr, lambdas)?;
        self.momentum_update();
        self.queue.enqueue(tape.value(parts.keys))?;
        Ok(stats)
    }
}
