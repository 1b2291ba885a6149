use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::optim::{step_decay_lr, Sgd};
use crate::rng::{domain, substream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Share of samples held out for evaluation.
    pub val_fraction: f64,
    /// Standardize features with statistics of the training split.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            lr: 0.3,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 256,
            val_fraction: 0.2,
            standardize: true,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("probe.epochs", "epochs must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("probe.lr", "lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("probe.momentum", "momentum must be in [0,1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("probe.weight_decay", "weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("probe.batch_size", "batch_size must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("probe.val_fraction", "val_fraction must be in (0,1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    /// Top-1 accuracy on the held-out split.
    pub top1: f64,
    /// Held-out accuracy per class; `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
    pub epochs: usize,
}

fn gather(features: &Tensor, idx: &[usize]) -> Vec<f64> {
    let d = features.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&features.data()[i * d..(i + 1) * d]);
    }
    out
}

/// Trains a softmax linear classifier on frozen `[n, d]` features and reports held-out accuracy.
///
/// The input tensor is only read; standardization works on a copy.
pub fn linear_probe(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    cfg.validate()?;
    let (n, d) = features.dims2("linear_probe")?;
    if labels.len() != n {
        return Err(Error::Invalid(format!("{n} feature rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Invalid(format!("label {bad} outside {num_classes} classes")));
    }
    if n < 2 {
        return Err(Error::Invalid("linear probe needs at least 2 samples".into()));
    }
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, domain::PROBE, &[0]));
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut train = gather(features, train_idx);
    let mut val = gather(features, val_idx);
    if cfg.standardize {
        let m = train_idx.len() as f64;
        for j in 0..d {
            let mean = train.iter().skip(j).step_by(d).sum::<f64>() / m;
            let var = train.iter().skip(j).step_by(d).map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            let sd = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
            for v in train.iter_mut().skip(j).step_by(d).chain(val.iter_mut().skip(j).step_by(d)) {
                *v = (*v - mean) / sd;
            }
        }
    }
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();

    let mut store = ParamStore::new();
    let w = store.add("probe.weight", Tensor::zeros(&[d, num_classes]));
    let b = store.add("probe.bias", Tensor::zeros(&[num_classes]));
    let mut opt = Sgd::new(&store, cfg.momentum, cfg.weight_decay);
    let mut batch_order: Vec<usize> = (0..train_idx.len()).collect();
    for epoch in 0..cfg.epochs {
        batch_order.shuffle(&mut substream(seed, domain::PROBE, &[1, epoch as u64]));
        let lr = step_decay_lr(cfg.lr, epoch, cfg.epochs);
        for chunk in batch_order.chunks(cfg.batch_size) {
            let mut x = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                x.extend_from_slice(&train[i * d..(i + 1) * d]);
            }
            let targets: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new(vec![chunk.len(), d], x)?)?;
            let wv = tape.param(&store, w);
            let bv = tape.param(&store, b);
            let logits = tape.matmul(xv, wv)?;
            let logits = tape.add_bias(logits, bv)?;
            let loss = tape.softmax_cross_entropy(logits, &targets, None)?;
            store.zero_grad();
            tape.backward(loss, &mut store)?;
            opt.step(&mut store, lr);
        }
    }

    let (wt, bt) = (store.value(w).data(), store.value(b).data());
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (row, &i) in val.chunks(d).zip(val_idx) {
        let score = |c: usize| bt[c] + row.iter().enumerate().map(|(j, v)| v * wt[j * num_classes + c]).sum::<f64>();
        let pred = (0..num_classes)
            .map(|c| (c, score(c)))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0;
        totals[labels[i]] += 1;
        if pred == labels[i] {
            hits[labels[i]] += 1;
        }
    }
    let per_class = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    Ok(ProbeResult {
        top1: hits.iter().sum::<usize>() as f64 / n_val as f64,
        per_class,
        epochs: cfg.epochs,
    })
}
