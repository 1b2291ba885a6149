//! The pretraining loop, its metrics log and checkpoints.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::checkpoint::{Container, RngState};
use crate::config::ExperimentConfig;
use crate::data::{augment_batch, images_to_tensor, Image};
use crate::error::{Error, Result};
use crate::frameworks::{
    backbone_features, encode, FeatureQueue, Framework, FrameworkState, MocoState, Networks, SimclrState,
    SimsiamPlacement, SimsiamState,
};
use crate::hallucinator::Hallucinator;
use crate::metrics::{mean_cosine, project_2d, uniformity_g, uniformity_positive, PairMode, ReportRow};
use crate::nn::{Encoder, Mlp};
use crate::optim::{cosine_lr, Sgd};
use crate::rng::{domain, substream};
use crate::tensor::{norm, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub framework: Framework,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on the total number of steps; the schedule is annealed over the capped length.
    pub max_steps: Option<u64>,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Key-encoder momentum `m`.
    pub moco_momentum: f64,
    pub temperature: f64,
    pub queue_size: usize,
    /// Weight of the hallucinated pair in the averaged loss.
    pub hallucinated_weight: f64,
    pub simsiam_placement: SimsiamPlacement,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            framework: Framework::Moco,
            batch_size: 64,
            epochs: 20,
            max_steps: None,
            lr: 0.06,
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            moco_momentum: 0.99,
            temperature: 0.2,
            queue_size: 1024,
            hallucinated_weight: 0.5,
            simsiam_placement: SimsiamPlacement::BeforePredictor,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size", "batch_size must be at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::config("train.sgd_momentum", "sgd_momentum must be in [0,1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "weight_decay must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.moco_momentum) {
            return Err(Error::config("train.moco_momentum", "moco_momentum must be in [0,1]"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("train.temperature", "temperature must be positive"));
        }
        if self.queue_size == 0 {
            return Err(Error::config("train.queue_size", "queue_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.hallucinated_weight) {
            return Err(Error::config("train.hallucinated_weight", "hallucinated_weight must be in [0,1]"));
        }
        Ok(())
    }
}

/// One row of the per-step metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    /// 1-based step index.
    pub step: u64,
    /// 1-based epoch index.
    pub epoch: u64,
    pub loss: f64,
    pub sim_qk: f64,
    pub sim_qhat_k: Option<f64>,
    pub lambda_mean: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,loss,sim_qk,sim_qhat_k,lambda_mean,lr";

impl MetricsRecord {
    pub fn csv_line(&self) -> String {
        let hat = self.sim_qhat_k.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.epoch, self.loss, self.sim_qk, hat, self.lambda_mean, self.lr
        )
    }
}

/// Writes a complete metrics CSV (header plus one line per record).
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_line())?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Appends records to an existing metrics CSV.
pub fn append_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().append(true).open(path)?;
    for r in records {
        writeln!(f, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Per-epoch means of the similarity columns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub loss: f64,
    pub sim_qk: f64,
    pub sim_qhat_k: Option<f64>,
}

pub fn epoch_summaries(records: &[MetricsRecord]) -> Vec<EpochSummary> {
    let mut out: Vec<EpochSummary> = Vec::new();
    for group in records.chunk_by(|a, b| a.epoch == b.epoch) {
        let n = group.len() as f64;
        let hat: Option<Vec<f64>> = group.iter().map(|r| r.sim_qhat_k).collect();
        out.push(EpochSummary {
            epoch: group[0].epoch,
            loss: group.iter().map(|r| r.loss).sum::<f64>() / n,
            sim_qk: group.iter().map(|r| r.sim_qk).sum::<f64>() / n,
            sim_qhat_k: hat.map(|h| h.iter().sum::<f64>() / n),
        });
    }
    out
}

/// Worker count for batch augmentation, from `HCL_THREADS` when set.
fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = std::env::var("HCL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start worker pool: {e}")))
}

/// Fresh networks and framework state for `cfg`, initialized from `seed`.
pub fn build_state(cfg: &ExperimentConfig, seed: u64) -> Result<FrameworkState> {
    let mut rng = substream(seed, domain::INIT, &[]);
    let mut store = ParamStore::new();
    let encoder = Encoder::new(&mut store, "encoder", &cfg.encoder, &mut rng)?;
    let d = encoder.feature_dim();
    let hallucinator = if cfg.hallucinator.enabled {
        Some(Hallucinator::new(&mut store, d, &cfg.hallucinator, &mut rng)?)
    } else {
        None
    };
    let t = &cfg.train;
    let predictor = (t.framework == Framework::Simsiam)
        .then(|| Mlp::new(&mut store, "predictor", &[d, (d / 4).max(1), d], &mut rng));
    let nets = Networks {
        store,
        encoder,
        hallucinator,
        predictor,
    };
    Ok(match t.framework {
        Framework::Moco => {
            let mut queue = FeatureQueue::new(t.queue_size, d);
            queue.enqueue(&initial_queue(t.queue_size, d, seed))?;
            FrameworkState::Moco(MocoState::new(
                nets,
                queue,
                t.moco_momentum,
                t.temperature,
                t.hallucinated_weight,
            ))
        }
        Framework::Simclr => FrameworkState::Simclr(SimclrState::new(nets, t.temperature, t.hallucinated_weight)),
        Framework::Simsiam => {
            FrameworkState::Simsiam(SimsiamState::new(nets, t.simsiam_placement, t.hallucinated_weight)?)
        }
    })
}

/// `k` random unit vectors: the queue starts full, as in the reference MoCo design.
fn initial_queue(k: usize, d: usize, seed: u64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = substream(seed, domain::QUEUE, &[]);
    let mut data = Vec::with_capacity(k * d);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        data.extend(v);
    }
    Tensor::new(vec![k, d], data).expect("k, d >= 1")
}

/// Resizes images to `out_size` and stacks them without any random augmentation.
pub fn eval_tensor(images: &[Image], out_size: usize) -> Result<Tensor> {
    let views: Result<Vec<Image>> = images.iter().map(|img| img.resized(out_size, out_size)).collect();
    images_to_tensor(&views?)
}

pub struct Trainer {
    config: ExperimentConfig,
    seed: u64,
    images: Vec<Image>,
    state: FrameworkState,
    opt: Sgd,
    step: u64,
    batches_per_epoch: u64,
    total_steps: u64,
    pool: rayon::ThreadPool,
}

impl Trainer {
    /// `cfg` must already be validated; `cfg.seed` falls back to the default seed.
    pub fn new(cfg: &ExperimentConfig, images: Vec<Image>) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let seed = cfg.resolved_seed();
        let state = build_state(cfg, seed)?;
        let opt = Sgd::new(&state.nets().store, cfg.train.sgd_momentum, cfg.train.weight_decay);
        let batches_per_epoch = (images.len() / cfg.train.batch_size).max(1) as u64;
        let planned = cfg.train.epochs as u64 * batches_per_epoch;
        let total_steps = cfg.train.max_steps.map_or(planned, |m| m.min(planned));
        Ok(Trainer {
            config: cfg.clone(),
            seed,
            images,
            state,
            opt,
            step: 0,
            batches_per_epoch,
            total_steps,
            pool: thread_pool()?,
        })
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: &ExperimentConfig, images: Vec<Image>, ckpt: &Container) -> Result<Self> {
        let mut t = Trainer::new(cfg, images)?;
        if ckpt.rng.seed != t.seed {
            return Err(Error::Container(format!(
                "checkpoint seed {} does not match configured seed {}",
                ckpt.rng.seed, t.seed
            )));
        }
        t.load_weights(ckpt)?;
        let store = &t.state.nets().store;
        let mut velocity = Vec::with_capacity(store.len());
        for p in store.iter() {
            velocity.push(fetch(ckpt, &format!("velocity/{}", p.name), p.value.shape())?);
        }
        t.opt.set_velocity(velocity);
        if let FrameworkState::Moco(m) = &mut t.state {
            let q = ckpt
                .queue
                .as_ref()
                .ok_or_else(|| Error::Container("checkpoint has no queue".into()))?;
            m.queue.restore(q)?;
        }
        if ckpt.rng.next_step > t.total_steps {
            return Err(Error::Container(format!(
                "checkpoint is at step {} but the run has only {} steps",
                ckpt.rng.next_step, t.total_steps
            )));
        }
        t.step = ckpt.rng.next_step;
        Ok(t)
    }

    /// Loads parameters (and MoCo key parameters) only; optimizer and schedule state stay fresh.
    pub fn load_weights(&mut self, ckpt: &Container) -> Result<()> {
        let nets = self.state.nets_mut();
        for id in nets.store.ids().collect::<Vec<_>>() {
            let p = nets.store.get_mut(id);
            p.value = fetch(ckpt, &format!("param/{}", p.name), p.value.shape())?;
        }
        if let FrameworkState::Moco(m) = &mut self.state {
            for id in m.key_store.ids().collect::<Vec<_>>() {
                let p = m.key_store.get_mut(id);
                p.value = fetch(ckpt, &format!("key/{}", p.name), p.value.shape())?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Container {
        let store = &self.state.nets().store;
        let mut tensors: Vec<(String, Tensor)> =
            store.iter().map(|p| (format!("param/{}", p.name), p.value.clone())).collect();
        let mut queue = None;
        if let FrameworkState::Moco(m) = &self.state {
            tensors.extend(m.key_store.iter().map(|p| (format!("key/{}", p.name), p.value.clone())));
            queue = m.queue.to_tensor().ok();
        }
        tensors.extend(
            store
                .iter()
                .zip(self.opt.velocity())
                .map(|(p, v)| (format!("velocity/{}", p.name), v.clone())),
        );
        Container {
            tensors,
            queue,
            rng: RngState {
                seed: self.seed,
                next_step: self.step,
            },
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.batches_per_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn state(&self) -> &FrameworkState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut FrameworkState {
        &mut self.state
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    fn batch_ids(&self, step: u64) -> Vec<usize> {
        let epoch = step / self.batches_per_epoch;
        let within = (step % self.batches_per_epoch) as usize;
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        order.shuffle(&mut substream(self.seed, domain::SHUFFLE, &[epoch]));
        let b = self.config.train.batch_size;
        let start = within * b;
        // With fewer images than one batch, the single batch per epoch is the whole set.
        order[start..(start + b).min(order.len())].to_vec()
    }

    /// Runs one step and returns its log record.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        if self.is_finished() {
            return Err(Error::Invalid("training already finished".into()));
        }
        let step = self.step;
        let epoch = step / self.batches_per_epoch;
        let ids = self.batch_ids(step);
        let refs: Vec<&Image> = ids.iter().map(|&i| &self.images[i]).collect();
        let ids64: Vec<u64> = ids.iter().map(|&i| i as u64).collect();
        let (v1, v2) = self
            .pool
            .install(|| augment_batch(&refs, &ids64, &self.config.augment, self.seed, epoch))?;
        let (x1, x2) = (images_to_tensor(&v1)?, images_to_tensor(&v2)?);
        let lambdas = match &self.state.nets().hallucinator {
            Some(h) => h.sample_lambdas(ids.len(), &mut substream(self.seed, domain::LAMBDA, &[step])),
            None => Vec::new(),
        };
        let lr = cosine_lr(self.config.train.lr, step, self.total_steps);
        let stats = self
            .state
            .step(&mut self.opt, lr, &x1, &x2, &lambdas)
            .map_err(|e| match e {
                Error::NonFinite { .. } | Error::ZeroNorm { .. } => Error::NonFiniteLoss { step: step + 1 },
                other => other,
            })?;
        if !stats.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: step + 1 });
        }
        self.step += 1;
        Ok(MetricsRecord {
            step: step + 1,
            epoch: epoch + 1,
            loss: stats.loss,
            sim_qk: stats.sim_qk,
            sim_qhat_k: stats.sim_qhat_k,
            lambda_mean: stats.lambda_mean,
            lr,
        })
    }

    /// Trains until the schedule ends or `stop_after` total steps have been taken.
    pub fn run(&mut self, stop_after: Option<u64>) -> Result<Vec<MetricsRecord>> {
        let end = stop_after.map_or(self.total_steps, |s| s.min(self.total_steps));
        let mut records = Vec::new();
        while self.step < end {
            records.push(self.train_step()?);
        }
        Ok(records)
    }

    /// Pooled backbone features of un-augmented images.
    pub fn backbone_features(&self, images: &[Image]) -> Result<Tensor> {
        let x = eval_tensor(images, self.config.augment.out_size)?;
        let nets = self.state.nets();
        backbone_features(&nets.encoder, &nets.store, &x, 256)
    }

    /// Similarity and uniformity report over augmented pairs of `images`.
    pub fn diagnostics(&self, images: &[Image]) -> Result<Vec<ReportRow>> {
        let mc = &self.config.metrics;
        let n = images.len().min(mc.max_samples);
        if n < 2 {
            return Err(Error::Dataset("metrics need at least 2 images".into()));
        }
        let refs: Vec<&Image> = images[..n].iter().collect();
        let ids: Vec<u64> = (0..n as u64).collect();
        let eval_seed = substream(self.seed, domain::EVAL, &[]).next_u64();
        let (v1, v2) = self
            .pool
            .install(|| augment_batch(&refs, &ids, &self.config.augment, eval_seed, 0))?;
        let nets = self.state.nets();
        let mut q = Vec::new();
        let mut k = Vec::new();
        for (a, b) in v1.chunks(256).zip(v2.chunks(256)) {
            q.extend_from_slice(encode(&nets.encoder, &nets.store, &images_to_tensor(a)?)?.data());
            k.extend_from_slice(encode(&nets.encoder, &nets.store, &images_to_tensor(b)?)?.data());
        }
        let d = nets.encoder.feature_dim();
        let q = Tensor::new(vec![n, d], q)?;
        let k = Tensor::new(vec![n, d], k)?;
        let t = mc.t;
        let mut rows = vec![ReportRow {
            metric: "sim_qk".into(),
            value: mean_cosine(&q, &k)?,
            t: None,
            n_samples: n,
        }];
        let g = match mc.pairs {
            PairMode::AllPairs => uniformity_g(&q, t)?,
            PairMode::PositivePairs => uniformity_positive(&q, &k, t)?,
        };
        rows.push(ReportRow {
            metric: "uniformity".into(),
            value: g.g_value,
            t: Some(t),
            n_samples: g.sample_count,
        });
        if d >= 2 {
            let p = project_2d(&q, mc.projection, self.seed)?;
            let g2 = match mc.pairs {
                PairMode::AllPairs => uniformity_g(&p, t)?,
                PairMode::PositivePairs => uniformity_positive(&p, &project_2d(&k, mc.projection, self.seed)?, t)?,
            };
            rows.push(ReportRow {
                metric: "uniformity_2d".into(),
                value: g2.g_value,
                t: Some(t),
                n_samples: g2.sample_count,
            });
        }
        Ok(rows)
    }
}

fn fetch(ckpt: &Container, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = ckpt
        .get(name)
        .ok_or_else(|| Error::Container(format!("checkpoint is missing `{name}`")))?;
    if t.shape() != shape {
        return Err(Error::Container(format!(
            "`{name}` has shape {:?}, expected {:?}",
            t.shape(),
            shape
        )));
    }
    Ok(t.clone())
}
