//! Contrastive pre-training: SGD with Nesterov momentum, linear warmup into
//! cosine annealing, early stopping on validation loss.
//!
//! Results are bit-reproducible for a fixed seed; everything runs on the
//! calling thread.

use std::collections::HashMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Modality, ParticleSample};
use crate::encoders::{DualEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::nn::{DType, Float, Graph, Mode, ParamId, ParamKind, ParamStore, Tensor, Var};
use crate::preprocess::{self, AugmentConfig, ImageTensor, PrepMode, ProfileTensor};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Base learning rate; when absent the loss-specific default is used
    /// (0.005 for InfoNCE, 0.002 for sigmoid).
    pub lr: Option<f64>,
    pub min_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Parameter precision during training.
    pub dtype: DType,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Infonce,
            lr: None,
            min_lr: 0.0,
            momentum: 0.9,
            weight_decay: 0.001,
            max_epochs: 100,
            warmup_epochs: 5,
            patience: 30,
            batch_size: 64,
            seed: 0,
            dtype: DType::F32,
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The paper's batch size of 256.
    pub fn paper_preset() -> Self {
        TrainConfig {
            batch_size: 256,
            ..Self::default()
        }
    }

    pub fn default_lr(loss: LossKind) -> f64 {
        match loss {
            LossKind::Infonce => 0.005,
            LossKind::Sigmoid => 0.002,
        }
    }

    pub fn base_lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| Self::default_lr(self.loss))
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.base_lr();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.min_lr.is_finite() && self.min_lr >= 0.0 && self.min_lr <= lr) {
            return Err(Error::config("train.min_lr", "must be in [0, lr]"));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::config("train.momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be at least 1"));
        }
        if self.warmup_epochs > self.max_epochs {
            return Err(Error::config(
                "train.warmup_epochs",
                "must not exceed max_epochs",
            ));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        self.encoder.validate()?;
        self.augment.validate()
    }
}

/// Learning rate for `epoch` (0-based): linear warmup to the base rate over
/// `warmup_epochs`, then half-cosine down to `min_lr`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.max_epochs {
        return Err(Error::InvalidInput(format!(
            "epoch {epoch} outside [0, {})",
            cfg.max_epochs
        )));
    }
    let base = cfg.base_lr();
    let w = cfg.warmup_epochs;
    if epoch < w {
        return Ok(base * (epoch + 1) as f64 / w as f64);
    }
    let span = (cfg.max_epochs - w) as f64;
    let progress = (epoch - w) as f64 / span;
    Ok(cfg.min_lr + (base - cfg.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement
/// over the best validation loss so far.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

/// SGD with Nesterov momentum and L2 weight decay,
/// matching the common deep-learning framework update:
/// `g += wd*p; buf = mu*buf + g; p -= lr*(g + mu*buf)`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: HashMap<ParamId, Vec<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: HashMap::new(),
        }
    }

    /// Applies one update. Parameters of kind `Weight { decay: false }` get
    /// no weight decay; buffers are never touched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        let mu = T::of(self.momentum);
        let lr = T::of(lr);
        for (id, grad) in grads {
            let decay = match store.entry(*id).kind {
                ParamKind::Weight { decay } => decay,
                ParamKind::Buffer => continue,
            };
            let wd = T::of(if decay { self.weight_decay } else { 0.0 });
            let p = store.get_mut(*id).data_mut();
            let buf = self
                .buffers
                .entry(*id)
                .or_insert_with(|| vec![T::zero(); p.len()]);
            for ((pv, &gv), b) in p.iter_mut().zip(grad.data()).zip(buf.iter_mut()) {
                let g = gv + wd * *pv;
                *b = mu * *b + g;
                *pv -= lr * (g + mu * *b);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "max-epochs",
            StopReason::EarlyStop => "early-stop",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub tau: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss: LossKind,
    pub base_lr: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
}

impl TrainReport {
    /// Tab-separated per-epoch table with a commented header.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "# loss={} lr={} best_epoch={} best_val_loss={} stop={}\n",
            self.loss, self.base_lr, self.best_epoch, self.best_val_loss, self.stop_reason
        );
        s.push_str("epoch\ttrain_loss\tval_loss\tlr\ttau\tbias\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.epoch, e.train_loss, e.val_loss, e.lr, e.tau, e.bias
            ));
        }
        s
    }
}

/// Forward pass of one batch of matched pairs up to the scalar loss.
pub fn batch_loss<T: Float>(
    model: &DualEncoder<T>,
    g: &mut Graph<'_, T>,
    images: &[ImageTensor],
    profiles: &[ProfileTensor],
    kind: LossKind,
) -> Result<Var> {
    if images.len() != profiles.len() {
        return Err(Error::Shape(format!(
            "{} images but {} profiles in a batch",
            images.len(),
            profiles.len()
        )));
    }
    let ri = model.encode_images(g, images)?;
    let rp = model.encode_profiles(g, profiles)?;
    let ei = model.project(g, ri, Modality::Image)?;
    let ep = model.project(g, rp, Modality::Profile)?;
    let s = g.matmul_nt(ei, ep);
    let log_tau = g.param(model.log_tau);
    let bias = g.param(model.bias);
    g.contrastive_loss(kind, s, log_tau, bias)
}

/// Eval-mode preprocessing of every sample.
pub fn eval_tensors(
    samples: &[ParticleSample],
    aug: &AugmentConfig,
) -> Result<(Vec<ImageTensor>, Vec<ProfileTensor>)> {
    // Eval preprocessing draws no random numbers; the RNG is a placeholder.
    let mut rng = seed::rng(0, 0, 0);
    let mut images = Vec::with_capacity(samples.len());
    let mut profiles = Vec::with_capacity(samples.len());
    for s in samples {
        let (i, p) = preprocess::preprocess_sample(s, PrepMode::Eval, aug, &mut rng)?;
        images.push(i);
        profiles.push(p);
    }
    Ok((images, profiles))
}

/// Mean eval-mode loss over consecutive batches, weighted by batch size.
pub fn dataset_loss<T: Float>(
    model: &DualEncoder<T>,
    images: &[ImageTensor],
    profiles: &[ProfileTensor],
    batch_size: usize,
    kind: LossKind,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for (bi, bp) in images
        .chunks(batch_size.max(1))
        .zip(profiles.chunks(batch_size.max(1)))
    {
        let mut g = Graph::new(&model.store, Mode::Eval, 0);
        let l = batch_loss(model, &mut g, bi, bp, kind)?;
        total += g.value(l).item().f64() * bi.len() as f64;
        count += bi.len();
    }
    Ok(total / count.max(1) as f64)
}

fn grad_norm<T: Float>(grads: &[(ParamId, Tensor<T>)]) -> f64 {
    grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt()
}

/// Batches of shuffled indices; a trailing batch of a single pair is
/// dropped since it carries no contrastive signal.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, seed::streams::EPOCH, epoch as u64));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        batches.pop();
    }
    batches
}

/// Trains a fresh model; returns the parameters of the best validation
/// epoch.
pub fn train<T: Float>(
    train_set: &[ParticleSample],
    val_set: &[ParticleSample],
    cfg: &TrainConfig,
) -> Result<(DualEncoder<T>, TrainReport)> {
    train_with_callback(train_set, val_set, cfg, |_| {})
}

pub fn train_with_callback<T: Float>(
    train_set: &[ParticleSample],
    val_set: &[ParticleSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(DualEncoder<T>, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidInput(
            "training and validation sets must both be non-empty".into(),
        ));
    }
    if (cfg.batch_size == 1 || train_set.len() == 1) && cfg.loss == LossKind::Infonce {
        warn!("batches of one pair make the InfoNCE loss identically zero");
    }
    let mut model = DualEncoder::<T>::new(&cfg.encoder, cfg.seed)?;
    let (val_images, val_profiles) = eval_tensors(val_set, &cfg.augment)?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_store = model.store.clone();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut global_step = 0u64;

    for epoch in 0..cfg.max_epochs {
        let lr = lr_at(epoch, cfg)?;
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (step, batch) in epoch_batches(train_set.len(), cfg.batch_size, cfg.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let mut rng = seed::rng(cfg.seed, seed::streams::STEP, global_step);
            let mut images = Vec::with_capacity(batch.len());
            let mut profiles = Vec::with_capacity(batch.len());
            for &i in &batch {
                let (im, pr) = preprocess::preprocess_sample(
                    &train_set[i],
                    PrepMode::Train,
                    &cfg.augment,
                    &mut rng,
                )?;
                images.push(im);
                profiles.push(pr);
            }
            let graph_seed = seed::derive(cfg.seed, seed::streams::STEP, global_step) ^ 0x5eed;
            let (loss, grads, updates) = {
                let mut g = Graph::new(&model.store, Mode::Train, graph_seed);
                let l = batch_loss(&model, &mut g, &images, &profiles, cfg.loss)?;
                let loss = g.value(l).item().f64();
                let updates = g.take_buffer_updates();
                let grads = g.backward(l).param_grads();
                (loss, grads, updates)
            };
            let norm = grad_norm(&grads);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    loss,
                    tau: model.tau(),
                    bias: model.bias_value(),
                    grad_norm: norm,
                });
            }
            for (id, v) in updates {
                *model.store.get_mut(id) = v;
            }
            opt.step(&mut model.store, &grads, lr);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            global_step += 1;
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        let val_loss = dataset_loss(&model, &val_images, &val_profiles, cfg.batch_size, cfg.loss)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: 0,
                loss: val_loss,
                tau: model.tau(),
                bias: model.bias_value(),
                grad_norm: f64::NAN,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            tau: model.tau(),
            bias: model.bias_value(),
        };
        info!(
            "epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:.3e} tau {:.3}",
            record.tau
        );
        on_epoch(&record);
        epochs.push(record);
        match stopper.update(epoch, val_loss) {
            StopDecision::Improved => best_store = model.store.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }
    model.store = best_store;
    let report = TrainReport {
        loss: cfg.loss,
        base_lr: cfg.base_lr(),
        epochs,
        best_epoch: stopper.best_epoch().unwrap_or(0),
        best_val_loss: stopper.best(),
        stop_reason,
    };
    Ok((model, report))
}
