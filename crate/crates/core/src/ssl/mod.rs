//! Self-supervised pretraining: the two-term symmetric cosine objective with
//! stop-gradient, cross-task positives, SGD with weight decay and a step
//! schedule, and collapse monitoring.

mod loss;

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use loss::{
    collapse_statistic, cosine, cosine_strict, symmetric_cosine_loss, symmetric_cosine_loss_strict, total_loss,
    Embedded, NORM_EPS,
};

use crate::augment::{augment_view, view_stream, AugmentConfig, AugmentedView};
use crate::data::{Dataset, TaskInstance};
use crate::error::{Error, Result};
use crate::nn::layers::Mode;
use crate::nn::mlp::MlpCache;
use crate::nn::model::EncoderCache;
use crate::nn::params::{zeros_like, Module, TensorRole};
use crate::nn::{Encoder, Predictor, View};
use crate::rng::{domain, stream, Rng};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_decay_gamma: f64,
    pub lr_decay_every: usize,
    /// Adds the cross-task term of the objective.
    pub task_invariance: bool,
    /// Treats encoder outputs as constants in the loss.
    pub stop_gradient: bool,
    /// Predicts targets through the predictor MLP; otherwise `p = z`.
    pub use_predictor: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-5,
            weight_decay: 1e-3,
            lr_decay_gamma: 0.5,
            lr_decay_every: 20,
            task_invariance: true,
            stop_gradient: true,
            use_predictor: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("learning_rate", self.learning_rate),
            ("lr_decay_gamma", self.lr_decay_gamma),
            ("lr_decay_every", self.lr_decay_every as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "train.weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2 for batch standardization".into()));
        }
        Ok(())
    }

    /// Learning rate for zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_gamma.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub collapse_stat: f64,
    pub lr: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch\tmean_loss\tcollapse_stat\tlr";

    /// Tab-separated rows, one per epoch. Wall-clock time is left out so
    /// that reruns produce identical bytes; see [`TrainLog::timing_tsv`].
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(out, "{}\t{:.9e}\t{:.9e}\t{:.9e}", e.epoch, e.mean_loss, e.collapse_stat, e.lr);
        }
        out
    }

    pub fn timing_tsv(&self) -> String {
        let mut out = String::from("epoch\twall_clock_s\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{}\t{:.3}", e.epoch, e.wall_clock_s);
        }
        out
    }
}

/// Picks a same-subject instance of a different task, uniformly.
pub fn sample_cross_task<T: Scalar>(dataset: &Dataset<T>, subject_id: &str, task_id: &str, rng: &mut Rng) -> Result<usize> {
    let candidates: Vec<usize> = dataset
        .instances_of(subject_id)
        .into_iter()
        .filter(|&k| dataset.instances[k].task_id != task_id)
        .collect();
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "task-invariance loss requires ≥2 tasks per subject (subject {subject_id} has one)"
        )));
    }
    Ok(candidates[rng.gen_range(0..candidates.len())])
}

/// Views of one training sample: `x1`, `x2` of the same instance and an
/// optional cross-task view `x2*` of the same subject.
#[derive(Debug, Clone)]
pub struct SamplePair<T> {
    pub subject_id: String,
    pub x1: AugmentedView<T>,
    pub x2: AugmentedView<T>,
    pub cross: Option<(String, AugmentedView<T>)>,
}

/// Draws the views of instance `k` for `epoch`.
pub fn sample_views<T: Scalar>(
    dataset: &Dataset<T>,
    k: usize,
    epoch: usize,
    augment: &AugmentConfig,
    train: &TrainConfig,
) -> Result<SamplePair<T>> {
    let inst = &dataset.instances[k];
    let view = |src: &TaskInstance<T>, v: u64| {
        augment_view(src, &dataset.atlas, augment, &mut view_stream(train.seed, epoch as u64, k as u64, v))
    };
    let cross = if train.task_invariance {
        let mut rng = stream(train.seed, &[domain::CROSS_TASK, epoch as u64, k as u64]);
        let other = sample_cross_task(dataset, &inst.subject_id, &inst.task_id, &mut rng)?;
        let src = &dataset.instances[other];
        Some((src.subject_id.clone(), view(src, 2)?))
    } else {
        None
    };
    Ok(SamplePair {
        subject_id: inst.subject_id.clone(),
        x1: view(inst, 0)?,
        x2: view(inst, 1)?,
        cross,
    })
}

/// Constant stand-ins for the encoder outputs used as loss targets.
#[derive(Debug, Clone)]
pub struct TargetSnapshot<T> {
    pub z1: Array2<T>,
    pub z2: Array2<T>,
    pub z_cross: Option<Array2<T>>,
}

/// Result of one forward/backward pass over a batch.
#[derive(Debug, Clone)]
pub struct BatchGradients<T> {
    /// Mean objective over the batch.
    pub loss: T,
    pub encoder: Encoder<T>,
    pub predictor: Predictor<T>,
    /// Training-mode `z1`, used for collapse monitoring.
    pub z1: Array2<T>,
    enc_caches: Vec<EncoderCache<T>>,
    pred_caches: Vec<MlpCache<T>>,
}

struct Branch<T> {
    z: Array2<T>,
    p: Array2<T>,
    enc_cache: EncoderCache<T>,
    pred_cache: Option<MlpCache<T>>,
}

fn run_branch<T: Scalar>(
    encoder: &Encoder<T>,
    predictor: &Predictor<T>,
    views: &[View<'_, T>],
    use_predictor: bool,
) -> Result<Branch<T>> {
    let (z, enc_cache) = encoder.forward(views, Mode::Train)?;
    let (p, pred_cache) = if use_predictor {
        let (p, c) = predictor.forward(&z, Mode::Train);
        (p, Some(c))
    } else {
        (z.clone(), None)
    };
    Ok(Branch { z, p, enc_cache, pred_cache })
}

/// Objective and parameter gradients for a batch of samples.
///
/// With `targets` set, the loss compares predictions against those
/// constants instead of the live encoder outputs.
pub fn batch_gradients<T: Scalar>(
    encoder: &Encoder<T>,
    predictor: &Predictor<T>,
    batch: &[SamplePair<T>],
    config: &TrainConfig,
    targets: Option<&TargetSnapshot<T>>,
) -> Result<BatchGradients<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for s in batch {
        match &s.cross {
            Some((subject, _)) if *subject != s.subject_id => {
                return Err(Error::InvalidArgument(format!(
                    "cross-task view belongs to subject {subject}, expected {}",
                    s.subject_id
                )));
            }
            None if config.task_invariance => {
                return Err(Error::InvalidArgument("task invariance enabled but no cross-task view".into()));
            }
            _ => {}
        }
    }
    let use_cross = config.task_invariance;
    let v1: Vec<View<T>> = batch.iter().map(|s| View::from(&s.x1)).collect();
    let v2: Vec<View<T>> = batch.iter().map(|s| View::from(&s.x2)).collect();
    let mut branches = vec![
        run_branch(encoder, predictor, &v1, config.use_predictor)?,
        run_branch(encoder, predictor, &v2, config.use_predictor)?,
    ];
    if use_cross {
        let v3: Vec<View<T>> = batch.iter().map(|s| View::from(&s.cross.as_ref().unwrap().1)).collect();
        branches.push(run_branch(encoder, predictor, &v3, config.use_predictor)?);
    }
    let target = |i: usize| -> &Array2<T> {
        match targets {
            Some(t) => match i {
                0 => &t.z1,
                1 => &t.z2,
                _ => t.z_cross.as_ref().expect("cross-task snapshot"),
            },
            None => &branches[i].z,
        }
    };
    let live_targets = targets.is_none() && !config.stop_gradient;
    let shape = branches[0].z.raw_dim();
    let mut dp: Vec<Array2<T>> = branches.iter().map(|_| Array2::zeros(shape.clone())).collect();
    let mut dz: Vec<Array2<T>> = branches.iter().map(|_| Array2::zeros(shape.clone())).collect();
    let scale = -lit::<T>(0.5) / T::from_usize(batch.len()).unwrap();
    // (prediction branch, target branch) pairs of the objective
    let mut pairs = vec![(0, 1), (1, 0)];
    if use_cross {
        pairs.extend([(0, 2), (2, 0)]);
    }
    let mut loss = T::zero();
    for (pi, ti) in pairs {
        let db = if live_targets { Some(&mut dz[ti]) } else { None };
        loss += loss::accumulate_cosine_rows(&branches[pi].p, target(ti), scale, &mut dp[pi], db);
    }
    let mut g_enc = zeros_like(encoder);
    let mut g_pred = zeros_like(predictor);
    for (i, br) in branches.iter().enumerate() {
        let mut dzi = match &br.pred_cache {
            Some(c) => predictor.backward(c, &dp[i], &mut g_pred),
            None => dp[i].clone(),
        };
        if live_targets {
            dzi += &dz[i];
        }
        encoder.backward(&br.enc_cache, &dzi, &mut g_enc, false);
    }
    let z1 = branches[0].z.clone();
    let (enc_caches, pred_caches) = branches
        .into_iter()
        .map(|b| (b.enc_cache, b.pred_cache))
        .fold((Vec::new(), Vec::new()), |(mut e, mut p), (ec, pc)| {
            e.push(ec);
            p.extend(pc);
            (e, p)
        });
    Ok(BatchGradients {
        loss,
        encoder: g_enc,
        predictor: g_pred,
        z1,
        enc_caches,
        pred_caches,
    })
}

/// `w <- w (1 - lr wd) - lr g` on trainable tensors.
pub fn sgd_step<T: Scalar, M: Module<T>>(model: &mut M, grad: &M, lr: f64, weight_decay: f64) {
    let mut grads: Vec<Vec<T>> = Vec::new();
    grad.visit("", &mut |_, role, _, data| {
        if role == TensorRole::Param {
            grads.push(data.to_vec());
        }
    });
    let shrink = lit::<T>(1.0 - lr * weight_decay);
    let lr = lit::<T>(lr);
    let mut k = 0;
    model.visit_mut("", &mut |_, role, _, data| {
        if role == TensorRole::Param {
            for (w, g) in data.iter_mut().zip(&grads[k]) {
                *w = *w * shrink - lr * *g;
            }
            k += 1;
        }
    });
}

/// Model and progress of a pretraining run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub encoder: Encoder<T>,
    pub predictor: Predictor<T>,
    pub epochs_completed: usize,
    pub log: TrainLog,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(encoder: Encoder<T>, predictor: Predictor<T>) -> Self {
        Self {
            encoder,
            predictor,
            epochs_completed: 0,
            log: TrainLog::default(),
        }
    }
}

/// Shuffled instance order for `epoch`, cut into batches. A trailing batch
/// of one is merged into the previous batch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[domain::SHUFFLE, epoch as u64]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().map(Vec::len) == Some(1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// Runs epochs `state.epochs_completed .. min(config.epochs, until)`.
pub fn train_ssl<T: Scalar>(
    dataset: &Dataset<T>,
    mut state: TrainState<T>,
    config: &TrainConfig,
    augment: &AugmentConfig,
    until: Option<usize>,
) -> Result<TrainState<T>> {
    config.validate()?;
    augment.validate()?;
    if dataset.instances.len() < 2 {
        return Err(Error::InvalidArgument("pretraining needs at least two instances".into()));
    }
    if config.task_invariance {
        for s in dataset.subjects() {
            if dataset.instances_of(&s).len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "task-invariance loss requires ≥2 tasks per subject (subject {s} has one)"
                )));
            }
        }
    }
    let stop = until.unwrap_or(config.epochs).min(config.epochs);
    for epoch in state.epochs_completed..stop {
        let started = Instant::now();
        let lr = config.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut collapse_sum = 0.0;
        let batches = epoch_batches(dataset.instances.len(), config.batch_size, config.seed, epoch);
        for (bi, idx) in batches.iter().enumerate() {
            let samples = idx
                .iter()
                .map(|&k| sample_views(dataset, k, epoch, augment, config))
                .collect::<Result<Vec<_>>>()?;
            let g = batch_gradients(&state.encoder, &state.predictor, &samples, config, None)?;
            let loss = g.loss.to_f64().unwrap();
            if !loss.is_finite() {
                let ids: Vec<String> = idx
                    .iter()
                    .map(|&k| format!("{}/{}", dataset.instances[k].subject_id, dataset.instances[k].task_id))
                    .collect();
                return Err(Error::Numerical(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {bi} (lr {lr:e}); instances: {}",
                    ids.join(", ")
                )));
            }
            loss_sum += loss;
            collapse_sum += collapse_statistic(&g.z1);
            sgd_step(&mut state.encoder, &g.encoder, lr, config.weight_decay);
            sgd_step(&mut state.predictor, &g.predictor, lr, config.weight_decay);
            for c in &g.enc_caches {
                state.encoder.update_running(c);
            }
            for c in &g.pred_caches {
                state.predictor.update_running(c);
            }
        }
        let nb = batches.len() as f64;
        state.log.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / nb,
            collapse_stat: collapse_sum / nb,
            lr,
            wall_clock_s: started.elapsed().as_secs_f64(),
        });
        state.epochs_completed = epoch + 1;
        log::info!(
            "epoch {epoch}: loss {:.6} collapse {:.5} lr {lr:e}",
            loss_sum / nb,
            collapse_sum / nb
        );
    }
    Ok(state)
}
