//! Downstream evaluation: MLP probing on a frozen encoder, end-to-end
//! fine-tuning, supervised training from scratch, and the cross-validated
//! harness with subject-level metrics.

pub mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use metrics::{
    aggregate_subject_predictions, auc, evaluate_classification, evaluate_regression, ClassificationMetrics,
    RegressionMetrics,
};

use crate::data::{Dataset, FoldSplit, PhenotypeKind, TaskInstance};
use crate::error::{Error, Result};
use crate::nn::layers::Mode;
use crate::nn::model::softmax_rows;
use crate::nn::params::{param_hash, zeros_like};
use crate::nn::{Encoder, HeadKind, TaskHead, View};
use crate::rng::{derive_seed, domain, stream};
use crate::scalar::{lit, Scalar};
use crate::ssl::sgd_step;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Frozen pretrained encoder, head only.
    Probe,
    /// Pretrained encoder and head trained jointly.
    Finetune,
    /// Same architecture trained jointly from a random initialization.
    Supervised,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Probe => "probe",
            EvalMode::Finetune => "finetune",
            EvalMode::Supervised => "supervised",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_decay_gamma: f64,
    pub lr_decay_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            lr_decay_gamma: 0.5,
            lr_decay_every: 20,
        }
    }
}

impl OptimConfig {
    pub fn finetune_default() -> Self {
        Self {
            epochs: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::Config(format!(
                "{section}: epochs, batch_size and lr_decay_every must be positive"
            )));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("lr_decay_gamma", self.lr_decay_gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{section}.{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_gamma.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub mode: EvalMode,
    pub phenotype: String,
    pub folds: usize,
    /// Stratify folds on the phenotype when it is categorical.
    pub stratify: bool,
    pub probe: OptimConfig,
    pub finetune: OptimConfig,
    pub seed: u64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Probe,
            phenotype: "diagnosis".into(),
            folds: 5,
            stratify: true,
            probe: OptimConfig::default(),
            finetune: OptimConfig::finetune_default(),
            seed: 0,
        }
    }
}

/// Training targets for a head.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Standardized regression targets.
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn subset(&self, idx: &[usize]) -> Self {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Mean cross-entropy or squared error, and its gradient with respect to
/// the head output.
pub fn head_loss<T: Scalar>(kind: HeadKind, out: &Array2<T>, targets: &Targets) -> Result<(f64, Array2<T>)> {
    let b = out.nrows();
    if targets.len() != b {
        return Err(Error::Shape(format!("{} targets for {b} outputs", targets.len())));
    }
    let bf = lit::<T>(b as f64);
    match (kind, targets) {
        (HeadKind::Classification { n_classes }, Targets::Classes(y)) => {
            let probs = softmax_rows(out);
            let mut d = probs.clone();
            let mut loss = 0.0;
            for (r, &c) in y.iter().enumerate() {
                if c >= n_classes {
                    return Err(Error::InvalidArgument(format!("class {c} outside 0..{n_classes}")));
                }
                loss -= probs[[r, c]].to_f64().unwrap().max(1e-300).ln();
                d[[r, c]] -= T::one();
            }
            Ok((loss / b as f64, d / bf))
        }
        (HeadKind::Regression, Targets::Values(v)) => {
            let mut d = out.clone();
            let mut loss = 0.0;
            for (r, &t) in v.iter().enumerate() {
                let diff = out[[r, 0]] - lit::<T>(t);
                loss += diff.to_f64().unwrap().powi(2);
                d[[r, 0]] = diff * lit::<T>(2.0);
            }
            Ok((loss / b as f64, d / bf))
        }
        _ => Err(Error::InvalidArgument("head kind does not match target kind".into())),
    }
}

fn minibatches(n: usize, batch: usize, seed: u64, path: &[u64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, path));
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn rows<T: Scalar>(x: &Array2<T>, idx: &[usize]) -> Array2<T> {
    x.select(ndarray::Axis(0), idx)
}

/// Eval-mode embeddings of the given instances, in chunks.
pub fn embed_instances<T: Scalar>(encoder: &Encoder<T>, instances: &[&TaskInstance<T>]) -> Result<Array2<T>> {
    let mut out = Array2::zeros((instances.len(), encoder.out_dim()));
    for (c, chunk) in instances.chunks(32).enumerate() {
        let views: Vec<View<T>> = chunk.iter().map(|i| View::from(*i)).collect();
        let z = encoder.encode(&views)?;
        out.slice_mut(ndarray::s![c * 32..c * 32 + chunk.len(), ..]).assign(&z);
    }
    Ok(out)
}

/// Trains a head on fixed embeddings; returns the mean loss per epoch.
pub fn fit_head<T: Scalar>(
    head: &mut TaskHead<T>,
    embeddings: &Array2<T>,
    targets: &Targets,
    config: &OptimConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    config.validate("probe")?;
    if embeddings.nrows() != targets.len() || targets.is_empty() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} targets",
            embeddings.nrows(),
            targets.len()
        )));
    }
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut total = 0.0;
        let batches = minibatches(targets.len(), config.batch_size, seed, &[domain::HEAD, 1, epoch as u64]);
        for idx in &batches {
            let x = rows(embeddings, idx);
            let (out, cache) = head.forward(&x);
            let (loss, d) = head_loss(head.kind, &out, &targets.subset(idx))?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite head loss at epoch {epoch}")));
            }
            total += loss * idx.len() as f64;
            let mut g = zeros_like(head);
            head.backward(&cache, &d, &mut g);
            sgd_step(head, &g, lr, config.weight_decay);
        }
        history.push(total / targets.len() as f64);
    }
    Ok(history)
}

/// Probe training: the encoder is only read.
pub fn train_probe<T: Scalar>(
    encoder: &Encoder<T>,
    head: &mut TaskHead<T>,
    instances: &[&TaskInstance<T>],
    targets: &Targets,
    config: &OptimConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let z = embed_instances(encoder, instances)?;
    fit_head(head, &z, targets, config, seed)
}

/// Joint training of encoder and head. Standardization layers stay in
/// evaluation mode, so their statistics are those of pretraining.
pub fn finetune<T: Scalar>(
    encoder: &mut Encoder<T>,
    head: &mut TaskHead<T>,
    instances: &[&TaskInstance<T>],
    targets: &Targets,
    config: &OptimConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    config.validate("finetune")?;
    if instances.len() != targets.len() || instances.is_empty() {
        return Err(Error::Shape(format!("{} instances for {} targets", instances.len(), targets.len())));
    }
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut total = 0.0;
        let batches = minibatches(instances.len(), config.batch_size, seed, &[domain::HEAD, 2, epoch as u64]);
        for idx in &batches {
            let views: Vec<View<T>> = idx.iter().map(|&i| View::from(instances[i])).collect();
            let (z, enc_cache) = encoder.forward(&views, Mode::Eval)?;
            let (out, head_cache) = head.forward(&z);
            let (loss, d) = head_loss(head.kind, &out, &targets.subset(idx))?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite fine-tuning loss at epoch {epoch}")));
            }
            total += loss * idx.len() as f64;
            let mut gh = zeros_like(head);
            let dz = head.backward(&head_cache, &d, &mut gh);
            let mut ge = zeros_like(encoder);
            encoder.backward(&enc_cache, &dz, &mut ge, false);
            sgd_step(head, &gh, lr, config.weight_decay);
            sgd_step(encoder, &ge, lr, config.weight_decay);
        }
        history.push(total / instances.len() as f64);
    }
    Ok(history)
}

/// Per-instance head outputs: class probabilities, or values mapped back
/// to the phenotype scale.
fn instance_outputs<T: Scalar>(head: &TaskHead<T>, z: &Array2<T>, scale: Option<(f64, f64)>) -> Vec<Vec<f64>> {
    let out = head.predict(z);
    match head.kind {
        HeadKind::Classification { .. } => softmax_rows(&out)
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_f64().unwrap()).collect())
            .collect(),
        HeadKind::Regression => {
            let (mean, std) = scale.unwrap_or((0.0, 1.0));
            out.column(0).iter().map(|v| vec![v.to_f64().unwrap() * std + mean]).collect()
        }
    }
}

/// Metric values of one evaluation; `None` marks an undefined metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_test_subjects: usize,
    pub values: Vec<Option<f64>>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: EvalMode,
    pub phenotype: String,
    pub metric_names: Vec<String>,
    /// Subject-level metrics per fold.
    pub folds: Vec<FoldMetrics>,
    /// Instance-level metrics per fold, for reference.
    pub instance_folds: Vec<FoldMetrics>,
}

/// Population mean and standard deviation of the defined values.
pub fn mean_std(values: &[Option<f64>]) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl MetricReport {
    /// Mean and std over folds of metric `name`.
    pub fn summary(&self, name: &str) -> Option<(f64, f64)> {
        let k = self.metric_names.iter().position(|m| m == name)?;
        mean_std(&self.folds.iter().map(|f| f.values[k]).collect::<Vec<_>>())
    }

    fn table(&self, folds: &[FoldMetrics]) -> String {
        let mut out = String::from("fold\tn_subjects");
        for m in &self.metric_names {
            let _ = write!(out, "\t{m}");
        }
        out.push_str("\tflags\n");
        for f in folds {
            let _ = write!(out, "{}\t{}", f.fold, f.n_test_subjects);
            for v in &f.values {
                let _ = write!(out, "\t{}", fmt_opt(*v));
            }
            let _ = writeln!(out, "\t{}", if f.flags.is_empty() { "-".into() } else { f.flags.join(",") });
        }
        let n: usize = folds.iter().map(|f| f.n_test_subjects).sum();
        let _ = write!(out, "summary\t{n}");
        for k in 0..self.metric_names.len() {
            let col: Vec<_> = folds.iter().map(|f| f.values[k]).collect();
            match mean_std(&col) {
                Some((m, s)) => {
                    let _ = write!(out, "\t{m:.6} ({s:.6})");
                }
                None => out.push_str("\tNA"),
            }
        }
        out.push_str("\t-\n");
        out
    }

    /// Subject-level table: one row per fold, then a `mean (std)` row.
    pub fn to_tsv(&self) -> String {
        self.table(&self.folds)
    }

    pub fn instance_tsv(&self) -> String {
        self.table(&self.instance_folds)
    }
}

fn metric_row(kind: HeadKind, outputs: &[Vec<f64>], truth: &[f64], fold: usize) -> Result<FoldMetrics> {
    let mut flags = Vec::new();
    let values = match kind {
        HeadKind::Classification { n_classes } => {
            if n_classes != 2 {
                return Err(Error::Config(format!(
                    "classification metrics need a binary phenotype, got {n_classes} classes"
                )));
            }
            let scores: Vec<f64> = outputs.iter().map(|p| p[1]).collect();
            let labels: Vec<usize> = truth.iter().map(|&t| t as usize).collect();
            match evaluate_classification(&scores, &labels) {
                Ok(m) => {
                    if m.f1_degenerate {
                        flags.push("f1_degenerate".into());
                    }
                    vec![Some(m.acc), Some(m.f1), Some(m.auc)]
                }
                Err(Error::MetricUndefined(_)) => {
                    flags.push("single_class".into());
                    let hard: Vec<usize> = scores.iter().map(|&s| usize::from(s >= 0.5)).collect();
                    let acc = hard.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64;
                    vec![Some(acc), None, None]
                }
                Err(e) => return Err(e),
            }
        }
        HeadKind::Regression => {
            let preds: Vec<f64> = outputs.iter().map(|p| p[0]).collect();
            match evaluate_regression(&preds, truth) {
                Ok(m) => {
                    if m.r_degenerate {
                        flags.push("r_degenerate".into());
                    }
                    vec![Some(m.mae), Some(m.r)]
                }
                Err(Error::MetricUndefined(_)) => {
                    flags.push("too_few_samples".into());
                    let mae = preds.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / preds.len() as f64;
                    vec![Some(mae), None]
                }
                Err(e) => return Err(e),
            }
        }
    };
    Ok(FoldMetrics {
        fold,
        n_test_subjects: truth.len(),
        values,
        flags,
    })
}

/// Pretrained encoder (for probe and fine-tune modes) and head widths.
#[derive(Debug, Clone)]
pub struct CvModel<'a, T> {
    pub encoder: &'a Encoder<T>,
    pub head_hidden: Vec<usize>,
}

/// Optional on-disk cache for frozen-encoder embeddings.
fn cached_embeddings<T: Scalar>(
    encoder: &Encoder<T>,
    dataset: &Dataset<T>,
    cache_dir: Option<&Path>,
) -> Result<Array2<T>> {
    let all: Vec<&TaskInstance<T>> = dataset.instances.iter().collect();
    let Some(dir) = cache_dir else {
        return embed_instances(encoder, &all);
    };
    let path = dir.join(format!("embeddings-{}.bin", &param_hash(encoder)[..16]));
    let (n, d) = (all.len(), encoder.out_dim());
    if let Ok(bytes) = std::fs::read(&path) {
        if bytes.len() == n * d * T::BYTES {
            let v: Vec<T> = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
            return Array2::from_shape_vec((n, d), v).map_err(|e| Error::Shape(e.to_string()));
        }
    }
    let z = embed_instances(encoder, &all)?;
    let mut bytes = Vec::with_capacity(n * d * T::BYTES);
    for v in z.iter() {
        v.write_le(&mut bytes);
    }
    crate::data::io::write_bytes(&path, &bytes)?;
    Ok(z)
}

fn head_kind<T: Scalar>(dataset: &Dataset<T>, name: &str) -> Result<HeadKind> {
    let phenotype = dataset.phenotypes.get(name)?;
    Ok(match phenotype.kind {
        PhenotypeKind::Categorical => HeadKind::Classification {
            n_classes: phenotype.n_classes(),
        },
        PhenotypeKind::Continuous => HeadKind::Regression,
    })
}

/// Head (and, outside probe mode, encoder) fitted on one fold's training
/// subjects.
#[derive(Debug, Clone)]
pub struct FoldFit<T> {
    pub fold: usize,
    pub head: TaskHead<T>,
    /// Adapted encoder; `None` in probe mode.
    pub encoder: Option<Encoder<T>>,
    pub test_idx: Vec<usize>,
    /// Training mean and std of regression targets.
    pub scale: Option<(f64, f64)>,
}

fn fit_fold<T: Scalar>(
    dataset: &Dataset<T>,
    folds: &FoldSplit,
    fold: usize,
    model: &CvModel<'_, T>,
    config: &DownstreamConfig,
    frozen: Option<&Array2<T>>,
) -> Result<FoldFit<T>> {
    let kind = head_kind(dataset, &config.phenotype)?;
    let (train_subjects, test_subjects) = folds.train_test(fold)?;
    let index_of = |subjects: &[String]| -> Vec<usize> {
        subjects.iter().flat_map(|s| dataset.instances_of(s)).collect()
    };
    let (train_idx, test_idx) = (index_of(&train_subjects), index_of(&test_subjects));
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Validation(format!("fold {fold} has no training or test instances")));
    }
    let raw: Vec<f64> = train_idx
        .iter()
        .map(|&k| phenotype_value(dataset, &config.phenotype, k))
        .collect::<Result<_>>()?;
    let (targets, scale) = match kind {
        HeadKind::Classification { .. } => (Targets::Classes(raw.iter().map(|&v| v as usize).collect()), None),
        HeadKind::Regression => {
            let (m, s) = mean_std(&raw.iter().map(|&v| Some(v)).collect::<Vec<_>>()).unwrap();
            let s = if s > 0.0 { s } else { 1.0 };
            (Targets::Values(raw.iter().map(|v| (v - m) / s).collect()), Some((m, s)))
        }
    };
    let fold_seed = derive_seed(config.seed, &[domain::HEAD, fold as u64]);
    let mut head = TaskHead::new(model.encoder.out_dim(), &model.head_hidden, kind, fold_seed);
    let encoder = match (frozen, config.mode) {
        (Some(z), _) => {
            fit_head(&mut head, &rows(z, &train_idx), &targets, &config.probe, fold_seed)?;
            None
        }
        (None, EvalMode::Probe) => {
            let train_inst: Vec<&TaskInstance<T>> = train_idx.iter().map(|&k| &dataset.instances[k]).collect();
            train_probe(model.encoder, &mut head, &train_inst, &targets, &config.probe, fold_seed)?;
            None
        }
        (None, mode) => {
            let mut encoder = match mode {
                EvalMode::Supervised => {
                    Encoder::new(&model.encoder.config, model.encoder.n_rois, model.encoder.image_shape, fold_seed)?
                }
                _ => model.encoder.clone(),
            };
            let train_inst: Vec<&TaskInstance<T>> = train_idx.iter().map(|&k| &dataset.instances[k]).collect();
            finetune(&mut encoder, &mut head, &train_inst, &targets, &config.finetune, fold_seed)?;
            Some(encoder)
        }
    };
    Ok(FoldFit {
        fold,
        head,
        encoder,
        test_idx,
        scale,
    })
}

/// Fits the downstream model of a single fold without scoring it.
pub fn fit_fold_model<T: Scalar>(
    dataset: &Dataset<T>,
    folds: &FoldSplit,
    fold: usize,
    model: &CvModel<'_, T>,
    config: &DownstreamConfig,
) -> Result<FoldFit<T>> {
    fit_fold(dataset, folds, fold, model, config, None)
}

fn score_fold<T: Scalar>(
    dataset: &Dataset<T>,
    config: &DownstreamConfig,
    fit: &FoldFit<T>,
    frozen: Option<&Array2<T>>,
    n_test_subjects: usize,
) -> Result<(FoldMetrics, FoldMetrics)> {
    let kind = fit.head.kind;
    let test_z = match (frozen, &fit.encoder) {
        (Some(z), _) => rows(z, &fit.test_idx),
        (None, enc) => {
            let test_inst: Vec<&TaskInstance<T>> = fit.test_idx.iter().map(|&k| &dataset.instances[k]).collect();
            embed_instances(enc.as_ref().expect("adapted encoder outside probe mode"), &test_inst)?
        }
    };
    let outputs = instance_outputs(&fit.head, &test_z, fit.scale);
    let tagged: Vec<(String, Vec<f64>)> = fit
        .test_idx
        .iter()
        .zip(&outputs)
        .map(|(&k, o)| (dataset.instances[k].subject_id.clone(), o.clone()))
        .collect();
    let per_subject = aggregate_subject_predictions(&tagged);
    let subj_truth: Vec<f64> = per_subject
        .keys()
        .map(|s| dataset.phenotypes.value(&config.phenotype, s))
        .collect::<Result<_>>()?;
    let subj_out: Vec<Vec<f64>> = per_subject.into_values().collect();
    let subject_row = metric_row(kind, &subj_out, &subj_truth, fit.fold)?;
    let inst_truth: Vec<f64> = fit
        .test_idx
        .iter()
        .map(|&k| phenotype_value(dataset, &config.phenotype, k))
        .collect::<Result<_>>()?;
    let mut inst_row = metric_row(kind, &outputs, &inst_truth, fit.fold)?;
    inst_row.n_test_subjects = n_test_subjects;
    Ok((subject_row, inst_row))
}

/// K-fold evaluation at subject level.
///
/// Regression targets are standardized with training-fold statistics and
/// predictions are mapped back before scoring.
pub fn run_cv<T: Scalar>(
    dataset: &Dataset<T>,
    folds: &FoldSplit,
    model: &CvModel<'_, T>,
    config: &DownstreamConfig,
    cache_dir: Option<&Path>,
) -> Result<MetricReport> {
    run_cv_jobs(dataset, folds, model, config, cache_dir, 1)
}

/// [`run_cv`] with up to `jobs` folds evaluated concurrently. Results do
/// not depend on `jobs`.
pub fn run_cv_jobs<T: Scalar>(
    dataset: &Dataset<T>,
    folds: &FoldSplit,
    model: &CvModel<'_, T>,
    config: &DownstreamConfig,
    cache_dir: Option<&Path>,
    jobs: usize,
) -> Result<MetricReport> {
    let kind = head_kind(dataset, &config.phenotype)?;
    let metric_names: Vec<String> = match kind {
        HeadKind::Classification { .. } => vec!["acc".into(), "f1".into(), "auc".into()],
        HeadKind::Regression => vec!["mae".into(), "r".into()],
    };
    let frozen = match config.mode {
        EvalMode::Probe => Some(cached_embeddings(model.encoder, dataset, cache_dir)?),
        _ => None,
    };
    let run = |fold: usize| -> Result<(FoldMetrics, FoldMetrics)> {
        let fit = fit_fold(dataset, folds, fold, model, config, frozen.as_ref())?;
        let rows = score_fold(dataset, config, &fit, frozen.as_ref(), folds.test_subjects(fold).len())?;
        log::info!("{} fold {fold}: {:?}", config.mode.as_str(), rows.0.values);
        Ok(rows)
    };
    let fold_ids: Vec<usize> = (0..folds.k).collect();
    let mut results: Vec<Result<(FoldMetrics, FoldMetrics)>> = Vec::with_capacity(folds.k);
    for chunk in fold_ids.chunks(jobs.max(1)) {
        if chunk.len() == 1 {
            results.push(run(chunk[0]));
            continue;
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk.iter().map(|&f| scope.spawn(move || run(f))).collect();
            for h in handles {
                results.push(h.join().expect("fold worker panicked"));
            }
        });
    }
    let mut report = MetricReport {
        mode: config.mode,
        phenotype: config.phenotype.clone(),
        metric_names,
        folds: Vec::new(),
        instance_folds: Vec::new(),
    };
    for r in results {
        let (subject_row, inst_row) = r?;
        report.folds.push(subject_row);
        report.instance_folds.push(inst_row);
    }
    Ok(report)
}

fn phenotype_value<T: Scalar>(dataset: &Dataset<T>, name: &str, k: usize) -> Result<f64> {
    let subject = &dataset.instances[k].subject_id;
    dataset.phenotypes.value(name, subject).map_err(|_| {
        Error::Validation(format!("phenotype {name:?} has no label for subject {subject}"))
    })
}

/// Per-subject labels of a phenotype, erroring on any missing subject.
pub fn subject_labels<T: Scalar>(dataset: &Dataset<T>, name: &str) -> Result<BTreeMap<String, f64>> {
    dataset
        .subjects()
        .into_iter()
        .map(|s| {
            let v = dataset.phenotypes.value(name, &s)?;
            Ok((s, v))
        })
        .collect()
}
