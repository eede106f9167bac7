//! Zero-shot correlation of embeddings and connectivity with phenotypes,
//! and the soft-mask explainer with per-ROI importance aggregation.

mod report;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub use report::{
    correlation_table, export_report, importance_table, render_heatmap_pgm, AnalysisResults, CorrelationRow,
};

use crate::augment::{soft_roi_mask, soft_roi_mask_backward};
use crate::data::{AtlasVolume, Dataset, TaskInstance};
use crate::downstream::embed_instances;
use crate::downstream::metrics::{argmax, pearson};
use crate::error::{Error, Result};
use crate::nn::layers::Mode;
use crate::nn::model::softmax_rows;
use crate::nn::params::zeros_like;
use crate::nn::{Encoder, HeadKind, TaskHead, View};
use crate::scalar::{lit, Scalar};

/// Largest absolute correlation and where it was found.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxCorrelation<I> {
    /// Signed Pearson r at the maximizer.
    pub r: f64,
    pub at: I,
}

fn check_subjects(n: usize, m: usize) -> Result<()> {
    if n != m {
        return Err(Error::Shape(format!("{n} rows for {m} phenotype values")));
    }
    if n < 3 {
        return Err(Error::InvalidArgument(format!("correlation needs at least 3 subjects, got {n}")));
    }
    Ok(())
}

/// Scans every channel; zero-variance channels are skipped and the first
/// maximizer of `|r|` wins.
pub fn max_channel_correlation(embeddings: &Array2<f64>, phenotype: &[f64]) -> Result<MaxCorrelation<usize>> {
    check_subjects(embeddings.nrows(), phenotype.len())?;
    let mut best: Option<MaxCorrelation<usize>> = None;
    for c in 0..embeddings.ncols() {
        let col: Vec<f64> = embeddings.column(c).to_vec();
        if let Some(r) = pearson(&col, phenotype) {
            if best.map_or(true, |b| r.abs() > b.r.abs()) {
                best = Some(MaxCorrelation { r, at: c });
            }
        }
    }
    best.ok_or_else(|| Error::MetricUndefined("every channel (or the phenotype) has zero variance".into()))
}

/// As [`max_channel_correlation`] over strict upper-triangle entries of
/// per-subject connectivity matrices.
pub fn max_fc_correlation(fc: &[Array2<f64>], phenotype: &[f64]) -> Result<MaxCorrelation<(usize, usize)>> {
    check_subjects(fc.len(), phenotype.len())?;
    let n = fc[0].nrows();
    if fc.iter().any(|m| m.dim() != (n, n)) {
        return Err(Error::Shape("connectivity matrices differ in shape".into()));
    }
    let mut best: Option<MaxCorrelation<(usize, usize)>> = None;
    for i in 0..n {
        for j in i + 1..n {
            let entry: Vec<f64> = fc.iter().map(|m| m[[i, j]]).collect();
            if let Some(r) = pearson(&entry, phenotype) {
                if best.map_or(true, |b| r.abs() > b.r.abs()) {
                    best = Some(MaxCorrelation { r, at: (i, j) });
                }
            }
        }
    }
    best.ok_or_else(|| Error::MetricUndefined("every connectivity entry (or the phenotype) has zero variance".into()))
}

/// Eval-mode embeddings averaged over each subject's instances.
pub fn subject_embeddings<T: Scalar>(encoder: &Encoder<T>, dataset: &Dataset<T>, subjects: &[String]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((subjects.len(), encoder.out_dim()));
    for (r, s) in subjects.iter().enumerate() {
        let inst: Vec<&TaskInstance<T>> = dataset.instances_of(s).into_iter().map(|k| &dataset.instances[k]).collect();
        if inst.is_empty() {
            return Err(Error::InvalidArgument(format!("unknown subject {s}")));
        }
        let z = embed_instances(encoder, &inst)?;
        let mean = z.mapv(|v| v.to_f64().unwrap()).mean_axis(ndarray::Axis(0)).unwrap();
        out.row_mut(r).assign(&mean);
    }
    Ok(out)
}

/// Pearson connectivity (the node features) averaged over each subject's
/// instances.
pub fn subject_connectivity<T: Scalar>(dataset: &Dataset<T>, subjects: &[String]) -> Result<Vec<Array2<f64>>> {
    subjects
        .iter()
        .map(|s| {
            let idx = dataset.instances_of(s);
            if idx.is_empty() {
                return Err(Error::InvalidArgument(format!("unknown subject {s}")));
            }
            let mut acc = Array2::<f64>::zeros(dataset.instances[idx[0]].graph.node_features().raw_dim());
            for &k in &idx {
                acc += &dataset.instances[k].graph.node_features().mapv(|v| v.to_f64().unwrap());
            }
            Ok(acc / idx.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub iterations: usize,
    pub step_size: f64,
    /// Weight on the mean mask value.
    pub sparsity_weight: f64,
    /// Weight on the mean binary entropy of the mask.
    pub entropy_weight: f64,
    /// Initial mask value in `(0, 1)`.
    pub mask_init: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            step_size: 0.01,
            sparsity_weight: 0.05,
            entropy_weight: 0.1,
            mask_init: 0.9,
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("analysis.explain.iterations must be at least 1".into()));
        }
        for (name, v) in [
            ("step_size", self.step_size),
            ("sparsity_weight", self.sparsity_weight),
            ("entropy_weight", self.entropy_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("analysis.explain.{name} must be non-negative, got {v}")));
            }
        }
        if !(self.mask_init > 0.0 && self.mask_init < 1.0) {
            return Err(Error::Config(format!(
                "analysis.explain.mask_init must lie strictly between 0 and 1, got {}",
                self.mask_init
            )));
        }
        Ok(())
    }
}

/// What the explanation preserves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainMode {
    /// Cosine distance to the unmasked embedding.
    Embedding,
    /// Cross-entropy against the head's own unmasked hard prediction.
    Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub values: Vec<f64>,
    /// `embedding` or the name of the downstream task.
    pub scope: String,
    pub fold: Option<usize>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn entropy(m: f64) -> f64 {
    let m = m.clamp(1e-12, 1.0 - 1e-12);
    -(m * m.ln() + (1.0 - m) * (1.0 - m).ln())
}

/// What a prediction-mode explanation holds fixed.
enum Target<T> {
    None,
    Class(usize),
    Value(Array1<T>),
}

/// Fidelity of a masked forward pass and its gradient with respect to `z`.
fn fidelity<T: Scalar>(
    z: &Array2<T>,
    reference: &Array1<T>,
    head: Option<&TaskHead<T>>,
    target: &Target<T>,
) -> Result<(f64, Array2<T>)> {
    let (Some(head), false) = (head, matches!(target, Target::None)) else {
        let zr = z.row(0);
        let eps = lit::<T>(crate::ssl::NORM_EPS);
        let nz_raw = zr.dot(&zr).sqrt();
        let (nz, nr) = (nz_raw.max(eps), reference.dot(reference).sqrt().max(eps));
        let cos = zr.dot(reference) / (nz * nr);
        let k = if nz_raw > eps { cos / (nz * nz) } else { T::zero() };
        let grad = Array1::from_shape_fn(zr.len(), |i| -(reference[i] / (nz * nr) - k * zr[i]));
        return Ok((1.0 - cos.to_f64().unwrap(), grad.insert_axis(ndarray::Axis(0))));
    };
    let (out, cache) = head.forward(z);
    let (loss, d) = match target {
        Target::Class(c) => {
            let probs = softmax_rows(&out);
            let loss = -probs[[0, *c]].to_f64().unwrap().max(1e-300).ln();
            let mut d = probs;
            d[[0, *c]] -= T::one();
            (loss, d)
        }
        Target::Value(y) => {
            let diff = &out.row(0) - y;
            let loss = diff.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>();
            (loss, diff.mapv(|v| v + v).insert_axis(ndarray::Axis(0)))
        }
        Target::None => unreachable!(),
    };
    let mut g = zeros_like(head);
    Ok((loss, head.backward(&cache, &d, &mut g)))
}

/// Optimizes per-ROI mask logits so that the jointly masked graph and image
/// keep the model's output. Model parameters are only read.
///
/// Prediction mode holds a classification head's hard prediction fixed, or a
/// regression head's output under squared error.
pub fn explain<T: Scalar>(
    encoder: &Encoder<T>,
    head: Option<&TaskHead<T>>,
    instance: &TaskInstance<T>,
    atlas: &AtlasVolume,
    config: &ExplainConfig,
    mode: ExplainMode,
) -> Result<Vec<f64>> {
    config.validate()?;
    let n = instance.graph.n();
    let reference = encoder.encode(&[View::from(instance)])?.row(0).to_owned();
    let target = match (mode, head) {
        (ExplainMode::Embedding, _) => Target::None,
        (ExplainMode::Prediction, None) => {
            return Err(Error::InvalidArgument("prediction mode needs a task head".into()));
        }
        (ExplainMode::Prediction, Some(h)) => {
            let out = h.predict(&reference.clone().insert_axis(ndarray::Axis(0)));
            match h.kind {
                HeadKind::Classification { .. } => {
                    Target::Class(argmax(&out.row(0).iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>()))
                }
                HeadKind::Regression => Target::Value(out.row(0).to_owned()),
            }
        }
    };
    let init = config.mask_init;
    let mut theta = vec![(init / (1.0 - init)).ln(); n];
    let mut scratch = zeros_like(encoder);
    let nf = n as f64;
    for it in 0..config.iterations {
        let m: Vec<f64> = theta.iter().map(|&t| sigmoid(t)).collect();
        let mask = Array1::from_iter(m.iter().map(|&v| lit::<T>(v)));
        let (g, img) = soft_roi_mask(&instance.graph, &instance.image, atlas, &mask)?;
        let (z, cache) = encoder.forward(&[View { graph: &g, image: &img }], Mode::Eval)?;
        let (fid, dz) = fidelity(&z, &reference, head, &target)?;
        let reg: f64 = m
            .iter()
            .map(|&v| config.sparsity_weight * v + config.entropy_weight * entropy(v))
            .sum::<f64>()
            / nf;
        let objective = fid + reg;
        if !objective.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite explainer objective at iteration {it} (fidelity {fid}, regularizer {reg})"
            )));
        }
        let inputs = encoder.backward(&cache, &dz, &mut scratch, true).expect("input gradients requested");
        let dm = soft_roi_mask_backward(
            &instance.graph,
            &instance.image,
            atlas,
            &inputs[0].node_features,
            &inputs[0].image,
        );
        for r in 0..n {
            let mr = m[r].clamp(1e-12, 1.0 - 1e-12);
            let d_reg = (config.sparsity_weight + config.entropy_weight * ((1.0 - mr) / mr).ln()) / nf;
            let d_m = dm[r].to_f64().unwrap() + d_reg;
            theta[r] -= config.step_size * d_m * m[r] * (1.0 - m[r]);
        }
    }
    Ok(theta.into_iter().map(sigmoid).collect())
}

/// Mean over the maps of each fold, then over folds. Maps without a fold id
/// form one group.
pub fn aggregate_importance(maps: &[ImportanceMap]) -> Result<ImportanceMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("no importance maps to aggregate".into()))?;
    let n = first.values.len();
    let mut groups: BTreeMap<Option<usize>, (Vec<f64>, usize)> = BTreeMap::new();
    for m in maps {
        if m.scope != first.scope {
            return Err(Error::InvalidArgument(format!(
                "cannot aggregate importance maps of scopes {:?} and {:?}",
                first.scope, m.scope
            )));
        }
        if m.values.len() != n {
            return Err(Error::Shape(format!("importance maps of length {n} and {}", m.values.len())));
        }
        let g = groups.entry(m.fold).or_insert_with(|| (vec![0.0; n], 0));
        for (a, v) in g.0.iter_mut().zip(&m.values) {
            *a += v;
        }
        g.1 += 1;
    }
    let mut values = vec![0.0; n];
    for (sum, count) in groups.values() {
        for (a, s) in values.iter_mut().zip(sum) {
            *a += s / *count as f64;
        }
    }
    let k = groups.len() as f64;
    values.iter_mut().for_each(|v| *v /= k);
    Ok(ImportanceMap {
        values,
        scope: first.scope.clone(),
        fold: None,
    })
}

/// Whole-cohort maxima plus the embedding maximum within each fold's
/// subjects. Rows of `embeddings` and `fc` follow `subjects`.
pub fn correlate_phenotype(
    phenotype: &str,
    subjects: &[String],
    embeddings: &Array2<f64>,
    fc: &[Array2<f64>],
    values: &[f64],
    folds: Option<&crate::data::FoldSplit>,
) -> Result<CorrelationRow> {
    let embedding = max_channel_correlation(embeddings, values)?;
    let fc = max_fc_correlation(fc, values)?;
    let folds = match folds {
        None => Vec::new(),
        Some(split) => (0..split.k)
            .map(|f| {
                let rows: Vec<usize> = subjects
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| split.fold_of(s) == Some(f))
                    .map(|(i, _)| i)
                    .collect();
                let sub = embeddings.select(ndarray::Axis(0), &rows);
                let v: Vec<f64> = rows.iter().map(|&i| values[i]).collect();
                max_channel_correlation(&sub, &v).ok().map(|m| m.r)
            })
            .collect(),
    };
    Ok(CorrelationRow {
        phenotype: phenotype.to_owned(),
        embedding,
        fc,
        folds,
    })
}
