//! Binary classification and regression metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub acc: f64,
    pub f1: f64,
    pub auc: f64,
    /// No positive predictions and no positive labels, so F1 is reported as 0.
    pub f1_degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub r: f64,
    /// Zero variance in predictions or targets; `r` is reported as 0.
    pub r_degenerate: bool,
}

fn check_binary(scores: &[f64], labels: &[usize]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("label {l} is not binary")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite score".into()));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_binary(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricUndefined("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the number of (positive, negative) wins, so ties stay integral
    let mut twice = 0u64;
    let mut negs_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        let group_neg = (j - i) as u64 - group_pos;
        twice += group_pos * (2 * negs_below + group_neg);
        negs_below += group_neg;
        i = j;
    }
    Ok((twice as f64 / 2.0) / (pos as f64 * neg as f64))
}

/// Accuracy at threshold 0.5, F1 of the positive class and AUC.
pub fn evaluate_classification(scores: &[f64], labels: &[usize]) -> Result<ClassificationMetrics> {
    let auc = auc(scores, labels)?;
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = usize::from(s >= 0.5);
        if pred == l {
            correct += 1;
        }
        match (pred, l) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    let (f1, f1_degenerate) = f1_from_counts(tp, fp, fn_);
    Ok(ClassificationMetrics {
        acc: correct as f64 / labels.len() as f64,
        f1,
        auc,
        f1_degenerate,
    })
}

/// `2 TP / (2 TP + FP + FN)`; zero with a flag when the denominator is zero.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> (f64, bool) {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        (0.0, true)
    } else {
        (2.0 * tp as f64 / denom as f64, false)
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn evaluate_regression(predictions: &[f64], targets: &[f64]) -> Result<RegressionMetrics> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.len() < 2 {
        return Err(Error::MetricUndefined("Pearson r needs at least two samples".into()));
    }
    let mae = predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / predictions.len() as f64;
    let r = pearson(predictions, targets);
    Ok(RegressionMetrics {
        mae,
        r: r.unwrap_or(0.0),
        r_degenerate: r.is_none(),
    })
}

/// Mean of per-instance outputs (class probabilities or values) per subject.
pub fn aggregate_subject_predictions(predictions: &[(String, Vec<f64>)]) -> BTreeMap<String, Vec<f64>> {
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for (subject, values) in predictions {
        let entry = sums
            .entry(subject.clone())
            .or_insert_with(|| (vec![0.0; values.len()], 0));
        for (acc, v) in entry.0.iter_mut().zip(values) {
            *acc += v;
        }
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(s, (v, n))| (s, v.into_iter().map(|x| x / n as f64).collect()))
        .collect()
}

/// Index of the largest entry, first on ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
