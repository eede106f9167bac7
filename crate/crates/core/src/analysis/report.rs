//! Delimited tables and optional PGM heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ImportanceMap, MaxCorrelation};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub phenotype: String,
    pub embedding: MaxCorrelation<usize>,
    pub fc: MaxCorrelation<(usize, usize)>,
    /// Signed embedding max r over each fold's subjects; `None` where
    /// undefined. The table adds the mean of their absolute values.
    pub folds: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResults {
    pub correlations: Vec<CorrelationRow>,
    /// One aggregated map per scope.
    pub importance: Vec<ImportanceMap>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |v| format!("{v:.6}"))
}

pub fn correlation_table(rows: &[CorrelationRow]) -> Result<String> {
    let k = rows.first().map_or(0, |r| r.folds.len());
    if rows.iter().any(|r| r.folds.len() != k) {
        return Err(Error::Shape("correlation rows differ in fold count".into()));
    }
    let mut out = String::from("phenotype\tembedding_max_r\tembedding_channel\tfc_max_r\tfc_pair");
    for f in 0..k {
        write!(out, "\tfold_{f}").unwrap();
    }
    if k > 0 {
        out.push_str("\tfold_mean_abs");
    }
    out.push('\n');
    for r in rows {
        write!(
            out,
            "{}\t{:.6}\t{}\t{:.6}\t{}-{}",
            r.phenotype, r.embedding.r, r.embedding.at, r.fc.r, r.fc.at.0, r.fc.at.1
        )
        .unwrap();
        for v in &r.folds {
            write!(out, "\t{}", cell(*v)).unwrap();
        }
        if k > 0 {
            let defined: Vec<f64> = r.folds.iter().flatten().map(|v| v.abs()).collect();
            let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
            write!(out, "\t{}", cell(mean)).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn importance_table(maps: &[ImportanceMap]) -> Result<String> {
    let n = maps.first().map_or(0, |m| m.values.len());
    if maps.iter().any(|m| m.values.len() != n) {
        return Err(Error::Shape("importance maps differ in length".into()));
    }
    let mut out = String::from("roi");
    for m in maps {
        write!(out, "\t{}", m.scope).unwrap();
    }
    out.push('\n');
    for r in 0..n {
        write!(out, "{r}").unwrap();
        for m in maps {
            write!(out, "\t{:.6}", m.values[r]).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Binary greyscale image of a row-major `rows x cols` grid of values in
/// `[0, 1]`, each cell drawn as a `scale x scale` block.
pub fn render_heatmap_pgm(values: &[f64], rows: usize, cols: usize, scale: usize) -> Vec<u8> {
    assert_eq!(values.len(), rows * cols);
    let (w, h) = (cols * scale, rows * scale);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let v = values[(y / scale) * cols + x / scale];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

fn write_file(path: PathBuf, bytes: &[u8]) -> Result<PathBuf> {
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes `correlation.tsv`, `importance.tsv` and, with `plots`, one heatmap
/// per table. Returns the written paths.
pub fn export_report(results: &AnalysisResults, dir: &Path, plots: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = vec![
        write_file(dir.join("correlation.tsv"), correlation_table(&results.correlations)?.as_bytes())?,
        write_file(dir.join("importance.tsv"), importance_table(&results.importance)?.as_bytes())?,
    ];
    if plots {
        let maps = &results.importance;
        if let Some(first) = maps.first() {
            let n = first.values.len();
            let grid: Vec<f64> = (0..n).flat_map(|r| maps.iter().map(move |m| m.values[r])).collect();
            written.push(write_file(dir.join("importance.pgm"), &render_heatmap_pgm(&grid, n, maps.len(), 8))?);
        }
        let rows = &results.correlations;
        if let Some(first) = rows.first() {
            let k = first.folds.len().max(1);
            let grid: Vec<f64> = rows
                .iter()
                .flat_map(|r| {
                    let folds = if r.folds.is_empty() { vec![Some(r.embedding.r)] } else { r.folds.clone() };
                    folds.into_iter().map(|v| v.map_or(0.0, f64::abs))
                })
                .collect();
            written.push(write_file(dir.join("correlation.pgm"), &render_heatmap_pgm(&grid, rows.len(), k, 8))?);
        }
    }
    Ok(written)
}
