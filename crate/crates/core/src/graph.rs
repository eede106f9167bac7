//! Graph and image views of a scan: Pearson node features, thresholded
//! partial-correlation edges and the time-averaged volume.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{extract_roi_series, AtlasVolume, RoiTimeSeries, TaskInstance, VoxelSeries};
use crate::error::{Error, Result};
use crate::linalg::spd_inverse;
use crate::scalar::{lit, Scalar};

/// Weighted undirected edge, stored with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge<T> {
    pub i: usize,
    pub j: usize,
    pub w: T,
}

/// Functional brain graph: node features are Pearson rows, edges carry
/// signed partial correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct BrainGraph<T> {
    node_features: Array2<T>,
    edges: Vec<Edge<T>>,
}

impl<T: Scalar> BrainGraph<T> {
    /// Builds a graph, normalizing edge endpoints to `i < j`.
    ///
    /// Rejects self-loops, duplicate pairs, out-of-range endpoints and
    /// zero or non-finite weights.
    pub fn new(node_features: Array2<T>, edges: Vec<Edge<T>>) -> Result<Self> {
        let n = node_features.nrows();
        let mut seen = BTreeSet::new();
        let mut normalized = Vec::with_capacity(edges.len());
        for e in edges {
            if e.i >= n || e.j >= n {
                return Err(Error::Validation(format!(
                    "edge ({}, {}) out of range for {n} nodes",
                    e.i, e.j
                )));
            }
            if e.i == e.j {
                return Err(Error::Validation(format!("self-loop on node {}", e.i)));
            }
            if !e.w.is_finite() || e.w == T::zero() {
                return Err(Error::Validation(format!(
                    "edge ({}, {}) has invalid weight {}",
                    e.i, e.j, e.w
                )));
            }
            let (i, j) = if e.i < e.j { (e.i, e.j) } else { (e.j, e.i) };
            if !seen.insert((i, j)) {
                return Err(Error::Validation(format!("duplicate edge ({i}, {j})")));
            }
            normalized.push(Edge { i, j, w: e.w });
        }
        Ok(Self {
            node_features,
            edges: normalized,
        })
    }

    pub fn n(&self) -> usize {
        self.node_features.nrows()
    }

    pub fn node_features(&self) -> &Array2<T> {
        &self.node_features
    }

    pub fn node_features_mut(&mut self) -> &mut Array2<T> {
        &mut self.node_features
    }

    pub fn edges(&self) -> &[Edge<T>] {
        &self.edges
    }

    /// Keeps only the edges for which `keep` returns true.
    pub fn retain_edges(&mut self, mut keep: impl FnMut(usize, &Edge<T>) -> bool) {
        let mut k = 0;
        self.edges.retain(|e| {
            let r = keep(k, e);
            k += 1;
            r
        });
    }

    /// Checks the invariants of a graph built from a correlation matrix.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.node_features.ncols() != n {
            return Err(Error::Validation(format!(
                "node features must be {n}x{n}, got {:?}",
                self.node_features.shape()
            )));
        }
        let bound = 1.0 + 1e-9;
        for ((i, j), v) in self.node_features.indexed_iter() {
            let v = v.to_f64().unwrap_or(f64::NAN);
            if !(v.abs() <= bound) {
                return Err(Error::Validation(format!("node feature ({i}, {j}) = {v} out of [-1, 1]")));
            }
        }
        for i in 0..n {
            let d = self.node_features[[i, i]];
            let row_zero = self.node_features.row(i).iter().all(|v| *v == T::zero());
            if d != T::one() && !row_zero {
                return Err(Error::Validation(format!("node {i} has diagonal {d} but a nonzero row")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> BrainGraph<U> {
        BrainGraph {
            node_features: self.node_features.mapv(|v| U::from_f64_lossy(v.to_f64().unwrap())),
            edges: self
                .edges
                .iter()
                .map(|e| Edge {
                    i: e.i,
                    j: e.j,
                    w: U::from_f64_lossy(e.w.to_f64().unwrap()),
                })
                .collect(),
        }
    }
}

/// Voxel-wise time average of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanImage<T> {
    data: Array3<T>,
}

impl<T: Scalar> MeanImage<T> {
    pub fn new(data: Array3<T>) -> Self {
        Self {
            data: data.as_standard_layout().into_owned(),
        }
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<T> {
        &mut self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn as_slice(&self) -> &[T] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn as_slice_mut(&mut self) -> &mut [T] {
        self.data.as_slice_mut().expect("standard layout")
    }

    pub fn cast<U: Scalar>(&self) -> MeanImage<U> {
        MeanImage {
            data: self.data.mapv(|v| U::from_f64_lossy(v.to_f64().unwrap())),
        }
    }
}

/// Parameters of graph construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Ridge added to the covariance diagonal, relative to its mean diagonal.
    pub ridge: f64,
    /// Fraction of ROI pairs kept as edges.
    pub edge_fraction: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-3,
            edge_fraction: 0.05,
        }
    }
}

fn centered_columns<T: Scalar>(series: &RoiTimeSeries<T>) -> Result<(Array2<T>, Vec<T>, Vec<bool>)> {
    let data = series.data();
    let frames = data.nrows();
    if frames < 2 {
        return Err(Error::InvalidArgument(format!("correlation needs T >= 2, got {frames}")));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("ROI series contains non-finite values".into()));
    }
    let tf = T::from_usize(frames).unwrap();
    let mean = data.sum_axis(Axis(0)) / tf;
    let centered = data - &mean.view().insert_axis(Axis(0));
    let mut ss = Vec::with_capacity(data.ncols());
    let mut degenerate = Vec::with_capacity(data.ncols());
    for (c, col) in centered.axis_iter(Axis(1)).enumerate() {
        let s: T = col.iter().map(|v| *v * *v).sum();
        let peak = data.column(c).iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let floor = peak * T::epsilon() * lit(4.0);
        let is_zero = s <= tf * floor * floor;
        if is_zero {
            log::warn!("ROI {} has zero variance; its correlations are set to 0", c + 1);
        }
        ss.push(s);
        degenerate.push(is_zero);
    }
    Ok((centered, ss, degenerate))
}

/// Pearson correlation between ROI columns.
///
/// Zero-variance columns yield a zero row and column (diagonal included).
pub fn pearson_matrix<T: Scalar>(series: &RoiTimeSeries<T>) -> Result<Array2<T>> {
    let (centered, ss, degenerate) = centered_columns(series)?;
    let n = centered.ncols();
    let gram = centered.t().dot(&centered);
    let mut r = Array2::<T>::zeros((n, n));
    for i in 0..n {
        if degenerate[i] {
            continue;
        }
        r[[i, i]] = T::one();
        for j in i + 1..n {
            if degenerate[j] {
                continue;
            }
            let v = (gram[[i, j]] / (ss[i] * ss[j]).sqrt()).max(-T::one()).min(T::one());
            r[[i, j]] = v;
            r[[j, i]] = v;
        }
    }
    Ok(r)
}

/// Partial correlation from the ridge-regularized precision matrix.
///
/// `ridge` is relative to the mean of the covariance diagonal. The diagonal
/// of the result is 1 by convention.
pub fn partial_corr_matrix<T: Scalar>(series: &RoiTimeSeries<T>, ridge: f64) -> Result<Array2<T>> {
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    let frames = series.frames();
    let n = series.n_rois();
    if ridge == 0.0 && frames <= n {
        return Err(Error::Numerical(format!(
            "covariance is singular with T = {frames} <= n = {n}; use a positive ridge"
        )));
    }
    let (centered, _, _) = centered_columns(series)?;
    let mut cov = centered.t().dot(&centered) / T::from_usize(frames - 1).unwrap();
    let mean_diag = cov.diag().sum() / T::from_usize(n).unwrap();
    let shift = lit::<T>(ridge) * mean_diag;
    for i in 0..n {
        cov[[i, i]] = cov[[i, i]] + shift;
    }
    let omega = spd_inverse(&cov).map_err(|e| {
        Error::Numerical(format!("regularized covariance is singular ({e}); use a positive ridge"))
    })?;
    let mut p = Array2::<T>::zeros((n, n));
    for i in 0..n {
        p[[i, i]] = T::one();
        for j in i + 1..n {
            let denom = (omega[[i, i]] * omega[[j, j]]).sqrt();
            let v = (-omega[[i, j]] / denom).max(-T::one()).min(T::one());
            p[[i, j]] = v;
            p[[j, i]] = v;
        }
    }
    Ok(p)
}

/// Number of edges kept for `n` nodes at `fraction` of the upper triangle.
pub fn edge_budget(n: usize, fraction: f64) -> usize {
    let pairs = n * n.saturating_sub(1) / 2;
    // guard against products like 0.05 * 20 landing one ulp above an integer
    ((fraction * pairs as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Keeps the strongest `fraction` of strict upper-triangle entries by
/// absolute value. Ties go to the lexicographically smaller `(i, j)`.
/// The result is ordered by `(i, j)` and carries the signed values.
pub fn threshold_edges<T: Scalar>(pcorr: &Array2<T>, fraction: f64) -> Result<Vec<Edge<T>>> {
    let n = pcorr.nrows();
    if pcorr.ncols() != n {
        return Err(Error::Shape(format!("expected a square matrix, got {:?}", pcorr.shape())));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("edge fraction must be in (0, 1], got {fraction}")));
    }
    let tol = lit::<T>(1e-9);
    let mut candidates = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (pcorr[[i, j]], pcorr[[j, i]]);
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::Numerical(format!("non-finite entry at ({i}, {j})")));
            }
            if (a - b).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "matrix is not symmetric at ({i}, {j}): {a} vs {b}"
                )));
            }
            if a != T::zero() {
                candidates.push(Edge { i, j, w: a });
            }
        }
    }
    let budget = edge_budget(n, fraction).min(candidates.len());
    candidates.sort_by(|x, y| {
        y.w.abs()
            .partial_cmp(&x.w.abs())
            .expect("finite")
            .then((x.i, x.j).cmp(&(y.i, y.j)))
    });
    candidates.truncate(budget);
    candidates.sort_by_key(|e| (e.i, e.j));
    Ok(candidates)
}

/// Voxel-wise mean over frames.
pub fn mean_image<T: Scalar>(series: &VoxelSeries<T>) -> Result<MeanImage<T>> {
    let frames = T::from_usize(series.frames()).unwrap();
    let mean = series.data().sum_axis(Axis(0)) / frames;
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("mean image is not finite".into()));
    }
    Ok(MeanImage::new(mean))
}

/// Builds both views of one scan.
pub fn build_instance<T: Scalar>(
    subject_id: &str,
    task_id: &str,
    series: &VoxelSeries<T>,
    atlas: &AtlasVolume,
    atlas_ref: &str,
    config: &GraphConfig,
) -> Result<TaskInstance<T>> {
    let roi = extract_roi_series(series, atlas)?;
    let node_features = pearson_matrix(&roi)?;
    let pcorr = partial_corr_matrix(&roi, config.ridge)?;
    let edges = threshold_edges(&pcorr, config.edge_fraction)?;
    let image = mean_image(series)?;
    Ok(TaskInstance {
        subject_id: subject_id.to_owned(),
        task_id: task_id.to_owned(),
        graph: BrainGraph::new(node_features, edges)?,
        image,
        atlas_ref: atlas_ref.to_owned(),
    })
}
