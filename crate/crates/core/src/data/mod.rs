//! Data model: atlases, voxel and ROI series, task instances, phenotypes and
//! datasets, plus on-disk IO, synthetic generation and cross-validation folds.

mod folds;
pub(crate) mod io;
mod raw;
mod series;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BrainGraph, MeanImage};
use crate::scalar::Scalar;

pub use folds::{make_folds, FoldSplit};
pub use io::{load_dataset, save_dataset, MANIFEST_FILE};
pub use raw::{build_from_raw, RAW_MANIFEST_FILE};
pub use series::{extract_roi_series, split_into_blocks};
pub use synth::{generate_synthetic, SynthConfig};

/// Integer voxel-to-ROI labeling. Label 0 is background; ROI ids run `1..=n`.
///
/// ROI id `r` corresponds to graph node `r - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasVolume {
    labels: Array3<i32>,
    n_rois: usize,
    /// Flat (row-major) voxel indices for each ROI, indexed by node.
    members: Vec<Vec<usize>>,
}

impl AtlasVolume {
    pub fn new(labels: Array3<i32>, n_rois: usize) -> Result<Self> {
        if n_rois == 0 {
            return Err(Error::Validation("atlas must define at least one ROI".into()));
        }
        let mut members = vec![Vec::new(); n_rois];
        for (flat, &label) in labels.iter().enumerate() {
            if label < 0 {
                return Err(Error::Validation(format!("negative atlas label {label}")));
            }
            let label = label as usize;
            if label > n_rois {
                return Err(Error::Validation(format!(
                    "atlas label {label} exceeds ROI count {n_rois}"
                )));
            }
            if label > 0 {
                members[label - 1].push(flat);
            }
        }
        if let Some(missing) = members.iter().position(Vec::is_empty) {
            return Err(Error::Validation(format!("ROI {} has no voxels", missing + 1)));
        }
        // iteration above is in logical order; make sure flat indices match memory layout
        let labels = labels.as_standard_layout().into_owned();
        Ok(Self {
            labels,
            n_rois,
            members,
        })
    }

    pub fn labels(&self) -> &Array3<i32> {
        &self.labels
    }

    pub fn n_rois(&self) -> usize {
        self.n_rois
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.labels.shape();
        [s[0], s[1], s[2]]
    }

    /// Flat voxel indices belonging to graph node `node` (ROI id `node + 1`).
    pub fn voxels_of(&self, node: usize) -> &[usize] {
        &self.members[node]
    }

    /// Node index for each voxel, `None` for background.
    pub fn node_of_voxel(&self, flat: usize) -> Option<usize> {
        let label = *self.labels.as_slice().expect("standard layout").get(flat)?;
        (label > 0).then(|| label as usize - 1)
    }

    pub fn voxel_count(&self) -> usize {
        self.labels.len()
    }

    pub fn labeled_voxel_count(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }
}

/// Raw 4D series laid out as `(T, X, Y, Z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSeries<T> {
    data: Array4<T>,
}

impl<T: Scalar> VoxelSeries<T> {
    pub fn new(data: Array4<T>) -> Result<Self> {
        if data.shape()[0] == 0 {
            return Err(Error::Validation("voxel series has no frames".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("voxel series contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array4<T> {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }
}

/// Per-ROI mean signal laid out as `(T, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTimeSeries<T> {
    data: Array2<T>,
}

impl<T: Scalar> RoiTimeSeries<T> {
    pub fn new(data: Array2<T>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("ROI series contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array2<T> {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_rois(&self) -> usize {
        self.data.ncols()
    }
}

/// One (subject, task) sample: graph view plus image view.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance<T> {
    pub subject_id: String,
    pub task_id: String,
    pub graph: BrainGraph<T>,
    pub image: MeanImage<T>,
    pub atlas_ref: String,
}

impl<T: Scalar> TaskInstance<T> {
    pub fn validate(&self, atlas: &AtlasVolume) -> Result<()> {
        if self.graph.n() != atlas.n_rois() {
            return Err(Error::Validation(format!(
                "instance ({}, {}) has {} nodes but atlas has {} ROIs",
                self.subject_id,
                self.task_id,
                self.graph.n(),
                atlas.n_rois()
            )));
        }
        if self.image.shape() != atlas.shape() {
            return Err(Error::Validation(format!(
                "instance ({}, {}) image shape {:?} differs from atlas shape {:?}",
                self.subject_id,
                self.task_id,
                self.image.shape(),
                atlas.shape()
            )));
        }
        self.graph.validate()?;
        if self.image.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "instance ({}, {}) image contains non-finite values",
                self.subject_id, self.task_id
            )));
        }
        Ok(())
    }
}

/// How a phenotype's values are interpreted downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhenotypeKind {
    /// 0-based contiguous integer codes.
    Categorical,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phenotype {
    pub kind: PhenotypeKind,
    pub values: BTreeMap<String, f64>,
}

impl Phenotype {
    pub fn validate(&self, name: &str) -> Result<()> {
        for (subject, v) in &self.values {
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "phenotype {name} has non-finite value for {subject}"
                )));
            }
        }
        if self.kind == PhenotypeKind::Categorical {
            let mut codes = BTreeSet::new();
            for (subject, &v) in &self.values {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::Validation(format!(
                        "categorical phenotype {name} has non-integer code {v} for {subject}"
                    )));
                }
                codes.insert(v as u64);
            }
            if let Some(&max) = codes.iter().next_back() {
                if max as usize + 1 != codes.len() {
                    return Err(Error::Validation(format!(
                        "categorical phenotype {name} codes are not contiguous from 0"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of classes for a categorical phenotype.
    pub fn n_classes(&self) -> usize {
        self.values
            .values()
            .fold(0usize, |m, &v| m.max(v as usize + 1))
    }
}

/// Per-subject labels and scores keyed by phenotype name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhenotypeTable {
    pub phenotypes: BTreeMap<String, Phenotype>,
}

impl PhenotypeTable {
    pub fn get(&self, name: &str) -> Result<&Phenotype> {
        self.phenotypes
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown phenotype {name}")))
    }

    pub fn value(&self, name: &str, subject: &str) -> Result<f64> {
        self.get(name)?.values.get(subject).copied().ok_or_else(|| {
            Error::Validation(format!("phenotype {name} has no value for subject {subject}"))
        })
    }

    pub fn insert(&mut self, name: impl Into<String>, phenotype: Phenotype) {
        self.phenotypes.insert(name.into(), phenotype);
    }
}

/// Planted structure recorded by the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Categorical phenotype driven by the planted connectivity flip.
    pub class_phenotype: String,
    /// Graph node indices whose cross-community coupling depends on class.
    pub class_nodes: Vec<usize>,
    /// Continuous phenotype driven by one ROI's activation level.
    pub regression_phenotype: String,
    pub signal_node: usize,
    pub signal_strength: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub instances: Vec<TaskInstance<T>>,
    pub atlas: AtlasVolume,
    pub atlas_ref: String,
    pub phenotypes: PhenotypeTable,
    pub task_set: Vec<String>,
    pub ground_truth: Option<GroundTruth>,
}

impl<T: Scalar> Dataset<T> {
    /// Checks every cross-object invariant.
    pub fn validate(&self) -> Result<()> {
        let tasks: BTreeSet<&str> = self.task_set.iter().map(String::as_str).collect();
        if tasks.len() != self.task_set.len() {
            return Err(Error::Validation("task_set contains duplicates".into()));
        }
        let mut seen = BTreeSet::new();
        for inst in &self.instances {
            if !tasks.contains(inst.task_id.as_str()) {
                return Err(Error::Validation(format!(
                    "unknown task id {} for subject {}",
                    inst.task_id, inst.subject_id
                )));
            }
            if !seen.insert((inst.subject_id.as_str(), inst.task_id.as_str())) {
                return Err(Error::Validation(format!(
                    "duplicate instance ({}, {})",
                    inst.subject_id, inst.task_id
                )));
            }
            inst.validate(&self.atlas)?;
        }
        let subjects = self.subjects();
        let tasks_present: BTreeSet<&str> =
            self.instances.iter().map(|i| i.task_id.as_str()).collect();
        if self.instances.len() != subjects.len() * tasks_present.len() {
            return Err(Error::Validation(format!(
                "{} instances do not cover {} subjects x {} tasks",
                self.instances.len(),
                subjects.len(),
                tasks_present.len()
            )));
        }
        for (name, p) in &self.phenotypes.phenotypes {
            p.validate(name)?;
        }
        if let Some(gt) = &self.ground_truth {
            let n = self.atlas.n_rois();
            if gt.signal_node >= n || gt.class_nodes.iter().any(|&r| r >= n) {
                return Err(Error::Validation("ground truth references unknown ROI".into()));
            }
        }
        Ok(())
    }

    /// Sorted, de-duplicated subject ids.
    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.instances.iter().map(|i| i.subject_id.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// Indices of the instances belonging to `subject`.
    pub fn instances_of(&self, subject: &str) -> Vec<usize> {
        self.instances
            .iter()
            .enumerate()
            .filter(|(_, i)| i.subject_id == subject)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn n_rois(&self) -> usize {
        self.atlas.n_rois()
    }

    /// Converts every floating-point payload to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            instances: self
                .instances
                .iter()
                .map(|i| TaskInstance {
                    subject_id: i.subject_id.clone(),
                    task_id: i.task_id.clone(),
                    graph: i.graph.cast(),
                    image: i.image.cast(),
                    atlas_ref: i.atlas_ref.clone(),
                })
                .collect(),
            atlas: self.atlas.clone(),
            atlas_ref: self.atlas_ref.clone(),
            phenotypes: self.phenotypes.clone(),
            task_set: self.task_set.clone(),
            ground_truth: self.ground_truth.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atlas_labels(n_missing: Option<i32>) -> Array3<i32> {
        let mut labels = Array3::zeros((4, 4, 2));
        let mut next = 1;
        for x in 0..4 {
            for y in 0..4 {
                let l = (next - 1) % 8 + 1;
                next += 1;
                if Some(l) == n_missing {
                    labels[[x, y, 0]] = 1;
                } else {
                    labels[[x, y, 0]] = l;
                }
            }
        }
        labels
    }

    #[test]
    fn atlas_missing_roi_rejected() {
        let err = AtlasVolume::new(atlas_labels(Some(5)), 8).unwrap_err();
        assert!(err.to_string().contains("ROI 5 has no voxels"), "{err}");
        assert!(AtlasVolume::new(atlas_labels(None), 8).is_ok());
    }

    #[test]
    fn atlas_label_bounds() {
        let mut labels = atlas_labels(None);
        labels[[0, 0, 1]] = 9;
        assert!(AtlasVolume::new(labels.clone(), 8).is_err());
        labels[[0, 0, 1]] = -1;
        assert!(AtlasVolume::new(labels, 8).is_err());
    }

    #[test]
    fn atlas_membership_matches_labels() {
        let atlas = AtlasVolume::new(atlas_labels(None), 8).unwrap();
        for node in 0..8 {
            for &flat in atlas.voxels_of(node) {
                assert_eq!(atlas.node_of_voxel(flat), Some(node));
            }
        }
        assert_eq!(atlas.labeled_voxel_count(), 16);
    }

    #[test]
    fn categorical_codes_must_be_contiguous() {
        let mut values = BTreeMap::new();
        values.insert("a".to_string(), 0.0);
        values.insert("b".to_string(), 2.0);
        let p = Phenotype {
            kind: PhenotypeKind::Categorical,
            values,
        };
        assert!(p.validate("x").is_err());
    }
}
