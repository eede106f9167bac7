//! On-disk dataset container.
//!
//! A dataset directory holds `manifest.json` plus raw little-endian blobs:
//!
//! ```text
//! manifest.json
//! atlas.i32                   int32, shape [X, Y, Z]
//! instances/000000.features   float32, shape [n, n]     (Pearson rows)
//! instances/000000.edges      float32, shape [m, 3]     (i, j, w) per row
//! instances/000000.image      float32, shape [X, Y, Z]  (mean image)
//! ```
//!
//! Manifest fields (`format_version` = 1):
//!
//! - `atlas`: `{ "path", "shape", "n_rois", "id" }`
//! - `task_set`: list of task ids
//! - `instances`: list of `{ "subject_id", "task_id", "features", "edges", "image" }`,
//!   each blob entry being `{ "path", "shape" }`
//! - `phenotypes`: name -> `{ "kind": "categorical" | "continuous", "values": { subject: number } }`
//! - `ground_truth`: optional planted structure from the synthetic generator
//!
//! All arrays are row-major.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{AtlasVolume, Dataset, GroundTruth, PhenotypeTable, TaskInstance};
use crate::error::{Error, Result};
use crate::graph::{BrainGraph, Edge, MeanImage};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobRef {
    path: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct AtlasRecord {
    pub(crate) path: String,
    pub(crate) shape: [usize; 3],
    pub(crate) n_rois: usize,
    pub(crate) id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    subject_id: String,
    task_id: String,
    features: BlobRef,
    edges: BlobRef,
    image: BlobRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    atlas: AtlasRecord,
    task_set: Vec<String>,
    instances: Vec<InstanceRecord>,
    phenotypes: PhenotypeTable,
    #[serde(default)]
    ground_truth: Option<GroundTruth>,
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32_blob(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = read_bytes(path)?;
    if bytes.len() != expected * 4 {
        return Err(Error::Validation(format!(
            "{} holds {} bytes, expected {} float32 values",
            path.display(),
            bytes.len(),
            expected
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn f32_blob<T: Scalar>(values: impl Iterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&(v.to_f64().unwrap() as f32).to_le_bytes());
    }
    out
}

fn blob_path(root: &Path, rel: &str) -> PathBuf {
    root.join(rel)
}

pub(crate) fn read_atlas(root: &Path, record: &AtlasRecord) -> Result<AtlasVolume> {
    let atlas_path = blob_path(root, &record.path);
    let [x, y, z] = record.shape;
    let bytes = read_bytes(&atlas_path)?;
    if bytes.len() != x * y * z * 4 {
        return Err(Error::Validation(format!(
            "{} holds {} bytes, expected shape {:?} of int32",
            atlas_path.display(),
            bytes.len(),
            record.shape
        )));
    }
    let labels: Vec<i32> = bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    AtlasVolume::new(
        Array3::from_shape_vec((x, y, z), labels).expect("length checked"),
        record.n_rois,
    )
}

/// Reads and validates a dataset directory (or its `manifest.json`).
pub fn load_dataset<T: Scalar>(manifest_path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let manifest_path = manifest_path.as_ref();
    let (root, file) = if manifest_path.is_dir() {
        (manifest_path.to_path_buf(), manifest_path.join(MANIFEST_FILE))
    } else {
        (
            manifest_path.parent().map(Path::to_path_buf).unwrap_or_default(),
            manifest_path.to_path_buf(),
        )
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: file.clone(),
        message: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "unsupported manifest format_version {}",
            manifest.format_version
        )));
    }

    let atlas = read_atlas(&root, &manifest.atlas)?;

    let mut instances = Vec::with_capacity(manifest.instances.len());
    for rec in &manifest.instances {
        instances.push(load_instance(&root, rec, &manifest.atlas.id)?);
    }

    let dataset = Dataset {
        instances,
        atlas,
        atlas_ref: manifest.atlas.id,
        phenotypes: manifest.phenotypes,
        task_set: manifest.task_set,
        ground_truth: manifest.ground_truth,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn load_instance<T: Scalar>(root: &Path, rec: &InstanceRecord, atlas_id: &str) -> Result<TaskInstance<T>> {
    let shape_err = |what: &str, shape: &[usize]| {
        Error::Validation(format!(
            "instance ({}, {}) {what} has invalid shape {shape:?}",
            rec.subject_id, rec.task_id
        ))
    };
    let fs_ = &rec.features.shape;
    if fs_.len() != 2 || fs_[0] != fs_[1] {
        return Err(shape_err("features", fs_));
    }
    let n = fs_[0];
    let features = read_f32_blob(&blob_path(root, &rec.features.path), n * n)?;
    let features = Array2::from_shape_vec((n, n), features.into_iter().map(|v| T::from_f64_lossy(v as f64)).collect())
        .expect("length checked");

    let es = &rec.edges.shape;
    if es.len() != 2 || es[1] != 3 {
        return Err(shape_err("edges", es));
    }
    let raw = read_f32_blob(&blob_path(root, &rec.edges.path), es[0] * 3)?;
    let mut edges = Vec::with_capacity(es[0]);
    for row in raw.chunks_exact(3) {
        if row[0] < 0.0 || row[1] < 0.0 || row[0].fract() != 0.0 || row[1].fract() != 0.0 {
            return Err(Error::Validation(format!(
                "instance ({}, {}) has a non-integer edge endpoint",
                rec.subject_id, rec.task_id
            )));
        }
        edges.push(Edge {
            i: row[0] as usize,
            j: row[1] as usize,
            w: T::from_f64_lossy(row[2] as f64),
        });
    }

    let is = &rec.image.shape;
    if is.len() != 3 {
        return Err(shape_err("image", is));
    }
    let image = read_f32_blob(&blob_path(root, &rec.image.path), is[0] * is[1] * is[2])?;
    let image = Array3::from_shape_vec(
        (is[0], is[1], is[2]),
        image.into_iter().map(|v| T::from_f64_lossy(v as f64)).collect(),
    )
    .expect("length checked");

    Ok(TaskInstance {
        subject_id: rec.subject_id.clone(),
        task_id: rec.task_id.clone(),
        graph: BrainGraph::new(features, edges)?,
        image: MeanImage::new(image),
        atlas_ref: atlas_id.to_owned(),
    })
}

/// Writes a dataset directory. Values are stored as float32.
pub fn save_dataset<T: Scalar>(dataset: &Dataset<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut atlas_bytes = Vec::with_capacity(dataset.atlas.voxel_count() * 4);
    for v in dataset.atlas.labels().iter() {
        atlas_bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(&dir.join("atlas.i32"), &atlas_bytes)?;

    let mut records = Vec::with_capacity(dataset.instances.len());
    for (k, inst) in dataset.instances.iter().enumerate() {
        let stem = format!("instances/{k:06}");
        let n = inst.graph.n();
        let features = format!("{stem}.features");
        write_bytes(&dir.join(&features), &f32_blob(inst.graph.node_features().iter().copied()))?;
        let edges = format!("{stem}.edges");
        let edge_values = inst.graph.edges().iter().flat_map(|e| {
            [T::from_usize(e.i).unwrap(), T::from_usize(e.j).unwrap(), e.w]
        });
        write_bytes(&dir.join(&edges), &f32_blob(edge_values))?;
        let image = format!("{stem}.image");
        write_bytes(&dir.join(&image), &f32_blob(inst.image.as_slice().iter().copied()))?;
        records.push(InstanceRecord {
            subject_id: inst.subject_id.clone(),
            task_id: inst.task_id.clone(),
            features: BlobRef {
                path: features,
                shape: vec![n, n],
            },
            edges: BlobRef {
                path: edges,
                shape: vec![inst.graph.edges().len(), 3],
            },
            image: BlobRef {
                path: image,
                shape: inst.image.shape().to_vec(),
            },
        });
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        atlas: AtlasRecord {
            path: "atlas.i32".into(),
            shape: dataset.atlas.shape(),
            n_rois: dataset.atlas.n_rois(),
            id: dataset.atlas_ref.clone(),
        },
        task_set: dataset.task_set.clone(),
        instances: records,
        phenotypes: dataset.phenotypes.clone(),
        ground_truth: dataset.ground_truth.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_bytes(&dir.join(MANIFEST_FILE), text.as_bytes())
}
