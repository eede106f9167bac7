//! Raw scan directories for `build`.
//!
//! ```text
//! raw.json
//! atlas.i32                 int32, shape [X, Y, Z]
//! <run>.f32                 float32, shape [T, X, Y, Z], one per run
//! ```
//!
//! `raw.json` holds `atlas` (as in a dataset manifest), `runs` (a list of
//! `{ "subject_id", "task_id", "path", "frames" }`) and `phenotypes`.

use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::io::{read_atlas, read_f32_blob, AtlasRecord};
use super::{split_into_blocks, Dataset, PhenotypeTable, VoxelSeries};
use crate::error::{Error, Result};
use crate::graph::{build_instance, GraphConfig};
use crate::scalar::Scalar;

pub const RAW_MANIFEST_FILE: &str = "raw.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    subject_id: String,
    task_id: String,
    path: String,
    frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    atlas: AtlasRecord,
    runs: Vec<RawRun>,
    #[serde(default)]
    phenotypes: PhenotypeTable,
}

/// Builds every instance of a raw directory. With `blocks`, each run is cut
/// into blocks and block `k` of task `t` becomes task `t_k`.
pub fn build_from_raw<T: Scalar>(dir: &Path, graph: &GraphConfig, blocks: &[(usize, usize)]) -> Result<Dataset<T>> {
    let file = dir.join(RAW_MANIFEST_FILE);
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest: RawManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: file.clone(),
        message: e.to_string(),
    })?;
    let atlas = read_atlas(dir, &manifest.atlas)?;
    let [x, y, z] = manifest.atlas.shape;
    let mut instances = Vec::new();
    let mut task_set = Vec::new();
    for run in &manifest.runs {
        let path = dir.join(&run.path);
        let values = read_f32_blob(&path, run.frames * x * y * z)?;
        let data = Array4::from_shape_vec((run.frames, x, y, z), values.into_iter().map(|v| T::from_f64_lossy(f64::from(v))).collect())
            .expect("length checked");
        let series = VoxelSeries::new(data)?;
        let parts: Vec<(String, VoxelSeries<T>)> = if blocks.is_empty() {
            vec![(run.task_id.clone(), series)]
        } else {
            split_into_blocks(&series, blocks)?
                .into_iter()
                .enumerate()
                .map(|(k, b)| (format!("{}_{k}", run.task_id), b))
                .collect()
        };
        for (task, s) in parts {
            if !task_set.contains(&task) {
                task_set.push(task.clone());
            }
            instances.push(build_instance(&run.subject_id, &task, &s, &atlas, &manifest.atlas.id, graph)?);
        }
    }
    let dataset = Dataset {
        instances,
        atlas,
        atlas_ref: manifest.atlas.id.clone(),
        phenotypes: manifest.phenotypes,
        task_set,
        ground_truth: None,
    };
    dataset.validate()?;
    Ok(dataset)
}
