use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{AtlasVolume, Dataset, GroundTruth, Phenotype, PhenotypeKind, PhenotypeTable, VoxelSeries};
use crate::error::{Error, Result};
use crate::graph::{build_instance, GraphConfig};
use crate::rng::{self, domain, Rng};
use crate::scalar::Scalar;

/// Knobs of the synthetic generator.
///
/// ROI signals follow a block-community covariance. A designated node set
/// couples to a second community with a sign set by the subject's class.
/// One further node tracks a continuous score twice over: its coupling to
/// its partner community and its activation level both scale with the score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_tasks: usize,
    pub n_rois: usize,
    pub volume_shape: [usize; 3],
    /// Frames per scan.
    pub n_frames: usize,
    /// Fraction of subjects in class 1.
    pub class_fraction: f64,
    /// Scales both planted signals; 0 removes them.
    pub signal_strength: f64,
    pub n_communities: usize,
    pub n_class_rois: usize,
    pub within_community_corr: f64,
    pub task_strength: f64,
    pub voxel_noise: f64,
    pub score_noise: f64,
    pub graph: GraphConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 24,
            n_tasks: 4,
            n_rois: 16,
            volume_shape: [16, 16, 16],
            n_frames: 64,
            class_fraction: 0.5,
            signal_strength: 1.0,
            n_communities: 4,
            n_class_rois: 4,
            within_community_corr: 0.5,
            task_strength: 0.5,
            voxel_noise: 0.5,
            score_noise: 0.2,
            graph: GraphConfig::default(),
        }
    }
}

pub const CLASS_PHENOTYPE: &str = "diagnosis";
pub const SCORE_PHENOTYPE: &str = "score";
pub const AGE_PHENOTYPE: &str = "age_group";

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(Error::Config(format!("n_frames must be >= 2, got {}", self.n_frames)));
        }
        if self.n_subjects == 0 || self.n_tasks == 0 || self.n_rois == 0 {
            return Err(Error::Config("n_subjects, n_tasks and n_rois must be positive".into()));
        }
        if self.n_communities == 0 || self.n_communities > self.n_rois {
            return Err(Error::Config("n_communities must be in 1..=n_rois".into()));
        }
        if self.n_class_rois >= self.n_rois {
            return Err(Error::Config("n_class_rois must leave room for the score ROI".into()));
        }
        if !(0.0..=1.0).contains(&self.class_fraction) {
            return Err(Error::Config("class_fraction must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.within_community_corr) {
            return Err(Error::Config("within_community_corr must be in [0, 1)".into()));
        }
        Ok(())
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Voronoi parcellation of an ellipsoidal brain mask.
fn synth_atlas(config: &SynthConfig, rng: &mut Rng) -> Result<AtlasVolume> {
    let [sx, sy, sz] = config.volume_shape;
    let center = [sx as f64 / 2.0 - 0.5, sy as f64 / 2.0 - 0.5, sz as f64 / 2.0 - 0.5];
    let radii = [
        (sx as f64 / 2.0 - 0.5).max(0.5),
        (sy as f64 / 2.0 - 0.5).max(0.5),
        (sz as f64 / 2.0 - 0.5).max(0.5),
    ];
    let mut mask = Vec::new();
    for x in 0..sx {
        for y in 0..sy {
            for z in 0..sz {
                let p = [x as f64, y as f64, z as f64];
                let r2: f64 = (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum();
                if r2 <= 1.0 {
                    mask.push([x, y, z]);
                }
            }
        }
    }
    if config.n_rois > mask.len() {
        return Err(Error::Config(format!(
            "n_rois = {} exceeds the {} voxels of the brain mask",
            config.n_rois,
            mask.len()
        )));
    }
    let seeds: Vec<[usize; 3]> = mask.choose_multiple(rng, config.n_rois).copied().collect();
    let mut labels = Array3::<i32>::zeros((sx, sy, sz));
    for v in &mask {
        let nearest = seeds
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let d: isize = (0..3).map(|a| (v[a] as isize - s[a] as isize).pow(2)).sum();
                (d, k)
            })
            .min()
            .expect("at least one seed")
            .1;
        labels[[v[0], v[1], v[2]]] = nearest as i32 + 1;
    }
    AtlasVolume::new(labels, config.n_rois)
}

/// Generates a dataset with planted classification and regression signal.
pub fn generate_synthetic<T: Scalar>(config: &SynthConfig, seed: u64) -> Result<Dataset<T>> {
    config.validate()?;
    let mut rng = rng::stream(seed, &[domain::SYNTH, 0]);
    let atlas = synth_atlas(config, &mut rng)?;
    let n = config.n_rois;
    let k = config.n_communities;
    let frames = config.n_frames;

    let community: Vec<usize> = (0..n).map(|r| r % k).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut class_nodes: Vec<usize> = order[..config.n_class_rois].to_vec();
    class_nodes.sort_unstable();
    let signal_node = order[config.n_class_rois];
    let partner: Vec<usize> = community.iter().map(|&c| (c + 1) % k).collect();
    let baseline: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..2.0)).collect();

    let tasks: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..config.n_tasks)
        .map(|_| {
            let loading = (0..n).map(|_| normal(&mut rng)).collect();
            let offset = (0..n).map(|_| normal(&mut rng)).collect();
            let phase = rng.gen_range(0.0..2.0 * PI);
            (loading, offset, phase)
        })
        .collect();

    let width = config.n_subjects.saturating_sub(1).to_string().len().max(3);
    let subject_ids: Vec<String> = (0..config.n_subjects).map(|s| format!("sub{s:0width$}")).collect();
    let task_ids: Vec<String> = (0..config.n_tasks).map(|j| format!("task{j}")).collect();

    let n_pos = (config.class_fraction * config.n_subjects as f64).round() as usize;
    let mut classes: Vec<usize> = (0..config.n_subjects).map(|s| usize::from(s < n_pos)).collect();
    classes.shuffle(&mut rng);

    let mut ages: Vec<usize> = (0..config.n_subjects).map(|s| s % 4).collect();
    ages.shuffle(&mut rng);

    let mut class_values = BTreeMap::new();
    let mut score_values = BTreeMap::new();
    let mut age_values = BTreeMap::new();
    let mut amplitude = Vec::with_capacity(config.n_subjects);
    let mut subject_offset = Vec::with_capacity(config.n_subjects);
    for (s, id) in subject_ids.iter().enumerate() {
        let u = normal(&mut rng);
        amplitude.push(u);
        subject_offset.push((0..n).map(|_| 0.1 * normal(&mut rng)).collect::<Vec<_>>());
        class_values.insert(id.clone(), classes[s] as f64);
        score_values.insert(id.clone(), u + config.score_noise * normal(&mut rng));
        age_values.insert(id.clone(), ages[s] as f64);
    }

    let rho = config.within_community_corr;
    let coupling = 0.7 * config.signal_strength;
    let level_gain = 0.5 * config.signal_strength;
    let shape = config.volume_shape;
    let n_vox = shape[0] * shape[1] * shape[2];

    let mut instances = Vec::with_capacity(config.n_subjects * config.n_tasks);
    for (s, subject) in subject_ids.iter().enumerate() {
        let sign = if classes[s] == 1 { 1.0 } else { -1.0 };
        for (j, task) in task_ids.iter().enumerate() {
            let mut srng = rng::stream(seed, &[domain::SYNTH, 1, s as u64, j as u64]);
            let (loading, offset, phase) = &tasks[j];
            let mut roi = vec![0.0f64; frames * n];
            for t in 0..frames {
                let g: Vec<f64> = (0..k).map(|_| normal(&mut srng)).collect();
                let wave = (2.0 * PI * (j + 1) as f64 * t as f64 / frames as f64 + phase).sin();
                for r in 0..n {
                    let mut v = rho.sqrt() * g[community[r]] + (1.0 - rho).sqrt() * normal(&mut srng);
                    if class_nodes.binary_search(&r).is_ok() {
                        v += coupling * sign * g[partner[r]];
                    }
                    v += config.task_strength * (loading[r] * wave + offset[r]);
                    v += baseline[r] + subject_offset[s][r];
                    if r == signal_node {
                        v += level_gain * amplitude[s] * (1.0 + g[partner[r]]);
                    }
                    roi[t * n + r] = v;
                }
            }
            let labels = atlas.labels().as_slice().expect("standard layout");
            let mut data = Array4::<T>::zeros((frames, shape[0], shape[1], shape[2]));
            let flat = data.as_slice_mut().expect("standard layout");
            for t in 0..frames {
                for v in 0..n_vox {
                    let label = labels[v];
                    if label == 0 {
                        continue;
                    }
                    let x = roi[t * n + label as usize - 1] + config.voxel_noise * normal(&mut srng);
                    flat[t * n_vox + v] = T::from_f64_lossy(x);
                }
            }
            let series = VoxelSeries::new(data)?;
            instances.push(build_instance(subject, task, &series, &atlas, "synthetic", &config.graph)?);
        }
    }

    let mut phenotypes = PhenotypeTable::default();
    phenotypes.insert(
        CLASS_PHENOTYPE,
        Phenotype {
            kind: PhenotypeKind::Categorical,
            values: class_values,
        },
    );
    phenotypes.insert(
        SCORE_PHENOTYPE,
        Phenotype {
            kind: PhenotypeKind::Continuous,
            values: score_values,
        },
    );
    phenotypes.insert(
        AGE_PHENOTYPE,
        Phenotype {
            kind: PhenotypeKind::Categorical,
            values: age_values,
        },
    );

    let dataset = Dataset {
        instances,
        atlas,
        atlas_ref: "synthetic".into(),
        phenotypes,
        task_set: task_ids,
        ground_truth: Some(GroundTruth {
            class_phenotype: CLASS_PHENOTYPE.into(),
            class_nodes,
            regression_phenotype: SCORE_PHENOTYPE.into(),
            signal_node,
            signal_strength: config.signal_strength,
        }),
    };
    dataset.validate()?;
    Ok(dataset)
}
