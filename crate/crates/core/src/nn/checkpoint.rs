//! Model checkpoint container.
//!
//! ```text
//! manifest.json    format_version, dtype, model description, tensor table
//! tensors.bin      every tensor back to back, little-endian, manifest dtype
//! config.json      resolved configuration snapshot of the producing run
//! optimizer.json   optimizer kind, completed epochs, learning rate, decay
//! rng.json         base seed and the next epoch (all streams are derived
//!                  from these, so no generator state needs saving)
//! ```
//!
//! Tensor table entries are `{ "name", "role", "shape", "offset", "count" }`
//! with `offset` counted in elements. Names are prefixed by `encoder.`,
//! `predictor.` or `head.`. Tensors are written in the model's own dtype, so
//! reloading reproduces every value exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Encoder, HeadKind, ModelConfig, Predictor, TaskHead};
use super::params::{Module, TensorRole};
use crate::data::io::{read_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub n_rois: usize,
    pub image_shape: [usize; 3],
    pub has_predictor: bool,
    pub head: Option<HeadSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub kind: String,
    pub epochs_completed: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    role: TensorRole,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    dtype: String,
    model: ModelSpec,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub encoder: Encoder<T>,
    pub predictor: Option<Predictor<T>>,
    pub head: Option<TaskHead<T>>,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub config: serde_json::Value,
}

fn for_each_module<T: Scalar>(ck: &Checkpoint<T>, f: &mut dyn FnMut(&str, &dyn Module<T>)) {
    f("encoder", &ck.encoder);
    if let Some(p) = &ck.predictor {
        f("predictor", p);
    }
    if let Some(h) = &ck.head {
        f("head", h);
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    write_bytes(path, format!("{text}\n").as_bytes())
}

fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

impl<T: Scalar> Checkpoint<T> {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            config: self.encoder.config.clone(),
            n_rois: self.encoder.n_rois,
            image_shape: self.encoder.image_shape,
            has_predictor: self.predictor.is_some(),
            head: self.head.as_ref().map(|h| HeadSpec {
                kind: h.kind,
                hidden: h.mlp.layers[..h.mlp.layers.len() - 1].iter().map(|l| l.out_dim()).collect(),
            }),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        let mut offset = 0;
        for_each_module(self, &mut |prefix, m| {
            m.visit(prefix, &mut |name, role, shape, data| {
                tensors.push(TensorRecord {
                    name: name.to_owned(),
                    role,
                    shape: shape.to_vec(),
                    offset,
                    count: data.len(),
                });
                offset += data.len();
                for v in data {
                    v.write_le(&mut blob);
                }
            });
        });
        write_bytes(&dir.join("tensors.bin"), &blob)?;
        write_json(
            &dir.join(MANIFEST_FILE),
            &Manifest {
                format_version: FORMAT_VERSION,
                dtype: T::DTYPE.to_owned(),
                model: self.spec(),
                tensors,
            },
        )?;
        write_json(&dir.join("config.json"), &self.config)?;
        write_json(&dir.join("optimizer.json"), &self.optimizer)?;
        write_json(&dir.join("rng.json"), &self.rng)
    }

    /// Loads a checkpoint, converting values if it was written in another
    /// dtype.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: Manifest = read_json(&manifest_path)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "{}: unsupported checkpoint format_version {}",
                manifest_path.display(),
                manifest.format_version
            )));
        }
        let blob = read_bytes(&dir.join("tensors.bin"))?;
        let values: Vec<T> = match manifest.dtype.as_str() {
            "float32" => blob.chunks_exact(4).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect(),
            "float64" => blob.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
            other => return Err(Error::Validation(format!("unknown checkpoint dtype {other:?}"))),
        };
        let spec = &manifest.model;
        let mut ck = Checkpoint {
            encoder: Encoder::new(&spec.config, spec.n_rois, spec.image_shape, 0)?,
            predictor: spec.has_predictor.then(|| Predictor::new(&spec.config, 0)),
            head: spec
                .head
                .as_ref()
                .map(|h| TaskHead::new(spec.config.repr_dim(), &h.hidden, h.kind, 0)),
            optimizer: read_json(&dir.join("optimizer.json"))?,
            rng: read_json(&dir.join("rng.json"))?,
            config: read_json(&dir.join("config.json"))?,
        };
        let mut index = 0;
        let mut failure: Option<Error> = None;
        let mut fill = |prefix: &str, m: &mut dyn Module<T>| {
            m.visit_mut(prefix, &mut |name, role, shape, data| {
                if failure.is_some() {
                    return;
                }
                let Some(rec) = manifest.tensors.get(index) else {
                    failure = Some(Error::Validation(format!("checkpoint is missing tensor {name}")));
                    return;
                };
                index += 1;
                if rec.name != name || rec.role != role || rec.shape != shape || rec.count != data.len() {
                    failure = Some(Error::Validation(format!(
                        "checkpoint tensor {} {:?} does not match model tensor {name} {shape:?}",
                        rec.name, rec.shape
                    )));
                    return;
                }
                match values.get(rec.offset..rec.offset + rec.count) {
                    Some(src) => data.copy_from_slice(src),
                    None => failure = Some(Error::Validation(format!("tensors.bin too short for {name}"))),
                }
            });
        };
        fill("encoder", &mut ck.encoder);
        if let Some(p) = &mut ck.predictor {
            fill("predictor", p);
        }
        if let Some(h) = &mut ck.head {
            fill("head", h);
        }
        if let Some(e) = failure {
            return Err(e);
        }
        if index != manifest.tensors.len() {
            return Err(Error::Validation("checkpoint has extra tensors".into()));
        }
        Ok(ck)
    }
}
