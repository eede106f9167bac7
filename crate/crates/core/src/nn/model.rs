//! The encoder `f` (graph branch, image branch, projection), the predictor
//! `h` and the downstream task heads `g`.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use super::cnn::{CnnCache, CnnEncoder, DEFAULT_CHANNELS};
use super::gat::{GraphEncoder, GraphEncoderCache};
use super::layers::Mode;
use super::mlp::{Mlp, MlpCache};
use super::params::{join, visit_opt, visit_opt_mut, Module, Visitor, VisitorMut};
use crate::augment::AugmentedView;
use crate::data::TaskInstance;
use crate::error::{Error, Result};
use crate::graph::{BrainGraph, MeanImage};
use crate::rng::{domain, stream};
use crate::scalar::Scalar;

/// Architecture settings, including the structural ablation toggles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Representation dimensionality.
    pub d: usize,
    pub gat_width: usize,
    pub cnn_channels: Vec<usize>,
    /// Predictor hidden width; `None` means `d / 4`.
    pub predictor_hidden: Option<usize>,
    pub predictor_hidden_norm: bool,
    /// Task head hidden widths; `None` means two layers of width `d`.
    pub head_hidden: Option<Vec<usize>>,
    pub no_gnn: bool,
    pub no_cnn: bool,
    pub no_projection_mlp: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 2048,
            gat_width: 128,
            cnn_channels: DEFAULT_CHANNELS.to_vec(),
            predictor_hidden: None,
            predictor_hidden_norm: true,
            head_hidden: None,
            no_gnn: false,
            no_cnn: false,
            no_projection_mlp: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.gat_width == 0 {
            return Err(Error::Config("model.d and model.gat_width must be positive".into()));
        }
        if self.cnn_channels.is_empty() || self.cnn_channels.contains(&0) {
            return Err(Error::Config("model.cnn_channels must be non-empty and positive".into()));
        }
        if self.no_gnn && self.no_cnn {
            return Err(Error::Config("model.no_gnn and model.no_cnn cannot both be set".into()));
        }
        if self.predictor_hidden == Some(0) {
            return Err(Error::Config("model.predictor_hidden must be positive".into()));
        }
        if let Some(h) = &self.head_hidden {
            if h.contains(&0) {
                return Err(Error::Config("model.head_hidden widths must be positive".into()));
            }
        }
        Ok(())
    }

    /// Width of the concatenated branch embeddings.
    pub fn concat_dim(&self) -> usize {
        4 * self.gat_width + self.cnn_channels.last().copied().unwrap_or(0)
    }

    /// Width of `z`.
    pub fn repr_dim(&self) -> usize {
        if self.no_projection_mlp {
            self.concat_dim()
        } else {
            self.d
        }
    }

    pub fn predictor_hidden_dim(&self) -> usize {
        self.predictor_hidden.unwrap_or((self.repr_dim() / 4).max(1))
    }

    pub fn head_hidden_dims(&self) -> Vec<usize> {
        self.head_hidden.clone().unwrap_or_else(|| vec![self.repr_dim(); 2])
    }
}

/// One encoder input: a graph and its companion image.
#[derive(Debug, Clone, Copy)]
pub struct View<'a, T> {
    pub graph: &'a BrainGraph<T>,
    pub image: &'a MeanImage<T>,
}

impl<'a, T> From<&'a AugmentedView<T>> for View<'a, T> {
    fn from(v: &'a AugmentedView<T>) -> Self {
        Self {
            graph: &v.graph,
            image: &v.image,
        }
    }
}

impl<'a, T> From<&'a TaskInstance<T>> for View<'a, T> {
    fn from(v: &'a TaskInstance<T>) -> Self {
        Self {
            graph: &v.graph,
            image: &v.image,
        }
    }
}

/// Gradient of a scalar objective with respect to one view's inputs.
#[derive(Debug, Clone)]
pub struct InputGrad<T> {
    pub node_features: Array2<T>,
    pub image: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub config: ModelConfig,
    pub n_rois: usize,
    pub image_shape: [usize; 3],
    pub gnn: Option<GraphEncoder<T>>,
    pub cnn: Option<CnnEncoder<T>>,
    pub projection: Option<Mlp<T>>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    gnn: Vec<Option<GraphEncoderCache<T>>>,
    cnn: Vec<Option<CnnCache<T>>>,
    projection: Option<MlpCache<T>>,
    n_nodes: Vec<usize>,
}

impl<T: Scalar> Encoder<T> {
    /// Each submodule draws from its own stream, so toggling one branch
    /// leaves the initialization of the others unchanged.
    pub fn new(config: &ModelConfig, n_rois: usize, image_shape: [usize; 3], seed: u64) -> Result<Self> {
        config.validate()?;
        if n_rois == 0 {
            return Err(Error::Config("encoder needs at least one ROI".into()));
        }
        let gnn = (!config.no_gnn)
            .then(|| GraphEncoder::new(&mut stream(seed, &[domain::INIT, 0]), n_rois, config.gat_width));
        let cnn = if config.no_cnn {
            None
        } else {
            Some(CnnEncoder::new(
                &mut stream(seed, &[domain::INIT, 1]),
                image_shape,
                &config.cnn_channels,
            )?)
        };
        let projection = (!config.no_projection_mlp).then(|| {
            Mlp::new(
                &mut stream(seed, &[domain::INIT, 2]),
                &[config.concat_dim(), config.d, config.d],
                true,
                Some(false),
            )
        });
        Ok(Self {
            config: config.clone(),
            n_rois,
            image_shape,
            gnn,
            cnn,
            projection,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.config.repr_dim()
    }

    fn graph_dim(&self) -> usize {
        4 * self.config.gat_width
    }

    /// Concatenated branch embeddings, one row per view. A disabled branch
    /// contributes zeros.
    pub fn branch_features(&self, batch: &[View<'_, T>]) -> Result<(Array2<T>, EncoderCache<T>)> {
        let gd = self.graph_dim();
        let mut h = Array2::<T>::zeros((batch.len(), self.config.concat_dim()));
        let mut cache = EncoderCache {
            gnn: Vec::with_capacity(batch.len()),
            cnn: Vec::with_capacity(batch.len()),
            projection: None,
            n_nodes: Vec::with_capacity(batch.len()),
        };
        for (b, view) in batch.iter().enumerate() {
            if view.graph.n() != self.n_rois {
                return Err(Error::Shape(format!(
                    "graph has {} nodes, encoder expects {}",
                    view.graph.n(),
                    self.n_rois
                )));
            }
            if view.image.shape() != self.image_shape {
                return Err(Error::Shape(format!(
                    "image shape {:?}, encoder expects {:?}",
                    view.image.shape(),
                    self.image_shape
                )));
            }
            cache.n_nodes.push(view.graph.n());
            match &self.gnn {
                Some(g) => {
                    let (e, c) = g.forward(view.graph.node_features(), view.graph.edges())?;
                    h.slice_mut(s![b, ..gd]).assign(&e);
                    cache.gnn.push(Some(c));
                }
                None => cache.gnn.push(None),
            }
            match &self.cnn {
                Some(c) => {
                    let (e, cc) = c.forward(view.image.as_slice());
                    h.slice_mut(s![b, gd..]).assign(&e);
                    cache.cnn.push(Some(cc));
                }
                None => cache.cnn.push(None),
            }
        }
        Ok((h, cache))
    }

    pub fn forward(&self, batch: &[View<'_, T>], mode: Mode) -> Result<(Array2<T>, EncoderCache<T>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let (h, mut cache) = self.branch_features(batch)?;
        let z = match &self.projection {
            Some(p) => {
                let (z, c) = p.forward(&h, mode);
                cache.projection = Some(c);
                z
            }
            None => h,
        };
        Ok((z, cache))
    }

    /// Forward without caches, in evaluation mode.
    pub fn encode(&self, batch: &[View<'_, T>]) -> Result<Array2<T>> {
        Ok(self.forward(batch, Mode::Eval)?.0)
    }

    /// Accumulates parameter gradients into `grad`; returns input gradients
    /// per view when `need_input` is set.
    pub fn backward(
        &self,
        cache: &EncoderCache<T>,
        dz: &Array2<T>,
        grad: &mut Self,
        need_input: bool,
    ) -> Option<Vec<InputGrad<T>>> {
        let dh = match (&self.projection, &cache.projection) {
            (Some(p), Some(c)) => p.backward(c, dz, grad.projection.as_mut().unwrap()),
            _ => dz.clone(),
        };
        let gd = self.graph_dim();
        let mut out = need_input.then(|| Vec::with_capacity(dz.nrows()));
        for b in 0..dz.nrows() {
            let row = dh.row(b);
            let row = row.as_standard_layout();
            let row = row.as_slice().unwrap();
            let d_feat = match (&self.gnn, &cache.gnn[b]) {
                (Some(g), Some(c)) => Some(g.backward(c, &row[..gd], grad.gnn.as_mut().unwrap())),
                _ => None,
            };
            let d_img = match (&self.cnn, &cache.cnn[b]) {
                (Some(cnn), Some(c)) => cnn.backward(c, &row[gd..], grad.cnn.as_mut().unwrap(), need_input),
                _ => None,
            };
            if let Some(out) = out.as_mut() {
                let n = cache.n_nodes[b];
                out.push(InputGrad {
                    node_features: d_feat.unwrap_or_else(|| Array2::zeros((n, self.n_rois))),
                    image: d_img.unwrap_or_else(|| vec![T::zero(); self.image_shape.iter().product()]),
                });
            }
        }
        out
    }

    pub fn update_running(&mut self, cache: &EncoderCache<T>) {
        if let (Some(p), Some(c)) = (&mut self.projection, &cache.projection) {
            p.update_running(c);
        }
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        visit_opt(&self.gnn, &join(prefix, "gnn"), f);
        visit_opt(&self.cnn, &join(prefix, "cnn"), f);
        visit_opt(&self.projection, &join(prefix, "projection"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        visit_opt_mut(&mut self.gnn, &join(prefix, "gnn"), f);
        visit_opt_mut(&mut self.cnn, &join(prefix, "cnn"), f);
        visit_opt_mut(&mut self.projection, &join(prefix, "projection"), f);
    }
}

/// Bottleneck MLP `d -> hidden -> d` applied on top of `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor<T> {
    pub mlp: Mlp<T>,
}

impl<T: Scalar> Predictor<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        let d = config.repr_dim();
        let mlp = Mlp::new(
            &mut stream(seed, &[domain::INIT, 3]),
            &[d, config.predictor_hidden_dim(), d],
            config.predictor_hidden_norm,
            None,
        );
        Self { mlp }
    }

    pub fn dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn forward(&self, z: &Array2<T>, mode: Mode) -> (Array2<T>, MlpCache<T>) {
        self.mlp.forward(z, mode)
    }

    pub fn backward(&self, cache: &MlpCache<T>, dp: &Array2<T>, grad: &mut Self) -> Array2<T> {
        self.mlp.backward(cache, dp, &mut grad.mlp)
    }

    pub fn update_running(&mut self, cache: &MlpCache<T>) {
        self.mlp.update_running(cache);
    }
}

impl<T: Scalar> Module<T> for Predictor<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.mlp.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        self.mlp.visit_mut(prefix, f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum HeadKind {
    /// One logit per class.
    Classification { n_classes: usize },
    Regression,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Classification { n_classes } => n_classes,
            HeadKind::Regression => 1,
        }
    }
}

/// Downstream MLP head `g` without standardization layers.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead<T> {
    pub kind: HeadKind,
    pub mlp: Mlp<T>,
}

impl<T: Scalar> TaskHead<T> {
    pub fn new(in_dim: usize, hidden: &[usize], kind: HeadKind, seed: u64) -> Self {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(kind.outputs());
        Self {
            kind,
            mlp: Mlp::new(&mut stream(seed, &[domain::HEAD]), &dims, false, None),
        }
    }

    pub fn forward(&self, z: &Array2<T>) -> (Array2<T>, MlpCache<T>) {
        self.mlp.forward(z, Mode::Eval)
    }

    pub fn predict(&self, z: &Array2<T>) -> Array2<T> {
        self.forward(z).0
    }

    pub fn backward(&self, cache: &MlpCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        self.mlp.backward(cache, dy, &mut grad.mlp)
    }
}

impl<T: Scalar> Module<T> for TaskHead<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.mlp.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        self.mlp.visit_mut(prefix, f);
    }
}

/// Row-wise softmax.
pub fn softmax_rows<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total: T = row.iter().copied().sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Mean over rows, for readouts that need a single vector.
pub fn row_mean<T: Scalar>(x: &Array2<T>) -> Array1<T> {
    x.mean_axis(ndarray::Axis(0)).expect("non-empty")
}
