//! Stochastic view sampling: node-feature masking, edge dropout, joint
//! ROI-aligned graph/image masking (hard and soft) and optional standard
//! image augmentation.
//!
//! Every operator returns the draws it made so a view can be replayed
//! exactly from its source instance.

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{AtlasVolume, TaskInstance};
use crate::error::{Error, Result};
use crate::graph::{BrainGraph, MeanImage};
use crate::rng::{self, domain, Rng};
use crate::scalar::{lit, to_f64, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub p_node_mask: f64,
    pub p_edge_drop: f64,
    pub p_roi_mask: f64,
    /// Flips, rotations and intensity jitter on the image (ablation only).
    pub image_aug_enabled: bool,
    /// Mask individual feature entries instead of whole node rows.
    pub per_dimension_node_mask: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_node_mask: 0.5,
            p_edge_drop: 0.5,
            p_roi_mask: 0.1,
            image_aug_enabled: false,
            per_dimension_node_mask: false,
        }
    }
}

impl AugmentConfig {
    /// Configuration that leaves views identical to their source.
    pub fn identity() -> Self {
        Self {
            p_node_mask: 0.0,
            p_edge_drop: 0.0,
            p_roi_mask: 0.0,
            image_aug_enabled: false,
            per_dimension_node_mask: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_node_mask", self.p_node_mask),
            ("p_edge_drop", self.p_edge_drop),
            ("p_roi_mask", self.p_roi_mask),
        ] {
            check_probability(name, p)?;
        }
        Ok(())
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("{name} must be in [0, 1], got {p}")));
    }
    Ok(())
}

/// Which node-feature entries were masked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeMaskDraw {
    Nodes(Vec<usize>),
    Entries(Vec<(usize, usize)>),
}

/// Draws of the standard image augmentations; `None` means not applied.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageAugDraw {
    pub flip_axis: Option<usize>,
    pub rotate_axes: Option<(usize, usize)>,
    pub scale: Option<f64>,
    pub shift: Option<f64>,
}

impl ImageAugDraw {
    pub fn is_identity(&self) -> bool {
        self.flip_axis.is_none() && self.rotate_axes.is_none() && self.scale.is_none() && self.shift.is_none()
    }
}

/// Complete record of the draws that produced an augmented view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub node_mask: NodeMaskDraw,
    /// Indices into the source edge list.
    pub dropped_edges: Vec<usize>,
    /// Graph nodes whose ROI was occluded in both views.
    pub roi_mask: Vec<usize>,
    pub image_aug: Option<ImageAugDraw>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView<T> {
    pub graph: BrainGraph<T>,
    pub image: MeanImage<T>,
    pub provenance: Provenance,
}

impl<T: Scalar> AugmentedView<T> {
    /// Unperturbed view of an instance.
    pub fn identity(instance: &TaskInstance<T>) -> Self {
        Self {
            graph: instance.graph.clone(),
            image: instance.image.clone(),
            provenance: Provenance {
                node_mask: NodeMaskDraw::Nodes(Vec::new()),
                dropped_edges: Vec::new(),
                roi_mask: Vec::new(),
                image_aug: None,
            },
        }
    }
}

/// Stream for view `view` of instance `instance` at `epoch`.
pub fn view_stream(seed: u64, epoch: u64, instance: u64, view: u64) -> Rng {
    rng::stream(seed, &[domain::VIEW, epoch, instance, view])
}

fn zero_row<T: Scalar>(features: &mut Array2<T>, node: usize) {
    // multiply rather than assign so hard and soft masks agree bit for bit
    features.row_mut(node).mapv_inplace(|v| v * T::zero());
}

/// Zeroes each node's whole feature row with probability `p`.
pub fn mask_node_features<T: Scalar>(graph: &BrainGraph<T>, p: f64, rng: &mut Rng) -> Result<(BrainGraph<T>, Vec<usize>)> {
    check_probability("p", p)?;
    let selected: Vec<usize> = (0..graph.n()).filter(|_| rng.gen::<f64>() < p).collect();
    let mut out = graph.clone();
    for &node in &selected {
        zero_row(out.node_features_mut(), node);
    }
    Ok((out, selected))
}

/// Zeroes each individual feature entry with probability `p`.
pub fn mask_node_feature_entries<T: Scalar>(
    graph: &BrainGraph<T>,
    p: f64,
    rng: &mut Rng,
) -> Result<(BrainGraph<T>, Vec<(usize, usize)>)> {
    check_probability("p", p)?;
    let mut out = graph.clone();
    let mut selected = Vec::new();
    let cols = graph.node_features().ncols();
    for i in 0..graph.n() {
        for k in 0..cols {
            if rng.gen::<f64>() < p {
                selected.push((i, k));
                let f = out.node_features_mut();
                f[[i, k]] = f[[i, k]] * T::zero();
            }
        }
    }
    Ok((out, selected))
}

/// Removes each edge with probability `p`; returns the dropped indices.
pub fn dropout_edges<T: Scalar>(graph: &BrainGraph<T>, p: f64, rng: &mut Rng) -> Result<(BrainGraph<T>, Vec<usize>)> {
    check_probability("p", p)?;
    let dropped: Vec<usize> = (0..graph.edges().len()).filter(|_| rng.gen::<f64>() < p).collect();
    let mut out = graph.clone();
    drop_edge_indices(&mut out, &dropped);
    Ok((out, dropped))
}

fn drop_edge_indices<T: Scalar>(graph: &mut BrainGraph<T>, dropped: &[usize]) {
    let mut it = dropped.iter().peekable();
    graph.retain_edges(|k, _| {
        if it.peek() == Some(&&k) {
            it.next();
            false
        } else {
            true
        }
    });
}

fn check_alignment<T: Scalar>(graph: &BrainGraph<T>, image: &MeanImage<T>, atlas: &AtlasVolume) -> Result<()> {
    if graph.n() != atlas.n_rois() {
        return Err(Error::Shape(format!(
            "graph has {} nodes but atlas has {} ROIs",
            graph.n(),
            atlas.n_rois()
        )));
    }
    if image.shape() != atlas.shape() {
        return Err(Error::Shape(format!(
            "image shape {:?} differs from atlas shape {:?}",
            image.shape(),
            atlas.shape()
        )));
    }
    Ok(())
}

/// Occludes the given nodes in the graph and their voxels in the image.
/// Edges and background voxels are left alone.
pub fn apply_roi_mask<T: Scalar>(
    graph: &BrainGraph<T>,
    image: &MeanImage<T>,
    atlas: &AtlasVolume,
    nodes: &[usize],
) -> Result<(BrainGraph<T>, MeanImage<T>)> {
    check_alignment(graph, image, atlas)?;
    if let Some(&bad) = nodes.iter().find(|&&r| r >= graph.n()) {
        return Err(Error::InvalidArgument(format!("node {bad} out of range")));
    }
    let mut g = graph.clone();
    let mut img = image.clone();
    for &node in nodes {
        zero_row(g.node_features_mut(), node);
        let voxels = img.as_slice_mut();
        for &v in atlas.voxels_of(node) {
            voxels[v] = voxels[v] * T::zero();
        }
    }
    Ok((g, img))
}

/// Selects each ROI with probability `p` and occludes it in both views.
pub fn roi_aligned_mask<T: Scalar>(
    graph: &BrainGraph<T>,
    image: &MeanImage<T>,
    atlas: &AtlasVolume,
    p: f64,
    rng: &mut Rng,
) -> Result<(BrainGraph<T>, MeanImage<T>, Vec<usize>)> {
    check_probability("p", p)?;
    check_alignment(graph, image, atlas)?;
    let selected: Vec<usize> = (0..graph.n()).filter(|_| rng.gen::<f64>() < p).collect();
    let (g, img) = apply_roi_mask(graph, image, atlas, &selected)?;
    Ok((g, img, selected))
}

/// Scales node `r`'s feature row and ROI `r`'s voxels by `mask[r]`.
pub fn soft_roi_mask<T: Scalar>(
    graph: &BrainGraph<T>,
    image: &MeanImage<T>,
    atlas: &AtlasVolume,
    mask: &Array1<T>,
) -> Result<(BrainGraph<T>, MeanImage<T>)> {
    check_alignment(graph, image, atlas)?;
    if mask.len() != graph.n() {
        return Err(Error::Shape(format!("mask has {} entries for {} nodes", mask.len(), graph.n())));
    }
    if let Some(bad) = mask.iter().find(|m| !(**m >= T::zero() && **m <= T::one())) {
        return Err(Error::InvalidArgument(format!("mask value {bad} outside [0, 1]")));
    }
    let mut g = graph.clone();
    let mut img = image.clone();
    for (node, &m) in mask.iter().enumerate() {
        g.node_features_mut().row_mut(node).mapv_inplace(|v| v * m);
        let voxels = img.as_slice_mut();
        for &v in atlas.voxels_of(node) {
            voxels[v] = voxels[v] * m;
        }
    }
    Ok((g, img))
}

/// Gradient of a scalar with respect to the soft mask, given its gradients
/// with respect to the masked node features and masked image.
pub fn soft_roi_mask_backward<T: Scalar>(
    graph: &BrainGraph<T>,
    image: &MeanImage<T>,
    atlas: &AtlasVolume,
    d_features: &Array2<T>,
    d_image: &[T],
) -> Array1<T> {
    let features = graph.node_features();
    let voxels = image.as_slice();
    Array1::from_shape_fn(graph.n(), |node| {
        let from_graph: T = features
            .row(node)
            .iter()
            .zip(d_features.row(node).iter())
            .map(|(x, d)| *x * *d)
            .sum();
        let from_image: T = atlas.voxels_of(node).iter().map(|&v| voxels[v] * d_image[v]).sum();
        from_graph + from_image
    })
}

fn flip_axis<T: Scalar>(image: &MeanImage<T>, axis: usize) -> MeanImage<T> {
    let mut v = image.data().view();
    v.invert_axis(Axis(axis));
    MeanImage::new(v.to_owned())
}

fn rotate90<T: Scalar>(image: &MeanImage<T>, a: usize, b: usize) -> MeanImage<T> {
    let mut v = image.data().view();
    v.invert_axis(Axis(b));
    v.swap_axes(a, b);
    MeanImage::new(v.to_owned())
}

fn std_of<T: Scalar>(image: &MeanImage<T>) -> f64 {
    let n = image.as_slice().len() as f64;
    let mean = image.as_slice().iter().map(|v| to_f64(*v)).sum::<f64>() / n;
    (image.as_slice().iter().map(|v| (to_f64(*v) - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Applies each standard augmentation with probability 1/2: flip along a
/// random axis, 90-degree rotation in a random plane with equal extents,
/// intensity scale in [0.9, 1.1] and shift in [-0.1, 0.1] image stds.
pub fn image_augment<T: Scalar>(image: &MeanImage<T>, rng: &mut Rng) -> (MeanImage<T>, ImageAugDraw) {
    let mut draw = ImageAugDraw::default();
    if rng.gen_bool(0.5) {
        draw.flip_axis = Some(rng.gen_range(0..3));
    }
    if rng.gen_bool(0.5) {
        let shape = image.shape();
        let planes: Vec<(usize, usize)> = [(0, 1), (0, 2), (1, 2)]
            .into_iter()
            .filter(|&(a, b)| shape[a] == shape[b])
            .collect();
        let pick = rng.gen_range(0..3usize);
        if !planes.is_empty() {
            draw.rotate_axes = Some(planes[pick % planes.len()]);
        }
    }
    if rng.gen_bool(0.5) {
        draw.scale = Some(rng.gen_range(0.9..=1.1));
    }
    if rng.gen_bool(0.5) {
        draw.shift = Some(rng.gen_range(-0.1..=0.1) * std_of(image));
    }
    (replay_image_augment(image, &draw), draw)
}

/// Re-applies recorded image augmentation draws.
pub fn replay_image_augment<T: Scalar>(image: &MeanImage<T>, draw: &ImageAugDraw) -> MeanImage<T> {
    let mut out = image.clone();
    if let Some(axis) = draw.flip_axis {
        out = flip_axis(&out, axis);
    }
    if let Some((a, b)) = draw.rotate_axes {
        out = rotate90(&out, a, b);
    }
    if let Some(s) = draw.scale {
        let s = lit::<T>(s);
        out.as_slice_mut().iter_mut().for_each(|v| *v = *v * s);
    }
    if let Some(b) = draw.shift {
        let b = lit::<T>(b);
        out.as_slice_mut().iter_mut().for_each(|v| *v = *v + b);
    }
    out
}

/// Samples one augmented view; the operators draw from `rng` in a fixed
/// order (node mask, edge dropout, ROI mask, image augmentation).
pub fn augment_view<T: Scalar>(
    instance: &TaskInstance<T>,
    atlas: &AtlasVolume,
    config: &AugmentConfig,
    rng: &mut Rng,
) -> Result<AugmentedView<T>> {
    config.validate()?;
    let (graph, node_mask) = if config.per_dimension_node_mask {
        let (g, e) = mask_node_feature_entries(&instance.graph, config.p_node_mask, rng)?;
        (g, NodeMaskDraw::Entries(e))
    } else {
        let (g, n) = mask_node_features(&instance.graph, config.p_node_mask, rng)?;
        (g, NodeMaskDraw::Nodes(n))
    };
    let (graph, dropped_edges) = dropout_edges(&graph, config.p_edge_drop, rng)?;
    let (graph, image, roi_mask) = roi_aligned_mask(&graph, &instance.image, atlas, config.p_roi_mask, rng)?;
    let (image, image_aug) = if config.image_aug_enabled {
        let (img, draw) = image_augment(&image, rng);
        (img, Some(draw))
    } else {
        (image, None)
    };
    Ok(AugmentedView {
        graph,
        image,
        provenance: Provenance {
            node_mask,
            dropped_edges,
            roi_mask,
            image_aug,
        },
    })
}

/// Rebuilds a view from its source instance and provenance.
pub fn replay_view<T: Scalar>(
    instance: &TaskInstance<T>,
    atlas: &AtlasVolume,
    provenance: &Provenance,
) -> Result<AugmentedView<T>> {
    let mut graph = instance.graph.clone();
    match &provenance.node_mask {
        NodeMaskDraw::Nodes(nodes) => {
            for &node in nodes {
                if node >= graph.n() {
                    return Err(Error::InvalidArgument(format!("node {node} out of range")));
                }
                zero_row(graph.node_features_mut(), node);
            }
        }
        NodeMaskDraw::Entries(entries) => {
            let f = graph.node_features_mut();
            for &(i, k) in entries {
                f[[i, k]] = f[[i, k]] * T::zero();
            }
        }
    }
    drop_edge_indices(&mut graph, &provenance.dropped_edges);
    let (graph, image) = apply_roi_mask(&graph, &instance.image, atlas, &provenance.roi_mask)?;
    let image = match &provenance.image_aug {
        Some(draw) => replay_image_augment(&image, draw),
        None => image,
    };
    Ok(AugmentedView {
        graph,
        image,
        provenance: provenance.clone(),
    })
}
