use ndarray::{s, Array2, Axis};

use super::{AtlasVolume, RoiTimeSeries, VoxelSeries};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cuts a run into explicitly bounded blocks (`start` inclusive, `end` exclusive).
pub fn split_into_blocks<T: Scalar>(
    series: &VoxelSeries<T>,
    boundaries: &[(usize, usize)],
) -> Result<Vec<VoxelSeries<T>>> {
    let frames = series.frames();
    let mut prev_end = 0usize;
    for (k, &(start, end)) in boundaries.iter().enumerate() {
        if end > frames || start >= frames {
            return Err(Error::InvalidArgument(format!(
                "block {k} ({start}, {end}) exceeds series length {frames}"
            )));
        }
        if end < start + 2 {
            return Err(Error::InvalidArgument(format!(
                "block {k} ({start}, {end}) is shorter than 2 frames"
            )));
        }
        if k > 0 && start < prev_end {
            return Err(Error::InvalidArgument(format!(
                "block {k} ({start}, {end}) overlaps or precedes the previous block"
            )));
        }
        prev_end = end;
    }
    boundaries
        .iter()
        .map(|&(start, end)| {
            VoxelSeries::new(series.data().slice(s![start..end, .., .., ..]).to_owned())
        })
        .collect()
}

/// Spatial mean of each ROI's voxels at every frame.
pub fn extract_roi_series<T: Scalar>(
    series: &VoxelSeries<T>,
    atlas: &AtlasVolume,
) -> Result<RoiTimeSeries<T>> {
    if series.spatial_shape() != atlas.shape() {
        return Err(Error::Shape(format!(
            "series spatial shape {:?} differs from atlas shape {:?}",
            series.spatial_shape(),
            atlas.shape()
        )));
    }
    let frames = series.frames();
    let n = atlas.n_rois();
    let mut out = Array2::<T>::zeros((frames, n));
    let data = series.data().as_standard_layout();
    for (t, frame) in data.axis_iter(Axis(0)).enumerate() {
        let flat = frame.as_slice().expect("standard layout");
        for node in 0..n {
            let voxels = atlas.voxels_of(node);
            let sum: T = voxels.iter().map(|&v| flat[v]).sum();
            out[[t, node]] = sum / T::from_usize(voxels.len()).unwrap();
        }
    }
    RoiTimeSeries::new(out)
}
