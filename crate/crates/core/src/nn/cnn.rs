//! 3D convolutional image branch: four blocks of
//! `conv3d(k=3, stride 1, zero pad 1) -> ReLU -> max-pool(2)` followed by a
//! global average pool.

use ndarray::{Array1, Array2, Axis};

use super::layers::fan_in_uniform;
use super::params::{join, Module, TensorRole, Visitor, VisitorMut};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

pub const KERNEL_VOLUME: usize = 27;
pub const DEFAULT_CHANNELS: [usize; 4] = [8, 16, 32, 64];
pub const MIN_SPATIAL: usize = 16;

/// Gathers 3x3x3 zero-padded neighbourhoods into columns:
/// `input` is `(C, X*Y*Z)`, output is `(C*27, X*Y*Z)`.
pub fn im2col<T: Scalar>(input: &Array2<T>, shape: [usize; 3]) -> Array2<T> {
    let [sx, sy, sz] = shape;
    let vox = sx * sy * sz;
    let channels = input.nrows();
    let src = input.as_standard_layout();
    let src = src.as_slice().unwrap();
    let mut cols = Array2::<T>::zeros((channels * KERNEL_VOLUME, vox));
    let dst = cols.as_slice_mut().unwrap();
    for c in 0..channels {
        let plane = &src[c * vox..(c + 1) * vox];
        for k in 0..KERNEL_VOLUME {
            let (dx, dy, dz) = ((k / 9) as isize - 1, ((k / 3) % 3) as isize - 1, (k % 3) as isize - 1);
            let row = &mut dst[(c * KERNEL_VOLUME + k) * vox..(c * KERNEL_VOLUME + k + 1) * vox];
            for x in 0..sx {
                let ix = x as isize + dx;
                if ix < 0 || ix >= sx as isize {
                    continue;
                }
                for y in 0..sy {
                    let iy = y as isize + dy;
                    if iy < 0 || iy >= sy as isize {
                        continue;
                    }
                    let out_base = (x * sy + y) * sz;
                    let in_base = (ix as usize * sy + iy as usize) * sz;
                    let z_lo = (-dz).max(0) as usize;
                    let z_hi = (sz as isize - dz.max(0)) as usize;
                    for z in z_lo..z_hi {
                        row[out_base + z] = plane[(in_base as isize + z as isize + dz) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im<T: Scalar>(cols: &Array2<T>, channels: usize, shape: [usize; 3]) -> Array2<T> {
    let [sx, sy, sz] = shape;
    let vox = sx * sy * sz;
    let src = cols.as_slice().expect("standard layout");
    let mut out = Array2::<T>::zeros((channels, vox));
    let dst = out.as_slice_mut().unwrap();
    for c in 0..channels {
        let plane = &mut dst[c * vox..(c + 1) * vox];
        for k in 0..KERNEL_VOLUME {
            let (dx, dy, dz) = ((k / 9) as isize - 1, ((k / 3) % 3) as isize - 1, (k % 3) as isize - 1);
            let row = &src[(c * KERNEL_VOLUME + k) * vox..(c * KERNEL_VOLUME + k + 1) * vox];
            for x in 0..sx {
                let ix = x as isize + dx;
                if ix < 0 || ix >= sx as isize {
                    continue;
                }
                for y in 0..sy {
                    let iy = y as isize + dy;
                    if iy < 0 || iy >= sy as isize {
                        continue;
                    }
                    let out_base = (x * sy + y) * sz;
                    let in_base = (ix as usize * sy + iy as usize) * sz;
                    let z_lo = (-dz).max(0) as usize;
                    let z_hi = (sz as isize - dz.max(0)) as usize;
                    for z in z_lo..z_hi {
                        let p = (in_base as isize + z as isize + dz) as usize;
                        plane[p] = plane[p] + row[out_base + z];
                    }
                }
            }
        }
    }
    out
}

/// `weight` is `(C_out, C_in * 27)`; kernel offsets are ordered
/// `(dx, dy, dz)` row-major over `{-1, 0, 1}^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Conv3d<T> {
    pub fn new(rng: &mut Rng, c_in: usize, c_out: usize) -> Self {
        Self {
            weight: fan_in_uniform(rng, c_in * KERNEL_VOLUME, (c_out, c_in * KERNEL_VOLUME)),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / KERNEL_VOLUME
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    /// Pre-activation convolution output and the column matrix.
    pub fn forward(&self, input: &Array2<T>, shape: [usize; 3]) -> (Array2<T>, Array2<T>) {
        let cols = im2col(input, shape);
        let out = self.weight.dot(&cols) + &self.bias.view().insert_axis(Axis(1));
        (out, cols)
    }
}

impl<T: Scalar> Module<T> for Conv3d<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&join(prefix, "weight"), TensorRole::Param, self.weight.shape(), self.weight.as_slice().unwrap());
        f(&join(prefix, "bias"), TensorRole::Param, self.bias.shape(), self.bias.as_slice().unwrap());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        let s = self.weight.shape().to_vec();
        f(&join(prefix, "weight"), TensorRole::Param, &s, self.weight.as_slice_mut().unwrap());
        let s = self.bias.shape().to_vec();
        f(&join(prefix, "bias"), TensorRole::Param, &s, self.bias.as_slice_mut().unwrap());
    }
}

fn pooled_shape(shape: [usize; 3]) -> [usize; 3] {
    [shape[0] / 2, shape[1] / 2, shape[2] / 2]
}

/// 2x2x2 max pooling (floor). Returns the output and, per output element,
/// the flat input index that won.
fn max_pool2<T: Scalar>(input: &Array2<T>, shape: [usize; 3]) -> (Array2<T>, Vec<usize>) {
    let [sx, sy, sz] = shape;
    let [ox, oy, oz] = pooled_shape(shape);
    let channels = input.nrows();
    let ovox = ox * oy * oz;
    let mut out = Array2::<T>::zeros((channels, ovox));
    let mut arg = vec![0usize; channels * ovox];
    let src = input.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().unwrap();
    let vox = sx * sy * sz;
    for c in 0..channels {
        let plane = &src[c * vox..(c + 1) * vox];
        for x in 0..ox {
            for y in 0..oy {
                for z in 0..oz {
                    let mut best = usize::MAX;
                    let mut best_v = T::neg_infinity();
                    for k in 0..8 {
                        let (a, b, d) = (2 * x + (k >> 2), 2 * y + ((k >> 1) & 1), 2 * z + (k & 1));
                        let p = (a * sy + b) * sz + d;
                        if best == usize::MAX || plane[p] > best_v {
                            best = p;
                            best_v = plane[p];
                        }
                    }
                    let o = (x * oy + y) * oz + z;
                    dst[c * ovox + o] = best_v;
                    arg[c * ovox + o] = best;
                }
            }
        }
    }
    (out, arg)
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    shape: [usize; 3],
    cols: Array2<T>,
    /// ReLU output before pooling, kept to mask the gradient.
    activated: Array2<T>,
    argmax: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CnnCache<T> {
    blocks: Vec<BlockCache<T>>,
    final_voxels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnEncoder<T> {
    pub convs: Vec<Conv3d<T>>,
    pub input_shape: [usize; 3],
}

impl<T: Scalar> CnnEncoder<T> {
    pub fn new(rng: &mut Rng, input_shape: [usize; 3], channels: &[usize]) -> Result<Self> {
        let depth = channels.len();
        let min = 1usize << depth;
        if input_shape.iter().any(|&s| s < min.max(MIN_SPATIAL)) {
            return Err(Error::Config(format!(
                "image shape {input_shape:?} too small for {depth} pooling stages (need >= {} per axis)",
                min.max(MIN_SPATIAL)
            )));
        }
        let mut c_in = 1;
        let convs = channels
            .iter()
            .map(|&c| {
                let conv = Conv3d::new(rng, c_in, c);
                c_in = c;
                conv
            })
            .collect();
        Ok(Self { convs, input_shape })
    }

    pub fn embedding_dim(&self) -> usize {
        self.convs.last().map(Conv3d::out_channels).unwrap_or(1)
    }

    pub fn forward(&self, image: &[T]) -> (Array1<T>, CnnCache<T>) {
        let mut shape = self.input_shape;
        let mut x = Array2::from_shape_vec((1, image.len()), image.to_vec()).expect("image length");
        let mut blocks = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (mut pre, cols) = conv.forward(&x, shape);
            pre.mapv_inplace(|v| v.max(T::zero()));
            let (pooled, argmax) = max_pool2(&pre, shape);
            blocks.push(BlockCache {
                shape,
                cols,
                activated: pre,
                argmax,
            });
            shape = pooled_shape(shape);
            x = pooled;
        }
        let final_voxels = x.ncols();
        let embed = x.sum_axis(Axis(1)) / T::from_usize(final_voxels).unwrap();
        (embed, CnnCache { blocks, final_voxels })
    }

    /// Accumulates parameter gradients; returns the image gradient when
    /// `need_input` is set.
    pub fn backward(&self, cache: &CnnCache<T>, d_embed: &[T], grad: &mut Self, need_input: bool) -> Option<Vec<T>> {
        let channels = self.embedding_dim();
        let share = T::one() / T::from_usize(cache.final_voxels).unwrap();
        let mut d = Array2::from_shape_fn((channels, cache.final_voxels), |(c, _)| d_embed[c] * share);
        for (li, conv) in self.convs.iter().enumerate().rev() {
            let block = &cache.blocks[li];
            let vox = block.shape.iter().product::<usize>();
            let c_out = conv.out_channels();
            let mut d_pre = Array2::<T>::zeros((c_out, vox));
            {
                let dst = d_pre.as_slice_mut().unwrap();
                let act = block.activated.as_slice().unwrap();
                let src = d.as_slice().unwrap();
                let ovox = src.len() / c_out;
                for c in 0..c_out {
                    for o in 0..ovox {
                        let p = block.argmax[c * ovox + o];
                        if act[c * vox + p] > T::zero() {
                            dst[c * vox + p] = dst[c * vox + p] + src[c * ovox + o];
                        }
                    }
                }
            }
            let g = &mut grad.convs[li];
            g.weight += &d_pre.dot(&block.cols.t());
            g.bias += &d_pre.sum_axis(Axis(1));
            if li == 0 && !need_input {
                return None;
            }
            let d_cols = conv.weight.t().dot(&d_pre);
            d = col2im(&d_cols, conv.in_channels(), block.shape);
        }
        Some(d.into_raw_vec_and_offset().0)
    }
}

impl<T: Scalar> Module<T> for CnnEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
    }
}
