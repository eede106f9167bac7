//! Dense building blocks with explicit backward passes.

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;

use super::params::{join, Module, TensorRole, Visitor, VisitorMut};
use crate::rng::Rng;
use crate::scalar::{lit, Scalar};

/// Training mode uses batch statistics in standardization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn fan_in_uniform<T: Scalar>(rng: &mut Rng, fan_in: usize, shape: (usize, usize)) -> Array2<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn(shape, |_| lit(rng.gen_range(-bound..=bound)))
}

/// Affine map `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: fan_in_uniform(rng, fan_in, (fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&join(prefix, "weight"), TensorRole::Param, self.weight.shape(), self.weight.as_slice().unwrap());
        f(&join(prefix, "bias"), TensorRole::Param, self.bias.shape(), self.bias.as_slice().unwrap());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        let shape = self.weight.shape().to_vec();
        f(&join(prefix, "weight"), TensorRole::Param, &shape, self.weight.as_slice_mut().unwrap());
        let shape = self.bias.shape().to_vec();
        f(&join(prefix, "bias"), TensorRole::Param, &shape, self.bias.as_slice_mut().unwrap());
    }
}

/// Per-feature batch standardization with running statistics for eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStd<T> {
    /// Learnable scale and shift; absent for the final projection layer.
    pub affine: Option<(Array1<T>, Array1<T>)>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: f64,
    pub eps: f64,
}

/// Values saved by [`BatchStd::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchStdCache<T> {
    mode: Mode,
    xhat: Array2<T>,
    inv_std: Array1<T>,
    batch_mean: Array1<T>,
    batch_var: Array1<T>,
}

impl<T: Scalar> BatchStd<T> {
    pub fn new(dim: usize, affine: bool) -> Self {
        Self {
            affine: affine.then(|| (Array1::ones(dim), Array1::zeros(dim))),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array2<T>, mode: Mode) -> (Array2<T>, BatchStdCache<T>) {
        let eps = lit::<T>(self.eps);
        let b = T::from_usize(x.nrows()).unwrap();
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = x.sum_axis(Axis(0)) / b;
                let centered = x - &mean;
                let var = (&centered * &centered).sum_axis(Axis(0)) / b;
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let xhat = (x - &mean) * &inv_std;
        let y = match &self.affine {
            Some((gamma, beta)) => &xhat * gamma + beta,
            None => xhat.clone(),
        };
        (
            y,
            BatchStdCache {
                mode,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
        )
    }

    pub fn backward(&self, cache: &BatchStdCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let dxhat = match (&self.affine, &mut grad.affine) {
            (Some((gamma, _)), Some((dgamma, dbeta))) => {
                *dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
                *dbeta += &dy.sum_axis(Axis(0));
                dy * gamma
            }
            _ => dy.clone(),
        };
        match cache.mode {
            Mode::Eval => dxhat * &cache.inv_std,
            Mode::Train => {
                let b = T::from_usize(dy.nrows()).unwrap();
                let sum_d = dxhat.sum_axis(Axis(0));
                let sum_dx = (&dxhat * &cache.xhat).sum_axis(Axis(0));
                let scaled = &dxhat * b - &sum_d - &(&cache.xhat * &sum_dx);
                scaled * &(&cache.inv_std / b)
            }
        }
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running estimates.
    pub fn update_running(&mut self, cache: &BatchStdCache<T>, batch: usize) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = lit::<T>(self.momentum);
        let keep = T::one() - m;
        let unbias = if batch > 1 {
            T::from_usize(batch).unwrap() / T::from_usize(batch - 1).unwrap()
        } else {
            T::one()
        };
        self.running_mean = &self.running_mean * keep + &(&cache.batch_mean * m);
        self.running_var = &self.running_var * keep + &(&cache.batch_var * (m * unbias));
    }
}

impl<T: Scalar> Module<T> for BatchStd<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        if let Some((g, b)) = &self.affine {
            f(&join(prefix, "gamma"), TensorRole::Param, g.shape(), g.as_slice().unwrap());
            f(&join(prefix, "beta"), TensorRole::Param, b.shape(), b.as_slice().unwrap());
        }
        f(&join(prefix, "running_mean"), TensorRole::Buffer, self.running_mean.shape(), self.running_mean.as_slice().unwrap());
        f(&join(prefix, "running_var"), TensorRole::Buffer, self.running_var.shape(), self.running_var.as_slice().unwrap());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        if let Some((g, b)) = &mut self.affine {
            let shape = g.shape().to_vec();
            f(&join(prefix, "gamma"), TensorRole::Param, &shape, g.as_slice_mut().unwrap());
            f(&join(prefix, "beta"), TensorRole::Param, &shape, b.as_slice_mut().unwrap());
        }
        let shape = self.running_mean.shape().to_vec();
        f(&join(prefix, "running_mean"), TensorRole::Buffer, &shape, self.running_mean.as_slice_mut().unwrap());
        f(&join(prefix, "running_var"), TensorRole::Buffer, &shape, self.running_var.as_slice_mut().unwrap());
    }
}

pub fn relu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| v.max(T::zero()))
}

/// Backward of ReLU given its output.
pub fn relu_backward<T: Scalar>(y: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

#[inline]
pub fn elu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v.exp_m1()
    }
}

/// Derivative of ELU expressed through its output.
#[inline]
pub fn elu_grad_from_output<T: Scalar>(y: T) -> T {
    if y > T::zero() {
        T::one()
    } else {
        y + T::one()
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

#[inline]
pub fn leaky_relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * lit(LEAKY_SLOPE)
    }
}

#[inline]
pub fn leaky_relu_grad<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else {
        lit(LEAKY_SLOPE)
    }
}
