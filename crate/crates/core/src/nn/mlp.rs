//! Stacked linear layers with ReLU between them and optional batch
//! standardization on hidden and output activations.

use ndarray::Array2;

use super::layers::{relu, relu_backward, BatchStd, BatchStdCache, Linear, Mode};
use super::params::{join, visit_opt, visit_opt_mut, Module, Visitor, VisitorMut};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
    /// One entry per hidden activation.
    pub hidden_norms: Vec<Option<BatchStd<T>>>,
    pub output_norm: Option<BatchStd<T>>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    inputs: Vec<Array2<T>>,
    hidden: Vec<Array2<T>>,
    hidden_norms: Vec<Option<BatchStdCache<T>>>,
    output_norm: Option<BatchStdCache<T>>,
    batch: usize,
}

impl<T: Scalar> Mlp<T> {
    /// `dims` lists every width from input to output.
    pub fn new(rng: &mut Rng, dims: &[usize], hidden_norm: bool, output_norm: Option<bool>) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers: Vec<_> = dims.windows(2).map(|w| Linear::new(rng, w[0], w[1])).collect();
        let hidden_norms = dims[1..dims.len() - 1]
            .iter()
            .map(|&w| hidden_norm.then(|| BatchStd::new(w, true)))
            .collect();
        let out = *dims.last().unwrap();
        Self {
            layers,
            hidden_norms,
            output_norm: output_norm.map(|affine| BatchStd::new(out, affine)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&self, x: &Array2<T>, mode: Mode) -> (Array2<T>, MlpCache<T>) {
        let depth = self.layers.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut hidden = Vec::with_capacity(depth - 1);
        let mut norm_caches = Vec::with_capacity(depth - 1);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut a = layer.forward(&h);
            inputs.push(h);
            if i + 1 < depth {
                let nc = self.hidden_norms[i].as_ref().map(|bn| {
                    let (y, c) = bn.forward(&a, mode);
                    a = y;
                    c
                });
                norm_caches.push(nc);
                a = relu(&a);
                hidden.push(a.clone());
            }
            h = a;
        }
        let out_cache = self.output_norm.as_ref().map(|bn| {
            let (y, c) = bn.forward(&h, mode);
            h = y;
            c
        });
        (
            h,
            MlpCache {
                inputs,
                hidden,
                hidden_norms: norm_caches,
                output_norm: out_cache,
                batch: x.nrows(),
            },
        )
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let mut d = match (&self.output_norm, &cache.output_norm) {
            (Some(bn), Some(c)) => bn.backward(c, dy, grad.output_norm.as_mut().unwrap()),
            _ => dy.clone(),
        };
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                d = relu_backward(&cache.hidden[i], &d);
                if let (Some(bn), Some(c)) = (&self.hidden_norms[i], &cache.hidden_norms[i]) {
                    d = bn.backward(c, &d, grad.hidden_norms[i].as_mut().unwrap());
                }
            }
            d = self.layers[i].backward(&cache.inputs[i], &d, &mut grad.layers[i]);
        }
        d
    }

    /// Folds training-mode batch statistics into running estimates.
    pub fn update_running(&mut self, cache: &MlpCache<T>) {
        for (bn, c) in self.hidden_norms.iter_mut().zip(&cache.hidden_norms) {
            if let (Some(bn), Some(c)) = (bn, c) {
                bn.update_running(c, cache.batch);
            }
        }
        if let (Some(bn), Some(c)) = (&mut self.output_norm, &cache.output_norm) {
            bn.update_running(c, cache.batch);
        }
    }
}

impl<T: Scalar> Module<T> for Mlp<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("fc{i}")), f);
            if let Some(bn) = self.hidden_norms.get(i) {
                visit_opt(bn, &join(prefix, &format!("norm{i}")), f);
            }
        }
        visit_opt(&self.output_norm, &join(prefix, "out_norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("fc{i}")), f);
            if let Some(bn) = self.hidden_norms.get_mut(i) {
                visit_opt_mut(bn, &join(prefix, &format!("norm{i}")), f);
            }
        }
        visit_opt_mut(&mut self.output_norm, &join(prefix, "out_norm"), f);
    }
}
