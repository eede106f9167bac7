//! Single-head graph attention with an additive edge-weight term.
//!
//! For node `i` over `j` in its neighbourhood plus itself (self-loop
//! weight 1):
//!
//! ```text
//! logit_ij = leaky_relu(a_src . W h_i + a_dst . W h_j) + b_edge * w_ij
//! alpha_ij = softmax_j(logit_ij)
//! out_i    = elu(sum_j alpha_ij W h_j)
//! ```

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;

use super::layers::{elu, elu_grad_from_output, fan_in_uniform, leaky_relu, leaky_relu_grad};
use super::params::{join, Module, TensorRole, Visitor, VisitorMut};
use crate::error::{Error, Result};
use crate::graph::Edge;
use crate::rng::Rng;
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer<T> {
    /// `(in, out)`.
    pub weight: Array2<T>,
    pub att_src: Array1<T>,
    pub att_dst: Array1<T>,
    /// Coefficient on the edge weight inside the attention logit (length 1).
    pub edge_coef: Array1<T>,
}

/// Neighbourhood lists (self first) with edge weights.
#[derive(Debug, Clone)]
pub struct Neighbourhoods<T> {
    pub lists: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> Neighbourhoods<T> {
    pub fn build(n: usize, edges: &[Edge<T>]) -> Result<Self> {
        let mut lists: Vec<Vec<(usize, T)>> = (0..n).map(|i| vec![(i, T::one())]).collect();
        for e in edges {
            if e.i >= n || e.j >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge ({}, {}) out of range for {n} nodes",
                    e.i, e.j
                )));
            }
            lists[e.i].push((e.j, e.w));
            lists[e.j].push((e.i, e.w));
        }
        Ok(Self { lists })
    }
}

#[derive(Debug, Clone)]
pub struct GatCache<T> {
    input: Array2<T>,
    wh: Array2<T>,
    /// Pre-activation `a_src . Wh_i + a_dst . Wh_j`, per neighbourhood entry.
    pre: Vec<Vec<T>>,
    alpha: Vec<Vec<T>>,
    output: Array2<T>,
}

impl<T: Scalar> GatLayer<T> {
    pub fn new(rng: &mut Rng, fan_in: usize, width: usize) -> Self {
        let att_bound = 1.0 / (width as f64).sqrt();
        Self {
            weight: fan_in_uniform(rng, fan_in, (fan_in, width)),
            att_src: Array1::from_shape_fn(width, |_| lit(rng.gen_range(-att_bound..=att_bound))),
            att_dst: Array1::from_shape_fn(width, |_| lit(rng.gen_range(-att_bound..=att_bound))),
            edge_coef: Array1::from_elem(1, T::one()),
        }
    }

    pub fn width(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, h: &Array2<T>, nbrs: &Neighbourhoods<T>) -> (Array2<T>, GatCache<T>) {
        let n = h.nrows();
        let wh = h.dot(&self.weight);
        let s = wh.dot(&self.att_src);
        let t = wh.dot(&self.att_dst);
        let b = self.edge_coef[0];
        let mut out = Array2::<T>::zeros((n, self.width()));
        let mut pre = Vec::with_capacity(n);
        let mut alpha = Vec::with_capacity(n);
        for i in 0..n {
            let list = &nbrs.lists[i];
            let u: Vec<T> = list.iter().map(|&(j, _)| s[i] + t[j]).collect();
            let logits: Vec<T> = u
                .iter()
                .zip(list)
                .map(|(&u, &(_, w))| leaky_relu(u) + b * w)
                .collect();
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
            let total: T = exps.iter().copied().sum();
            let a: Vec<T> = exps.into_iter().map(|e| e / total).collect();
            let mut row = out.row_mut(i);
            for (&(j, _), &aij) in list.iter().zip(&a) {
                row.scaled_add(aij, &wh.row(j));
            }
            row.mapv_inplace(elu);
            pre.push(u);
            alpha.push(a);
        }
        let cache = GatCache {
            input: h.clone(),
            wh,
            pre,
            alpha,
            output: out.clone(),
        };
        (out, cache)
    }

    /// Accumulates parameter gradients and returns `dL/dh`.
    pub fn backward(
        &self,
        cache: &GatCache<T>,
        nbrs: &Neighbourhoods<T>,
        d_out: &Array2<T>,
        grad: &mut Self,
    ) -> Array2<T> {
        let n = d_out.nrows();
        let wh = &cache.wh;
        let d_agg = {
            let mut d = d_out.clone();
            d.zip_mut_with(&cache.output, |g, &y| *g = *g * elu_grad_from_output(y));
            d
        };
        let mut d_wh = Array2::<T>::zeros(wh.raw_dim());
        let mut d_s = Array1::<T>::zeros(n);
        let mut d_t = Array1::<T>::zeros(n);
        let mut d_b = T::zero();
        for i in 0..n {
            let list = &nbrs.lists[i];
            let a = &cache.alpha[i];
            let g = d_agg.row(i);
            let d_alpha: Vec<T> = list.iter().map(|&(j, _)| g.dot(&wh.row(j))).collect();
            let mix: T = a.iter().zip(&d_alpha).map(|(&x, &y)| x * y).sum();
            for (k, &(j, w)) in list.iter().enumerate() {
                d_wh.row_mut(j).scaled_add(a[k], &g);
                let d_logit = a[k] * (d_alpha[k] - mix);
                d_b = d_b + d_logit * w;
                let d_pre = d_logit * leaky_relu_grad(cache.pre[i][k]);
                d_s[i] = d_s[i] + d_pre;
                d_t[j] = d_t[j] + d_pre;
            }
        }
        grad.att_src += &wh.t().dot(&d_s);
        grad.att_dst += &wh.t().dot(&d_t);
        grad.edge_coef[0] = grad.edge_coef[0] + d_b;
        // s = Wh a_src, t = Wh a_dst
        d_wh += &(d_s.view().insert_axis(Axis(1)).dot(&self.att_src.view().insert_axis(Axis(0))));
        d_wh += &(d_t.view().insert_axis(Axis(1)).dot(&self.att_dst.view().insert_axis(Axis(0))));
        grad.weight += &cache.input.t().dot(&d_wh);
        d_wh.dot(&self.weight.t())
    }
}

impl<T: Scalar> Module<T> for GatLayer<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&join(prefix, "weight"), TensorRole::Param, self.weight.shape(), self.weight.as_slice().unwrap());
        f(&join(prefix, "att_src"), TensorRole::Param, self.att_src.shape(), self.att_src.as_slice().unwrap());
        f(&join(prefix, "att_dst"), TensorRole::Param, self.att_dst.shape(), self.att_dst.as_slice().unwrap());
        f(&join(prefix, "edge_coef"), TensorRole::Param, self.edge_coef.shape(), self.edge_coef.as_slice().unwrap());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        let s = self.weight.shape().to_vec();
        f(&join(prefix, "weight"), TensorRole::Param, &s, self.weight.as_slice_mut().unwrap());
        let s = self.att_src.shape().to_vec();
        f(&join(prefix, "att_src"), TensorRole::Param, &s, self.att_src.as_slice_mut().unwrap());
        f(&join(prefix, "att_dst"), TensorRole::Param, &s, self.att_dst.as_slice_mut().unwrap());
        f(&join(prefix, "edge_coef"), TensorRole::Param, &[1], self.edge_coef.as_slice_mut().unwrap());
    }
}

/// Two GAT layers, each followed by global mean and max pooling; the
/// readouts of both layers are concatenated (`4 * width` values).
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEncoder<T> {
    pub layers: Vec<GatLayer<T>>,
}

#[derive(Debug, Clone)]
pub struct GraphEncoderCache<T> {
    nbrs: Neighbourhoods<T>,
    layers: Vec<GatCache<T>>,
    /// Argmax node per channel for each layer's max readout.
    argmax: Vec<Vec<usize>>,
    n: usize,
}

impl<T: Scalar> GraphEncoder<T> {
    pub fn new(rng: &mut Rng, in_dim: usize, width: usize) -> Self {
        Self {
            layers: vec![GatLayer::new(rng, in_dim, width), GatLayer::new(rng, width, width)],
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.iter().map(|l| 2 * l.width()).sum()
    }

    pub fn forward(&self, features: &Array2<T>, edges: &[Edge<T>]) -> Result<(Array1<T>, GraphEncoderCache<T>)> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::InvalidArgument("graph has no nodes".into()));
        }
        let expected = self.layers[0].weight.nrows();
        if features.ncols() != expected {
            return Err(Error::Shape(format!(
                "node features have {} columns, encoder expects {expected}",
                features.ncols()
            )));
        }
        let nbrs = Neighbourhoods::build(n, edges)?;
        let mut h = features.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut argmax = Vec::with_capacity(self.layers.len());
        let mut readout = Vec::with_capacity(self.embedding_dim());
        let nf = T::from_usize(n).unwrap();
        for layer in &self.layers {
            let (out, cache) = layer.forward(&h, &nbrs);
            let mean = out.sum_axis(Axis(0)) / nf;
            let mut am = Vec::with_capacity(out.ncols());
            let mut mx = Vec::with_capacity(out.ncols());
            for col in out.axis_iter(Axis(1)) {
                let (best, val) = col
                    .iter()
                    .enumerate()
                    .fold((0, col[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
                am.push(best);
                mx.push(val);
            }
            readout.extend(mean.iter().copied());
            readout.extend(mx);
            argmax.push(am);
            caches.push(cache);
            h = out;
        }
        Ok((
            Array1::from_vec(readout),
            GraphEncoderCache {
                nbrs,
                layers: caches,
                argmax,
                n,
            },
        ))
    }

    /// Returns the gradient with respect to the input node features.
    pub fn backward(&self, cache: &GraphEncoderCache<T>, d_embed: &[T], grad: &mut Self) -> Array2<T> {
        let nf = T::from_usize(cache.n).unwrap();
        let mut offset = self.embedding_dim();
        let mut d_next: Option<Array2<T>> = None;
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let w = layer.width();
            offset -= 2 * w;
            let d_mean = &d_embed[offset..offset + w];
            let d_max = &d_embed[offset + w..offset + 2 * w];
            let mut d_out = d_next.take().unwrap_or_else(|| Array2::zeros((cache.n, w)));
            for c in 0..w {
                let share = d_mean[c] / nf;
                d_out.column_mut(c).mapv_inplace(|v| v + share);
                let node = cache.argmax[li][c];
                d_out[[node, c]] = d_out[[node, c]] + d_max[c];
            }
            d_next = Some(layer.backward(&cache.layers[li], &cache.nbrs, &d_out, &mut grad.layers[li]));
        }
        d_next.expect("at least one layer")
    }
}

impl<T: Scalar> Module<T> for GraphEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("gat{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("gat{i}")), f);
        }
    }
}
