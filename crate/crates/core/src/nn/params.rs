//! Uniform traversal over the tensors held by a model.

use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

/// Whether a tensor is trained or only tracked (running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Param,
    Buffer,
}

pub type Visitor<'a, T> = dyn FnMut(&str, TensorRole, &[usize], &[T]) + 'a;
pub type VisitorMut<'a, T> = dyn FnMut(&str, TensorRole, &[usize], &mut [T]) + 'a;

/// Anything holding named tensors. Traversal order is fixed and defines
/// the layout of flattened parameter vectors and checkpoint blobs.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>);
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Number of trainable scalars.
pub fn param_count<T: Scalar>(m: &impl Module<T>) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, role, _, data| {
        if role == TensorRole::Param {
            n += data.len();
        }
    });
    n
}

/// SHA-256 over names, shapes and values of every tensor, buffers included.
pub fn param_hash<T: Scalar>(m: &impl Module<T>) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    m.visit("", &mut |name, _, shape, data| {
        h.update(name.as_bytes());
        for s in shape {
            h.update((*s as u64).to_le_bytes());
        }
        buf.clear();
        for v in data {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    });
    hex::encode(h.finalize())
}

/// Trainable parameters concatenated in traversal order.
pub fn flatten_params<T: Scalar>(m: &impl Module<T>) -> Vec<T> {
    let mut out = Vec::new();
    m.visit("", &mut |_, role, _, data| {
        if role == TensorRole::Param {
            out.extend_from_slice(data);
        }
    });
    out
}

/// Overwrites trainable parameters from a flat vector.
pub fn assign_params<T: Scalar>(m: &mut impl Module<T>, flat: &[T]) {
    let mut offset = 0;
    m.visit_mut("", &mut |_, role, _, data| {
        if role == TensorRole::Param {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        }
    });
    assert_eq!(offset, flat.len(), "flat parameter length mismatch");
}

/// Sets every tensor (buffers included) to zero.
pub fn zero_all<T: Scalar>(m: &mut impl Module<T>) {
    m.visit_mut("", &mut |_, _, _, data| data.iter_mut().for_each(|v| *v = T::zero()));
}

/// A zeroed copy, used as a gradient accumulator.
pub fn zeros_like<T: Scalar, M: Module<T> + Clone>(m: &M) -> M {
    let mut g = m.clone();
    zero_all(&mut g);
    g
}

/// Names and shapes in traversal order.
pub fn describe<T: Scalar>(m: &impl Module<T>) -> Vec<(String, TensorRole, Vec<usize>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, role, shape, _| out.push((name.to_owned(), role, shape.to_vec())));
    out
}

/// Largest absolute value over all trainable parameters.
pub fn max_abs_param<T: Scalar>(m: &impl Module<T>) -> T {
    let mut best = T::zero();
    m.visit("", &mut |_, role, _, data| {
        if role == TensorRole::Param {
            for v in data {
                best = best.max(v.abs());
            }
        }
    });
    best
}

/// Visits an optional submodule.
pub(crate) fn visit_opt<T: Scalar, M: Module<T>>(m: &Option<M>, prefix: &str, f: &mut Visitor<'_, T>) {
    if let Some(m) = m {
        m.visit(prefix, f);
    }
}

pub(crate) fn visit_opt_mut<T: Scalar, M: Module<T>>(m: &mut Option<M>, prefix: &str, f: &mut VisitorMut<'_, T>) {
    if let Some(m) = m {
        m.visit_mut(prefix, f);
    }
}
