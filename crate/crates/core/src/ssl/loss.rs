//! Symmetric negative-cosine objective.

use ndarray::{Array1, Array2, ArrayView1, Zip};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Norm floor used during training.
pub const NORM_EPS: f64 = 1e-12;

fn norm<T: Scalar>(v: ArrayView1<'_, T>) -> T {
    v.dot(&v).sqrt()
}

/// Cosine similarity with norms floored at [`NORM_EPS`].
pub fn cosine<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> T {
    let eps = lit::<T>(NORM_EPS);
    a.dot(&b) / (norm(a).max(eps) * norm(b).max(eps))
}

/// Cosine similarity that refuses zero vectors.
pub fn cosine_strict<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Result<T> {
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Numerical("cosine similarity of a zero vector".into()));
    }
    Ok(a.dot(&b) / (na * nb))
}

/// `-1/2 cos(p1, z2) - 1/2 cos(p2, z1)`.
pub fn symmetric_cosine_loss<T: Scalar>(p1: &Array1<T>, z2: &Array1<T>, p2: &Array1<T>, z1: &Array1<T>) -> T {
    let half = lit::<T>(0.5);
    -half * cosine(p1.view(), z2.view()) - half * cosine(p2.view(), z1.view())
}

/// As [`symmetric_cosine_loss`], erroring on zero vectors.
pub fn symmetric_cosine_loss_strict<T: Scalar>(
    p1: &Array1<T>,
    z2: &Array1<T>,
    p2: &Array1<T>,
    z1: &Array1<T>,
) -> Result<T> {
    let half = lit::<T>(0.5);
    Ok(-half * cosine_strict(p1.view(), z2.view())? - half * cosine_strict(p2.view(), z1.view())?)
}

/// Predictor outputs and encoder outputs of one view.
#[derive(Debug, Clone, Copy)]
pub struct Embedded<'a, T> {
    pub p: &'a Array1<T>,
    pub z: &'a Array1<T>,
}

/// `L(x1, x2) + L(x1, x2*)`; the second term is dropped when `cross` is
/// `None`.
pub fn total_loss<T: Scalar>(x1: Embedded<'_, T>, x2: Embedded<'_, T>, cross: Option<Embedded<'_, T>>) -> T {
    let base = symmetric_cosine_loss(x1.p, x2.z, x2.p, x1.z);
    match cross {
        Some(c) => base + symmetric_cosine_loss(x1.p, c.z, c.p, x1.z),
        None => base,
    }
}

/// Adds `scale * cos(a_r, b_r)` over rows into the running total and its
/// gradients. `db` is only filled when requested, which is how stop-gradient
/// is realised: targets that are constants never receive a gradient.
pub(crate) fn accumulate_cosine_rows<T: Scalar>(
    a: &Array2<T>,
    b: &Array2<T>,
    scale: T,
    da: &mut Array2<T>,
    db: Option<&mut Array2<T>>,
) -> T {
    let eps = lit::<T>(NORM_EPS);
    let mut total = T::zero();
    let mut db = db;
    for r in 0..a.nrows() {
        let (ar, br) = (a.row(r), b.row(r));
        let (na_raw, nb_raw) = (norm(ar), norm(br));
        let (na, nb) = (na_raw.max(eps), nb_raw.max(eps));
        let c = ar.dot(&br) / (na * nb);
        total += scale * c;
        // d cos / d a = b / (|a||b|) - cos a / |a|^2 (norm term only above the floor)
        let ka = if na_raw > eps { c / (na * na) } else { T::zero() };
        let inv = T::one() / (na * nb);
        Zip::from(da.row_mut(r)).and(&ar).and(&br).for_each(|d, &x, &y| {
            *d += scale * (y * inv - ka * x);
        });
        if let Some(db) = db.as_deref_mut() {
            let kb = if nb_raw > eps { c / (nb * nb) } else { T::zero() };
            Zip::from(db.row_mut(r)).and(&ar).and(&br).for_each(|d, &x, &y| {
                *d += scale * (x * inv - kb * y);
            });
        }
    }
    total
}

/// Mean over rows of L2-normalised `z` of the per-channel population
/// standard deviation. About `1/sqrt(d)` for healthy embeddings and zero
/// under complete collapse.
pub fn collapse_statistic<T: Scalar>(z: &Array2<T>) -> f64 {
    let (b, d) = z.dim();
    if b == 0 || d == 0 {
        return 0.0;
    }
    let mut normed = vec![0.0f64; b * d];
    for (r, row) in z.rows().into_iter().enumerate() {
        let n = row.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>().sqrt().max(NORM_EPS);
        for (c, v) in row.iter().enumerate() {
            normed[r * d + c] = v.to_f64().unwrap() / n;
        }
    }
    let mut acc = 0.0;
    for c in 0..d {
        let mean = (0..b).map(|r| normed[r * d + c]).sum::<f64>() / b as f64;
        let var = (0..b).map(|r| (normed[r * d + c] - mean).powi(2)).sum::<f64>() / b as f64;
        acc += var.sqrt();
    }
    acc / d as f64
}
