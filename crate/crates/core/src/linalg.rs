//! Dense symmetric positive-definite helpers.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// Fails when a pivot drops below a relative tolerance, which is how
/// singular or indefinite inputs surface.
pub fn cholesky<T: Scalar>(a: &Array2<T>) -> Result<Array2<T>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("cholesky needs a square matrix, got {:?}", a.shape())));
    }
    let scale = (0..n).map(|i| a[[i, i]].abs()).fold(T::zero(), T::max);
    let tol = scale * T::epsilon() * lit::<T>(16.0) * T::from_usize(n.max(1)).unwrap();
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d = d - l[[j, k]] * l[[j, k]];
        }
        if !(d > tol) {
            return Err(Error::Numerical(format!(
                "matrix is not positive definite (pivot {j} = {d})"
            )));
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s = s - l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse<T: Scalar>(a: &Array2<T>) -> Result<Array2<T>> {
    let l = cholesky(a)?;
    let n = l.nrows();
    // invert L by forward substitution, then A^{-1} = L^{-T} L^{-1}
    let mut linv = Array2::<T>::zeros((n, n));
    for col in 0..n {
        for i in col..n {
            let mut s = if i == col { T::one() } else { T::zero() };
            for k in col..i {
                s = s - l[[i, k]] * linv[[k, col]];
            }
            linv[[i, col]] = s / l[[i, i]];
        }
    }
    let mut inv = Array2::<T>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = T::zero();
            for k in i..n {
                s = s + linv[[k, i]] * linv[[k, j]];
            }
            inv[[i, j]] = s;
            inv[[j, i]] = s;
        }
    }
    Ok(inv)
}
