//! Small dense linear-algebra kernels: Cholesky factorization and
//! triangular solves. Context kernels are at most a few hundred rows, so
//! simple O(n³) loops are plenty.

use crate::error::{Error, Result};
use crate::num::Real;
use crate::tensor::Tensor;

/// Lower-triangular Cholesky factor `L` of a symmetric positive-definite
/// matrix, so that `A = L·Lᵀ`. Fails if a pivot is non-positive or
/// non-finite.
pub fn cholesky_lower<F: Real>(a: &Tensor<F>) -> Result<Tensor<F>> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "cholesky_lower",
            details: format!("expected a square matrix, got {:?}", a.shape()),
        });
    }
    let n = a.shape()[0];
    let mut l = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a.at(i, j);
            for k in 0..j {
                acc = acc - l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if !(acc > F::zero()) || !acc.is_finite() {
                    return Err(Error::Numerical(format!(
                        "cholesky pivot {} is not positive (value {})",
                        i, acc
                    )));
                }
                *l.at_mut(i, j) = acc.sqrt();
            } else {
                *l.at_mut(i, j) = acc / l.at(j, j);
            }
        }
    }
    Ok(l)
}

/// Solves `L·x = b` for lower-triangular `L` by forward substitution.
pub fn solve_lower<F: Real>(l: &Tensor<F>, b: &[F]) -> Result<Vec<F>> {
    let n = l.shape()[0];
    if b.len() != n {
        return Err(Error::ShapeMismatch {
            op: "solve_lower",
            details: format!("matrix is {}x{} but rhs has {} entries", n, n, b.len()),
        });
    }
    let mut x = b.to_vec();
    for i in 0..n {
        let mut acc = x[i];
        for k in 0..i {
            acc = acc - l.at(i, k) * x[k];
        }
        x[i] = acc / l.at(i, i);
    }
    Ok(x)
}

/// Solves `Lᵀ·x = b` for lower-triangular `L` by back substitution.
pub fn solve_lower_transpose<F: Real>(l: &Tensor<F>, b: &[F]) -> Result<Vec<F>> {
    let n = l.shape()[0];
    if b.len() != n {
        return Err(Error::ShapeMismatch {
            op: "solve_lower_transpose",
            details: format!("matrix is {}x{} but rhs has {} entries", n, n, b.len()),
        });
    }
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut acc = x[i];
        for k in (i + 1)..n {
            acc = acc - l.at(k, i) * x[k];
        }
        x[i] = acc / l.at(i, i);
    }
    Ok(x)
}

/// Solves `(L·Lᵀ)·x = b` via the two triangular solves.
pub fn solve_spd<F: Real>(l: &Tensor<F>, b: &[F]) -> Result<Vec<F>> {
    let u = solve_lower(l, b)?;
    solve_lower_transpose(l, &u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spd_example() -> Tensor<f64> {
        // Gram matrix of a random 3x3 factor plus the identity: certainly SPD.
        Tensor::from_vec(
            vec![3, 3],
            vec![5.0, 2.0, 1.0, 2.0, 4.0, -1.0, 1.0, -1.0, 3.0],
        )
        .unwrap()
    }

    #[test]
    fn cholesky_reconstructs_the_input() {
        let a = spd_example();
        let l = cholesky_lower(&a).unwrap();
        let back = l.matmul_nt(&l).unwrap();
        for (x, y) in a.data().iter().zip(back.data().iter()) {
            assert_relative_eq!(x, y, max_relative = 1e-12);
        }
        // Strictly upper-triangular entries stay zero.
        assert_eq!(l.at(0, 1), 0.0);
        assert_eq!(l.at(0, 2), 0.0);
        assert_eq!(l.at(1, 2), 0.0);
    }

    #[test]
    fn spd_solve_inverts_the_matrix() {
        let a = spd_example();
        let l = cholesky_lower(&a).unwrap();
        let b = [1.0, -2.0, 0.5];
        let x = solve_spd(&l, &b).unwrap();
        let ax = a.matmul(&Tensor::from_vec(vec![3], x).unwrap()).unwrap();
        for (got, want) in ax.data().iter().zip(b.iter()) {
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(cholesky_lower(&a), Err(Error::Numerical(_))));
    }
}
