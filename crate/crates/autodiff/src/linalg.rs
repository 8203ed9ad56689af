//! LU factorisation of small square matrices.

use crate::error::{AutodiffError, Result};
use crate::scalar::Scalar;

/// Row-pivoted LU factors of an `n×n` matrix, accumulated in `f64`.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn factor<T: Scalar>(a: &[T], n: usize) -> Result<Self> {
        if a.len() != n * n {
            return Err(AutodiffError::shape("lu", &[a.len()], &[n, n]));
        }
        let mut lu: Vec<f64> = a.iter().map(|v| v.as_f64()).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| lu[i * n + col].abs().total_cmp(&lu[j * n + col].abs()))
                .unwrap_or(col);
            if pivot != col {
                for j in 0..n {
                    lu.swap(col * n + j, pivot * n + j);
                }
                perm.swap(col, pivot);
                sign = -sign;
            }
            let diag = lu[col * n + col];
            if diag == 0.0 {
                continue;
            }
            for row in col + 1..n {
                let f = lu[row * n + col] / diag;
                lu[row * n + col] = f;
                for j in col + 1..n {
                    lu[row * n + j] -= f * lu[col * n + j];
                }
            }
        }
        Ok(Lu { n, lu, perm, sign })
    }

    pub fn det(&self) -> f64 {
        (0..self.n)
            .map(|i| self.lu[i * self.n + i])
            .product::<f64>()
            * self.sign
    }

    /// `ln |det|` summed from the diagonal, robust to over/underflow of the product.
    pub fn log_abs_det(&self) -> f64 {
        (0..self.n)
            .map(|i| self.lu[i * self.n + i].abs().ln())
            .sum()
    }

    pub fn is_singular(&self) -> bool {
        (0..self.n).any(|i| self.lu[i * self.n + i] == 0.0)
    }

    /// Solve `A x = b` for one right-hand side.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.lu[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu[i * n + j] * x[j];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }

    pub fn inverse<T: Scalar>(&self) -> Vec<T> {
        let n = self.n;
        let mut inv = vec![T::zero(); n * n];
        let mut e = vec![0.0; n];
        for col in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[col] = 1.0;
            let x = self.solve(&e);
            for row in 0..n {
                inv[row * n + col] = T::of(x[row]);
            }
        }
        inv
    }
}

/// Determinant of a square matrix.
pub fn det<T: Scalar>(a: &[T], n: usize) -> Result<f64> {
    Ok(Lu::factor(a, n)?.det())
}

/// Inverse of a square matrix, rejecting near-singular input.
pub fn inverse<T: Scalar>(a: &[T], n: usize, min_abs_det: f64) -> Result<Vec<T>> {
    let lu = Lu::factor(a, n)?;
    let d = lu.det();
    if lu.is_singular() || d.abs() < min_abs_det {
        return Err(AutodiffError::Singular {
            op: "inverse",
            det: d,
        });
    }
    Ok(lu.inverse())
}
