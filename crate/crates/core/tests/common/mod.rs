//! Reference computations shared by the oracle tests and the acceptance run.

#![allow(dead_code)]

use nfad_autodiff::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-3;

pub fn normal(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// `ln|det A|` by Gaussian elimination with partial pivoting.
pub fn ln_abs_det(mut a: Vec<f64>, n: usize) -> f64 {
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
        }
        let p = a[col * n + col];
        assert!(p != 0.0, "singular Jacobian");
        acc += p.abs().ln();
        for r in col + 1..n {
            let f = a[r * n + col] / p;
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
        }
    }
    acc
}

/// `ln|det J|` of `f` at `x` from central differences.
pub fn fd_log_det(x: &[f64], f: &dyn Fn(&[f64]) -> Vec<f64>) -> f64 {
    let d = x.len();
    let mut jac = vec![0.0; d * d];
    let mut work = x.to_vec();
    for j in 0..d {
        work[j] = x[j] + FD_STEP;
        let up = f(&work);
        work[j] = x[j] - FD_STEP;
        let down = f(&work);
        work[j] = x[j];
        assert_eq!(up.len(), d);
        for i in 0..d {
            jac[i * d + j] = (up[i] - down[i]) / (2.0 * FD_STEP);
        }
    }
    ln_abs_det(jac, d)
}

/// Fraction of (normal, anomalous) pairs won by the anomalous score, ties half.
pub fn brute_force_auc(normal: &[f64], anomalous: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &n in normal {
        for &a in anomalous {
            if a > n {
                wins += 1.0;
            } else if a == n {
                wins += 0.5;
            }
        }
    }
    wins / (normal.len() * anomalous.len()) as f64
}
