use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Real, Tensor};

/// A `rows×cols` matrix with orthonormal columns (or rows, when `rows < cols`),
/// multiplied by `scale`.
///
/// Gaussian matrix → QR, with the sign of `diag(R)` folded into `Q` so the
/// result is uniformly distributed over orthogonal matrices.
pub fn orthogonal_init<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Tensor<T> {
    assert!(rows >= 1 && cols >= 1, "orthogonal_init needs non-empty dimensions");
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let gaussian = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = gaussian.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut values = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            values.push(T::from_f64_lossy(v * scale));
        }
    }
    Tensor::new(vec![rows, cols], values).expect("non-empty matrix")
}

/// Companion to [`orthogonal_init`] for bias vectors.
pub fn zeros_bias<T: Real>(len: usize) -> Tensor<T> {
    Tensor::zeros(vec![len]).expect("non-empty bias")
}
