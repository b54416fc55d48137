//! Small dense helpers shared by the EM routines.

use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::gmm::symmetrize;

const GRAM_CHUNK: usize = 512;

/// `sum_i w_i x_i` over the columns of `x`.
pub(crate) fn weighted_sum(x: &DMatrixView<'_, f64>, w: &[f64]) -> DVector<f64> {
    let mut out = DVector::zeros(x.nrows());
    out.gemv(1.0, x, &DVector::from_column_slice(w), 0.0);
    out
}

/// `sum_i w_i (x_i - c)(x_i - c)^T` over the columns of `x`, `w_i >= 0`.
///
/// Accumulated in fixed-size column blocks through a dense product, so the
/// result is a deterministic function of the inputs.
pub(crate) fn weighted_gram(
    x: &DMatrixView<'_, f64>,
    w: &[f64],
    center: Option<&DVector<f64>>,
) -> DMatrix<f64> {
    let d = x.nrows();
    let n = x.ncols();
    let mut acc = DMatrix::zeros(d, d);
    let mut start = 0;
    while start < n {
        let end = (start + GRAM_CHUNK).min(n);
        let mut y = x.columns(start, end - start).clone_owned();
        for (j, mut col) in y.column_iter_mut().enumerate() {
            if let Some(c) = center {
                col -= c;
            }
            col *= w[start + j].max(0.0).sqrt();
        }
        let yt = y.transpose();
        acc.gemm(1.0, &y, &yt, 1.0);
        start = end;
    }
    symmetrize(&acc)
}

pub fn outer(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    a * b.transpose()
}

/// `||a - b||_F / max(||b||_F, tiny)`.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
