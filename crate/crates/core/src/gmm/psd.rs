use nalgebra::{DMatrix, SymmetricEigen};

/// `(A + A^T) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = a.clone();
    let n = s.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

/// Nearest (Frobenius) symmetric matrix whose eigenvalues are all `>= floor`.
///
/// The input is symmetrized first. Matrices that already clear the floor are
/// returned unchanged apart from symmetrization.
pub fn condition_psd(sigma: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = symmetrize(sigma);
    let n = sym.nrows();

    // A - floor*I positive definite means every eigenvalue already clears the floor.
    let mut shifted = sym.clone();
    for i in 0..n {
        shifted[(i, i)] -= floor;
    }
    if shifted.cholesky().is_some() {
        return sym;
    }

    let eig = SymmetricEigen::new(sym);
    let clamped = eig.eigenvalues.map(|l| if l.is_nan() { floor } else { l.max(floor) });
    let v = &eig.eigenvectors;
    let scaled = v * DMatrix::from_diagonal(&clamped);
    symmetrize(&(scaled * v.transpose()))
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(a))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
