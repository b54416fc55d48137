use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gmm::{symmetrize, Component, ComponentStats};
use crate::linalg::outer;
use crate::patches::PatchSet;

fn check(d: usize, mu_tilde: &DVector<f64>, generic: &Component<'_>) -> Result<()> {
    for found in [mu_tilde.len(), generic.mean.len(), generic.covariance.nrows()] {
        if found != d {
            return Err(Error::DimensionMismatch { expected: d, found });
        }
    }
    Ok(())
}

/// Adapted covariance by a second pass over the samples:
/// `alpha/n_k sum_i w_i (p_i - mu~)(p_i - mu~)^T + (1 - alpha)(Sigma + (mu - mu~)(mu - mu~)^T)`.
///
/// `weights` holds this component's responsibilities for every patch.
pub fn mstep_covariance_direct(
    patches: &PatchSet,
    weights: &[f64],
    stats: &ComponentStats,
    mu_tilde: &DVector<f64>,
    generic: Component<'_>,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    let d = patches.dim();
    check(d, mu_tilde, &generic)?;
    if weights.len() != patches.len() {
        return Err(Error::DimensionMismatch {
            expected: patches.len(),
            found: weights.len(),
        });
    }
    if !(stats.count > 0.0) {
        return Err(Error::InvalidParameter(
            "direct covariance update needs a positive soft count".into(),
        ));
    }

    let mut scatter = DMatrix::zeros(d, d);
    let mut diff = DVector::zeros(d);
    for (p, &w) in patches.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (t, (a, b)) in diff.iter_mut().zip(p.iter().zip(mu_tilde.iter())) {
            *t = a - b;
        }
        scatter.ger(w, &diff, &diff, 1.0);
    }
    let shift = generic.mean - mu_tilde;
    let out = scatter * (alpha / stats.count)
        + (generic.covariance + outer(&shift, &shift)) * (1.0 - alpha);
    Ok(symmetrize(&out))
}

/// Adapted covariance from precomputed second moments, without touching the
/// samples: `alpha M_k - mu~ mu~^T + (1 - alpha)(Sigma + mu mu^T)`.
pub fn mstep_covariance_fast(
    stats: &ComponentStats,
    mu_tilde: &DVector<f64>,
    generic: Component<'_>,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    check(stats.mean.len(), mu_tilde, &generic)?;
    let out = &stats.second_moment * alpha - outer(mu_tilde, mu_tilde)
        + (generic.covariance + outer(generic.mean, generic.mean)) * (1.0 - alpha);
    Ok(symmetrize(&out))
}
