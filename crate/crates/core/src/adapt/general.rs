//! Conjugate posterior update and its mode for arbitrary hyperparameters.

use crate::error::{Error, Result};
use crate::gmm::{symmetrize, Gmm, HyperParams, NiwParams, SufficientStats};
use crate::linalg::outer;

fn check(hyper: &HyperParams, stats: &SufficientStats) -> Result<()> {
    if hyper.len() != stats.components.len() {
        return Err(Error::DimensionMismatch {
            expected: hyper.len(),
            found: stats.components.len(),
        });
    }
    if let Some(s) = stats.components.first() {
        if s.mean.len() != hyper.dim() {
            return Err(Error::DimensionMismatch {
                expected: hyper.dim(),
                found: s.mean.len(),
            });
        }
    }
    Ok(())
}

/// Posterior hyperparameters after observing `stats`:
/// `v' = v + n_k`, `tau' = tau + n_k`, `phi' = phi + n_k`,
/// `theta' = (tau theta + n_k mean) / (tau + n_k)` and
/// `Psi' = Psi + S_k + tau n_k / (tau + n_k) (theta - mean)(theta - mean)^T`.
pub fn posterior_hyperparams(hyper: &HyperParams, stats: &SufficientStats) -> Result<HyperParams> {
    check(hyper, stats)?;
    let components = hyper
        .components
        .iter()
        .zip(&stats.components)
        .map(|(h, s)| {
            let n = s.count;
            if n == 0.0 {
                return h.clone();
            }
            let diff = &h.mean - &s.mean;
            let shrink = h.tau * n / (h.tau + n);
            NiwParams {
                pseudo_count: h.pseudo_count + n,
                mean: (&h.mean * h.tau + &s.mean * n) / (h.tau + n),
                tau: h.tau + n,
                scale: symmetrize(&(&h.scale + &s.scatter + outer(&diff, &diff) * shrink)),
                dof: h.dof + n,
            }
        })
        .collect();
    Ok(HyperParams { components })
}

/// Joint mode of a Dirichlet x NIW density: `pi_k ∝ v_k - 1`, `mu_k = theta_k`,
/// `Sigma_k = Psi_k / (phi_k + d + 2)`. No PSD flooring is applied.
pub fn posterior_mode(hyper: &HyperParams) -> Result<Gmm> {
    let d = hyper.dim() as f64;
    let excess: Vec<f64> = hyper.components.iter().map(|h| h.pseudo_count - 1.0).collect();
    let total: f64 = excess.iter().sum();
    if !(total > 0.0) || excess.iter().any(|e| *e < 0.0) {
        return Err(Error::InvalidParameter(
            "Dirichlet mode needs pseudo-counts >= 1 with positive excess".into(),
        ));
    }
    let mut weights: Vec<f64> = excess.iter().map(|e| e / total).collect();
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= sum);
    let means = hyper.components.iter().map(|h| h.mean.clone()).collect();
    let mut covs = Vec::with_capacity(hyper.len());
    for h in &hyper.components {
        let denom = h.dof + d + 2.0;
        if !(denom > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "covariance mode needs phi + d + 2 > 0, got {denom}"
            )));
        }
        covs.push(symmetrize(&(&h.scale / denom)));
    }
    Gmm::new(weights, means, covs)
}

/// MAP M-step for arbitrary hyperparameters: the mode of
/// [`posterior_hyperparams`]. In closed form
/// `pi_k = (v_k - 1 + n_k) / (sum_j (v_j - 1) + n)` and
/// `Sigma_k = (Psi_k + S_k + ...) / (phi_k + d + 2 + n_k)`.
pub fn mstep_general(hyper: &HyperParams, stats: &SufficientStats) -> Result<Gmm> {
    posterior_mode(&posterior_hyperparams(hyper, stats)?)
}
