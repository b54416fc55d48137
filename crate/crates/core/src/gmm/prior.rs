//! Conjugate hyper-prior (Dirichlet x normal-inverse-Wishart) and the MAP
//! objective it induces.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{FactoredGaussian, FactoredGmm, Gmm};
use crate::error::{Error, Result};
use crate::linalg::{outer, weighted_gram, weighted_sum};
use crate::patches::PatchSet;

/// Hyperparameters of one component: the Dirichlet pseudo-count `v_k` and
/// the normal-inverse-Wishart parameters `(theta_k, tau_k, Psi_k, phi_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NiwParams {
    pub pseudo_count: f64,
    pub mean: DVector<f64>,
    pub tau: f64,
    pub scale: DMatrix<f64>,
    pub dof: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub components: Vec<NiwParams>,
}

impl HyperParams {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    /// Whether every component defines a proper density (`tau > 0`,
    /// `v > 0`, `phi > d - 1`, `Psi` positive definite).
    pub fn is_proper(&self) -> bool {
        let d = self.dim() as f64;
        self.components.iter().all(|c| {
            c.tau > 0.0
                && c.pseudo_count > 0.0
                && c.dof > d - 1.0
                && c.scale.clone().cholesky().is_some()
        })
    }

    fn check_against(&self, gmm: &Gmm) -> Result<()> {
        if self.len() != gmm.components() {
            return Err(Error::DimensionMismatch {
                expected: gmm.components(),
                found: self.len(),
            });
        }
        if self.dim() != gmm.dim() {
            return Err(Error::DimensionMismatch {
                expected: gmm.dim(),
                found: self.dim(),
            });
        }
        Ok(())
    }
}

/// Per-component weighted statistics of a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentStats {
    /// `n_k = sum_i gamma_ki`.
    pub count: f64,
    /// `sum_i gamma_ki p_i / n_k` (zero when `n_k = 0`).
    pub mean: DVector<f64>,
    /// `S_k = sum_i gamma_ki (p_i - mean)(p_i - mean)^T`.
    pub scatter: DMatrix<f64>,
    /// `sum_i gamma_ki p_i p_i^T / n_k` (zero when `n_k = 0`).
    pub second_moment: DMatrix<f64>,
}

impl ComponentStats {
    /// `sum_i gamma_ki p_i`.
    pub fn weighted_sum(&self) -> DVector<f64> {
        &self.mean * self.count
    }

    /// `sum_i gamma_ki p_i p_i^T`.
    pub fn weighted_second_moment(&self) -> DMatrix<f64> {
        &self.second_moment * self.count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub components: Vec<ComponentStats>,
    /// Number of contributing samples `n`.
    pub samples: usize,
}

impl SufficientStats {
    /// Statistics for arbitrary nonnegative soft assignments `gamma` (`n x K`).
    /// The scatter is accumulated in a second, centered pass.
    pub fn from_weights(patches: &PatchSet, gamma: &DMatrix<f64>) -> Result<Self> {
        Self::accumulate(patches, gamma, true)
    }

    /// Single-pass statistics; the scatter is derived from the moments.
    pub fn from_responsibilities(patches: &PatchSet, gamma: &DMatrix<f64>) -> Result<Self> {
        Self::accumulate(patches, gamma, false)
    }

    fn accumulate(patches: &PatchSet, gamma: &DMatrix<f64>, two_pass: bool) -> Result<Self> {
        let n = patches.len();
        if gamma.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: gamma.nrows(),
            });
        }
        let x = patches.columns();
        let d = patches.dim();
        let components = (0..gamma.ncols())
            .into_par_iter()
            .map(|k| {
                let w = &gamma.as_slice()[k * n..(k + 1) * n];
                let count: f64 = w.iter().sum();
                if count <= 0.0 {
                    return ComponentStats {
                        count: 0.0,
                        mean: DVector::zeros(d),
                        scatter: DMatrix::zeros(d, d),
                        second_moment: DMatrix::zeros(d, d),
                    };
                }
                let mean = weighted_sum(&x, w) / count;
                let raw = weighted_gram(&x, w, None);
                let scatter = if two_pass {
                    weighted_gram(&x, w, Some(&mean))
                } else {
                    super::symmetrize(&(&raw - outer(&mean, &mean) * count))
                };
                ComponentStats {
                    count,
                    mean,
                    scatter,
                    second_moment: raw / count,
                }
            })
            .collect();
        Ok(Self {
            components,
            samples: n,
        })
    }

    pub fn counts(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.count).collect()
    }
}

/// Hyperparameters centered on `gmm` with relevance factor `rho`:
/// `theta_k = mu_k`, `tau_k = phi_k + d + 2 = rho`, `Psi_k = rho * Sigma_k`,
/// and Dirichlet pseudo-counts `v_k = 1 + rho * K * pi_k`, so that the
/// Dirichlet mode is `pi_k` with total excess mass `rho * K`.
///
/// For `rho <= 2d + 1` the implied `phi_k` is below `d - 1` and the NIW
/// factor is improper; the objective remains well defined.
pub fn derive_hyperparams(gmm: &Gmm, rho: f64) -> Result<HyperParams> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "relevance factor must be finite and > 0, got {rho}"
        )));
    }
    let d = gmm.dim() as f64;
    let k = gmm.components() as f64;
    let components = (0..gmm.components())
        .map(|j| {
            let c = gmm.component(j);
            NiwParams {
                pseudo_count: 1.0 + rho * k * c.weight,
                mean: c.mean.clone(),
                tau: rho,
                scale: c.covariance * rho,
                dof: rho - d - 2.0,
            }
        })
        .collect();
    Ok(HyperParams { components })
}

/// Log of the conjugate prior density at `gmm`, up to an additive constant
/// that depends only on `hyper`.
pub fn log_prior_density(gmm: &Gmm, hyper: &HyperParams) -> Result<f64> {
    hyper.check_against(gmm)?;
    let d = gmm.dim() as f64;
    let mut total = 0.0;
    for (k, h) in hyper.components.iter().enumerate() {
        let c = gmm.component(k);
        let g = FactoredGaussian::new(c.mean, c.covariance, 0.0)
            .ok_or(Error::IllConditioned { component: k })?;
        let lower = g.lower();
        let whiten = lower
            .solve_lower_triangular(&DMatrix::identity(lower.nrows(), lower.ncols()))
            .ok_or(Error::IllConditioned { component: k })?;
        let diff = c.mean - &h.mean;
        let z = &whiten * diff;
        let m = &whiten * &h.scale;
        let trace: f64 = m.iter().zip(whiten.iter()).map(|(a, b)| a * b).sum();

        if h.pseudo_count != 1.0 {
            total += (h.pseudo_count - 1.0) * c.weight.ln();
        }
        total -= 0.5 * (h.dof + d + 2.0) * g.log_det();
        total -= 0.5 * h.tau * z.norm_squared();
        total -= 0.5 * trace;
    }
    Ok(total)
}

/// Log posterior of `gmm_tilde` given the samples, up to a constant:
/// the mixture log-likelihood under covariances inflated by `inflation`,
/// plus [`log_prior_density`] when `prior` is given (`None` is a flat prior).
pub fn log_posterior_objective(
    gmm_tilde: &Gmm,
    patches: &PatchSet,
    prior: Option<&HyperParams>,
    inflation: f64,
) -> Result<f64> {
    gmm_tilde.check_dim(patches.dim())?;
    let likelihood = FactoredGmm::new(gmm_tilde, inflation)?.log_likelihood(patches)?;
    let log_prior = match prior {
        Some(h) => log_prior_density(gmm_tilde, h)?,
        None => 0.0,
    };
    Ok(likelihood + log_prior)
}
