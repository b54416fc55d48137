//! MAP adaptation of a generic mixture toward the patches of one image.
//!
//! Each iteration computes responsibilities under the current model (with
//! covariances inflated by the assumed residual noise), then blends the data
//! statistics with the generic model using `alpha_k = n_k / (n_k + rho)`.
//! The generic model stays the anchor of every M-step.

mod covariance;
mod general;

pub use covariance::{mstep_covariance_direct, mstep_covariance_fast};
pub use general::{mstep_general, posterior_hyperparams, posterior_mode};

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gmm::{
    derive_hyperparams, log_prior_density, FactoredGmm, Gmm, SufficientStats, DEFAULT_PSD_FLOOR,
};
use crate::patches::PatchSet;

/// How adapted mixture weights are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightUpdate {
    /// `(n_k + rho K pi_k) / (n + rho K)`: the Dirichlet mode under pseudo-counts
    /// `1 + rho K pi_k`. Sums to one by construction and matches the MAP
    /// objective, so iterations increase it.
    SharedDirichlet,
    /// `alpha_k n_k / n + (1 - alpha_k) pi_k`, then divided by its sum.
    PerComponent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationConfig {
    /// Relevance factor. Values between 1 and 10 work well for 8x8 patches;
    /// speaker-verification systems commonly use 16.
    pub rho: f64,
    /// Residual noise variance of the adaptation image on the `[0, 255]^2` scale.
    pub sigma_tilde_sq: f64,
    pub iterations: usize,
    pub psd_floor: f64,
    /// Compute covariances from second moments instead of a second data pass.
    pub fast_covariance: bool,
    pub weight_update: WeightUpdate,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            sigma_tilde_sq: 0.0,
            iterations: 1,
            psd_floor: DEFAULT_PSD_FLOOR,
            fast_covariance: true,
            weight_update: WeightUpdate::SharedDirichlet,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::InvalidParameter(format!("rho must be finite and > 0, got {}", self.rho)));
        }
        if !(self.sigma_tilde_sq >= 0.0) || !self.sigma_tilde_sq.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sigma_tilde_sq must be finite and >= 0, got {}",
                self.sigma_tilde_sq
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be >= 1".into()));
        }
        if !(self.psd_floor > 0.0) || !self.psd_floor.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "psd_floor must be finite and > 0, got {}",
                self.psd_floor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationReport {
    /// Log posterior of the model after each iteration.
    pub objective: Vec<f64>,
    /// `alpha_k` of the final iteration.
    pub alphas: Vec<f64>,
    /// `n_k` of the final iteration.
    pub counts: Vec<f64>,
    /// Wall-clock time spent forming covariances, summed over iterations.
    pub mstep_seconds: f64,
}

/// Adapts `generic` to `patches`. Returns the adapted model and a report.
pub fn adapt(generic: &Gmm, patches: &PatchSet, config: &AdaptationConfig) -> Result<(Gmm, AdaptationReport)> {
    config.validate()?;
    generic.check_dim(patches.dim())?;
    if patches.is_empty() {
        return Err(Error::InsufficientData {
            samples: 0,
            components: generic.components(),
        });
    }
    let hyper = derive_hyperparams(generic, config.rho)?;

    let mut current = generic.clone();
    let mut objective = Vec::with_capacity(config.iterations);
    let mut alphas = Vec::new();
    let mut counts = Vec::new();
    let mut mstep_seconds = 0.0;
    for it in 0..config.iterations {
        let resp = FactoredGmm::new(&current, config.sigma_tilde_sq)?.responsibilities(patches)?;
        if it > 0 {
            objective.push(resp.log_likelihood + log_prior_density(&current, &hyper)?);
        }
        let stats = SufficientStats::from_responsibilities(patches, &resp.gamma)?;
        let step = m_step(generic, &stats, config, Some((patches, &resp.gamma)))?;
        mstep_seconds += step.covariance_seconds;
        alphas = step.alphas;
        counts = stats.counts();
        current = step.gmm;
    }
    let ll = FactoredGmm::new(&current, config.sigma_tilde_sq)?.log_likelihood(patches)?;
    objective.push(ll + log_prior_density(&current, &hyper)?);

    Ok((
        current,
        AdaptationReport {
            objective,
            alphas,
            counts,
            mstep_seconds,
        },
    ))
}

/// One adaptation M-step from precomputed statistics, using the fast
/// covariance form. Returns the adapted model and the `alpha_k`.
pub fn mstep_simplified(
    generic: &Gmm,
    stats: &SufficientStats,
    config: &AdaptationConfig,
) -> Result<(Gmm, Vec<f64>)> {
    config.validate()?;
    let fast = AdaptationConfig {
        fast_covariance: true,
        ..config.clone()
    };
    let step = m_step(generic, stats, &fast, None)?;
    Ok((step.gmm, step.alphas))
}

struct Step {
    gmm: Gmm,
    alphas: Vec<f64>,
    covariance_seconds: f64,
}

fn m_step(
    generic: &Gmm,
    stats: &SufficientStats,
    config: &AdaptationConfig,
    samples: Option<(&PatchSet, &DMatrix<f64>)>,
) -> Result<Step> {
    let kk = generic.components();
    if stats.components.len() != kk {
        return Err(Error::DimensionMismatch {
            expected: kk,
            found: stats.components.len(),
        });
    }
    let rho = config.rho;
    let n: f64 = stats.counts().iter().sum();

    let alphas: Vec<f64> = stats.components.iter().map(|s| s.count / (s.count + rho)).collect();
    let weights: Vec<f64> = match config.weight_update {
        WeightUpdate::SharedDirichlet => {
            let excess = rho * kk as f64;
            (0..kk)
                .map(|k| (stats.components[k].count + excess * generic.weights()[k]) / (n + excess))
                .collect()
        }
        WeightUpdate::PerComponent => (0..kk)
            .map(|k| {
                let data = if n > 0.0 { stats.components[k].count / n } else { 0.0 };
                alphas[k] * data + (1.0 - alphas[k]) * generic.weights()[k]
            })
            .collect(),
    };
    let means: Vec<DVector<f64>> = (0..kk)
        .map(|k| {
            let s = &stats.components[k];
            (s.weighted_sum() + &generic.means()[k] * rho) / (s.count + rho)
        })
        .collect();

    let start = Instant::now();
    let mut covs = Vec::with_capacity(kk);
    for k in 0..kk {
        let s = &stats.components[k];
        let g = generic.component(k);
        let mut cov = match samples {
            Some((patches, gamma)) if !config.fast_covariance && s.count > 0.0 => {
                let n_rows = patches.len();
                let w = &gamma.as_slice()[k * n_rows..(k + 1) * n_rows];
                mstep_covariance_direct(patches, w, s, &means[k], g, alphas[k])?
            }
            _ => mstep_covariance_fast(s, &means[k], g, alphas[k])?,
        };
        let shift = alphas[k] * config.sigma_tilde_sq;
        for j in 0..cov.nrows() {
            cov[(j, j)] -= shift;
        }
        covs.push(cov);
    }
    let covariance_seconds = start.elapsed().as_secs_f64();

    let gmm = Gmm::from_parts(weights, means, covs, config.psd_floor)?;
    Ok(Step {
        gmm,
        alphas,
        covariance_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{log_posterior_objective, min_eigenvalue, responsibilities};
    use crate::linalg::relative_frobenius;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gmm(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Gmm {
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let means = (0..k)
            .map(|_| DVector::from_fn(d, |_, _| rng.random_range(0.0..100.0)))
            .collect();
        let covs = (0..k)
            .map(|_| {
                let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-5.0..5.0));
                &a * a.transpose() + DMatrix::identity(d, d) * 10.0
            })
            .collect();
        Gmm::from_parts(w, means, covs, DEFAULT_PSD_FLOOR).unwrap()
    }

    fn random_patches(n: usize, d: usize, rng: &mut ChaCha8Rng) -> PatchSet {
        PatchSet::from_rows(d, (0..n * d).map(|_| rng.random_range(0.0..100.0)).collect()).unwrap()
    }

    fn max_rel(a: &Gmm, b: &Gmm) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..a.components() {
            worst = worst.max((a.weights()[k] - b.weights()[k]).abs() / b.weights()[k]);
            worst = worst.max((&a.means()[k] - &b.means()[k]).norm() / b.means()[k].norm().max(1e-300));
            worst = worst.max(relative_frobenius(&a.covariances()[k], &b.covariances()[k]));
        }
        worst
    }

    fn config(rho: f64) -> AdaptationConfig {
        AdaptationConfig {
            rho,
            ..AdaptationConfig::default()
        }
    }

    #[test]
    fn infinite_relevance_returns_generic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = random_gmm(4, 3, &mut rng);
        let p = random_patches(200, 3, &mut rng);
        for rule in [WeightUpdate::SharedDirichlet, WeightUpdate::PerComponent] {
            let cfg = AdaptationConfig {
                weight_update: rule,
                ..config(1e12)
            };
            let (a, _) = adapt(&g, &p, &cfg).unwrap();
            assert!(max_rel(&a, &g) < 1e-6);
        }
    }

    #[test]
    fn vanishing_relevance_is_one_em_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_gmm(3, 2, &mut rng);
        let p = random_patches(300, 2, &mut rng);
        let (a, _) = adapt(&g, &p, &config(1e-9)).unwrap();

        // ML M-step from responsibilities under the generic model
        let r = responsibilities(&g, &p, 0.0).unwrap();
        let n = p.len() as f64;
        let mut weights = Vec::new();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for k in 0..3 {
            let nk: f64 = r.gamma.column(k).sum();
            let mut m = DVector::zeros(2);
            for (i, x) in p.iter().enumerate() {
                m += DVector::from_column_slice(x) * r.gamma[(i, k)];
            }
            m /= nk;
            let mut c = DMatrix::zeros(2, 2);
            for (i, x) in p.iter().enumerate() {
                let v = DVector::from_column_slice(x) - &m;
                c += &v * v.transpose() * r.gamma[(i, k)];
            }
            weights.push(nk / n);
            means.push(m);
            covs.push(c / nk);
        }
        let em = Gmm::from_parts(weights, means, covs, DEFAULT_PSD_FLOOR).unwrap();
        assert!(max_rel(&a, &em) < 1e-6, "{}", max_rel(&a, &em));
    }

    #[test]
    fn fast_and_direct_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_gmm(5, 4, &mut rng);
        let p = random_patches(400, 4, &mut rng);
        for s2 in [0.0, 25.0] {
            let cfg = AdaptationConfig {
                sigma_tilde_sq: s2,
                iterations: 2,
                ..config(3.0)
            };
            let (fast, _) = adapt(&g, &p, &cfg).unwrap();
            let (direct, _) = adapt(&g, &p, &AdaptationConfig { fast_covariance: false, ..cfg }).unwrap();
            assert!(max_rel(&fast, &direct) < 1e-9);
        }
    }

    #[test]
    fn noisy_correction_matches_per_sample_subtraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_gmm(3, 3, &mut rng);
        let p = random_patches(250, 3, &mut rng);
        let s2 = 40.0;
        let rho = 2.0;
        let cfg = AdaptationConfig {
            sigma_tilde_sq: s2,
            psd_floor: 1e-12,
            ..config(rho)
        };
        let (a, report) = adapt(&g, &p, &cfg).unwrap();
        let r = responsibilities(&g, &p, s2).unwrap();
        for k in 0..3 {
            let nk: f64 = r.gamma.column(k).sum();
            let alpha = nk / (nk + rho);
            assert!((alpha - report.alphas[k]).abs() < 1e-12);
            let mt = &a.means()[k];
            // subtract the noise covariance from every sample's contribution
            let mut data = DMatrix::zeros(3, 3);
            for (i, x) in p.iter().enumerate() {
                let v = DVector::from_column_slice(x) - mt;
                data += (&v * v.transpose() - DMatrix::identity(3, 3) * s2) * r.gamma[(i, k)];
            }
            let shift = &g.means()[k] - mt;
            let want = data * (alpha / nk) + (&g.covariances()[k] + &shift * shift.transpose()) * (1.0 - alpha);
            if min_eigenvalue(&want) > 1e-6 {
                assert!(relative_frobenius(&a.covariances()[k], &want) < 1e-9);
            }
        }
    }

    #[test]
    fn weights_on_simplex_and_covariances_floored() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_gmm(6, 3, &mut rng);
        let p = random_patches(100, 3, &mut rng);
        for rule in [WeightUpdate::SharedDirichlet, WeightUpdate::PerComponent] {
            let cfg = AdaptationConfig {
                sigma_tilde_sq: 1e5,
                weight_update: rule,
                iterations: 3,
                ..config(1.0)
            };
            let (a, _) = adapt(&g, &p, &cfg).unwrap();
            let sum: f64 = a.weights().iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(a.weights().iter().all(|w| *w >= 0.0));
            for c in a.covariances() {
                assert!(min_eigenvalue(c) >= cfg.psd_floor * (1.0 - 1e-9));
            }
        }
    }

    #[test]
    fn objective_non_decreasing_over_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_gmm(4, 3, &mut rng);
        let p = random_patches(500, 3, &mut rng);
        let cfg = AdaptationConfig {
            iterations: 6,
            ..config(2.0)
        };
        let (a, report) = adapt(&g, &p, &cfg).unwrap();
        assert_eq!(report.objective.len(), 6);
        for w in report.objective.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "{:?}", report.objective);
        }
        let hyper = derive_hyperparams(&g, 2.0).unwrap();
        let direct = log_posterior_objective(&a, &p, Some(&hyper), 0.0).unwrap();
        assert!((direct - report.objective[5]).abs() < 1e-9 * direct.abs());
    }

    #[test]
    fn shared_dirichlet_matches_general_mstep() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_gmm(4, 3, &mut rng);
        let p = random_patches(150, 3, &mut rng);
        let r = responsibilities(&g, &p, 0.0).unwrap();
        let stats = SufficientStats::from_weights(&p, &r.gamma).unwrap();
        let (simple, _) = mstep_simplified(&g, &stats, &config(5.0)).unwrap();
        let general = mstep_general(&derive_hyperparams(&g, 5.0).unwrap(), &stats).unwrap();
        assert!(max_rel(&simple, &general) < 1e-9);
    }

    #[test]
    fn per_component_rule_is_normalized_blend() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_gmm(3, 2, &mut rng);
        let p = random_patches(80, 2, &mut rng);
        let r = responsibilities(&g, &p, 0.0).unwrap();
        let stats = SufficientStats::from_weights(&p, &r.gamma).unwrap();
        let cfg = AdaptationConfig {
            weight_update: WeightUpdate::PerComponent,
            ..config(4.0)
        };
        let (a, alphas) = mstep_simplified(&g, &stats, &cfg).unwrap();
        let raw: Vec<f64> = (0..3)
            .map(|k| alphas[k] * stats.components[k].count / 80.0 + (1.0 - alphas[k]) * g.weights()[k])
            .collect();
        let total: f64 = raw.iter().sum();
        for k in 0..3 {
            assert!((a.weights()[k] - raw[k] / total).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_gmm(2, 2, &mut rng);
        let p = random_patches(10, 2, &mut rng);
        assert!(adapt(&g, &p, &config(0.0)).is_err());
        assert!(adapt(&g, &p, &AdaptationConfig { iterations: 0, ..config(1.0) }).is_err());
        let q = random_patches(10, 3, &mut rng);
        assert!(matches!(adapt(&g, &q, &config(1.0)), Err(Error::DimensionMismatch { .. })));
    }
}
