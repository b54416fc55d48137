//! Maximum-likelihood EM for full-covariance mixtures.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmm::{FactoredGmm, Gmm, SufficientStats, DEFAULT_PSD_FLOOR};
use crate::patches::PatchSet;

/// Components whose soft count falls below this are reseeded.
pub const EMPTY_COMPONENT_COUNT: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmInit {
    /// Uniform random soft assignments followed by an M-step.
    RandomResponsibility,
    /// k-means++ seeding, hard assignment to the nearest seed, then an M-step.
    KMeansPlusPlus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub components: usize,
    pub max_iters: usize,
    /// Stop when the relative change of the mean log-likelihood is below this.
    pub tol: f64,
    pub seed: u64,
    pub init: EmInit,
    pub psd_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            components: 20,
            max_iters: 100,
            tol: 1e-5,
            seed: 0,
            init: EmInit::KMeansPlusPlus,
            psd_floor: DEFAULT_PSD_FLOOR,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::InvalidParameter("component count must be >= 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tol must be > 0, got {}", self.tol)));
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

#[derive(Debug, Clone)]
pub struct EmFit {
    pub gmm: Gmm,
    /// Mean per-patch log-likelihood of each successive model, starting with
    /// the initialization and ending with the returned model.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Number of empty-component reseeding events.
    pub reseeded: usize,
}

pub fn em_fit(patches: &PatchSet, config: &EmConfig) -> Result<EmFit> {
    em_fit_with_inflation(patches, config, 0.0)
}

/// EM under the observation model `p = x + e`, `e ~ N(0, sigma_tilde_sq I)`:
/// responsibilities use `Sigma_k + sigma_tilde_sq I` and the M-step removes
/// `sigma_tilde_sq I` from each scatter estimate before PSD flooring.
pub fn em_fit_with_inflation(
    patches: &PatchSet,
    config: &EmConfig,
    sigma_tilde_sq: f64,
) -> Result<EmFit> {
    config.validate()?;
    if !(sigma_tilde_sq >= 0.0) || !sigma_tilde_sq.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise variance must be finite and >= 0, got {sigma_tilde_sq}"
        )));
    }
    let n = patches.len();
    if n < config.components {
        return Err(Error::InsufficientData {
            samples: n,
            components: config.components,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gamma = match config.init {
        EmInit::RandomResponsibility => random_responsibilities(n, config.components, &mut rng),
        EmInit::KMeansPlusPlus => kmeans_pp_assignments(patches, config.components, &mut rng),
    };
    let mut reseeded = 0;
    let mut gmm = m_step(patches, &gamma, sigma_tilde_sq, config.psd_floor, &mut rng, &mut reseeded)?;

    let mut trace = Vec::with_capacity(config.max_iters + 1);
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..config.max_iters {
        let resp = FactoredGmm::new(&gmm, sigma_tilde_sq)?.responsibilities(patches)?;
        let ll = resp.mean_log_likelihood();
        if let Some(&prev) = trace.last() {
            if relative_change(prev, ll) < config.tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        gmm = m_step(patches, &resp.gamma, sigma_tilde_sq, config.psd_floor, &mut rng, &mut reseeded)?;
        iterations += 1;
    }
    if !converged {
        let ll = FactoredGmm::new(&gmm, sigma_tilde_sq)?.log_likelihood(patches)? / n as f64;
        trace.push(ll);
        converged = relative_change(trace[trace.len() - 2], ll) < config.tol;
    }
    Ok(EmFit {
        gmm,
        trace,
        iterations,
        converged,
        reseeded,
    })
}

fn relative_change(prev: f64, next: f64) -> f64 {
    (next - prev).abs() / prev.abs().max(f64::MIN_POSITIVE)
}

fn m_step(
    patches: &PatchSet,
    gamma: &DMatrix<f64>,
    sigma_tilde_sq: f64,
    floor: f64,
    rng: &mut ChaCha8Rng,
    reseeded: &mut usize,
) -> Result<Gmm> {
    let stats = SufficientStats::from_responsibilities(patches, gamma)?;
    let n = patches.len() as f64;
    let d = patches.dim();
    let mut weights = Vec::with_capacity(stats.components.len());
    let mut means = Vec::with_capacity(stats.components.len());
    let mut covs = Vec::with_capacity(stats.components.len());
    for (k, s) in stats.components.iter().enumerate() {
        if s.count < EMPTY_COMPONENT_COUNT {
            let i = rng.random_range(0..patches.len());
            log::warn!("component {k} is empty (n_k = {:e}); reseeding at patch {i}", s.count);
            *reseeded += 1;
            weights.push(1.0 / n);
            means.push(DVector::from_column_slice(patches.patch(i)));
            covs.push(DMatrix::identity(d, d) * floor);
            continue;
        }
        let mut cov = &s.scatter / s.count;
        for j in 0..d {
            cov[(j, j)] -= sigma_tilde_sq;
        }
        weights.push(s.count / n);
        means.push(s.mean.clone());
        covs.push(cov);
    }
    Gmm::from_parts(weights, means, covs, floor)
}

fn random_responsibilities(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut gamma = DMatrix::from_fn(n, k, |_, _| rng.random::<f64>() + 1e-3);
    for mut row in gamma.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    gamma
}

/// k-means++ seeding followed by hard assignment of every patch to its
/// nearest seed (ties to the lowest index).
fn kmeans_pp_assignments(patches: &PatchSet, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = patches.len();
    let sq_dist = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };

    let mut seeds = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist(patches.patch(i), patches.patch(seeds[0])))
        .collect();
    while seeds.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        seeds.push(next);
        let s = patches.patch(next);
        nearest
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = d.min(sq_dist(patches.patch(i), s)));
    }

    let labels: Vec<usize> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = patches.patch(i);
            let mut best = (0, f64::INFINITY);
            for (j, &s) in seeds.iter().enumerate() {
                let dist = sq_dist(p, patches.patch(s));
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            best.0
        })
        .collect();
    let mut gamma = DMatrix::zeros(n, k);
    for (i, &j) in labels.iter().enumerate() {
        gamma[(i, j)] = 1.0;
    }
    gamma
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::min_eigenvalue;
    use rand_distr::{Distribution, StandardNormal};

    fn two_clusters(seed: u64) -> PatchSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for c in [0.0, 10.0] {
            for _ in 0..200 {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                data.extend([c + a, c + b]);
            }
        }
        PatchSet::from_rows(2, data).unwrap()
    }

    fn config(k: usize, seed: u64) -> EmConfig {
        EmConfig {
            components: k,
            seed,
            ..EmConfig::default()
        }
    }

    #[test]
    fn single_component_is_closed_form() {
        let p = two_clusters(0);
        let cfg = EmConfig {
            max_iters: 1,
            ..config(1, 0)
        };
        let fit = em_fit(&p, &cfg).unwrap();
        let n = p.len() as f64;
        let mut mean = DVector::zeros(2);
        for x in p.iter() {
            mean += DVector::from_column_slice(x);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(2, 2);
        for x in p.iter() {
            let v = DVector::from_column_slice(x) - &mean;
            cov += &v * v.transpose();
        }
        cov /= n;
        assert!((&fit.gmm.means()[0] - mean).amax() < 1e-9);
        assert!((&fit.gmm.covariances()[0] - cov).amax() < 1e-9);
        assert_eq!(fit.gmm.weights(), &[1.0]);
    }

    #[test]
    fn recovers_separated_clusters() {
        let mut ok = 0;
        for seed in 0..10 {
            let fit = em_fit(&two_clusters(seed), &config(2, seed)).unwrap();
            let mut means: Vec<_> = fit.gmm.means().iter().map(|m| (m[0], m[1])).collect();
            let mut weights = fit.gmm.weights().to_vec();
            if means[0].0 > means[1].0 {
                means.swap(0, 1);
                weights.swap(0, 1);
            }
            let good = (means[0].0.abs() < 0.5 && means[0].1.abs() < 0.5)
                && ((means[1].0 - 10.0).abs() < 0.5 && (means[1].1 - 10.0).abs() < 0.5)
                && weights.iter().all(|w| (w - 0.5).abs() < 0.1);
            ok += good as usize;
        }
        assert!(ok >= 9, "{ok}/10");
    }

    #[test]
    fn trace_is_monotone() {
        for init in [EmInit::KMeansPlusPlus, EmInit::RandomResponsibility] {
            let cfg = EmConfig {
                init,
                max_iters: 60,
                ..config(4, 3)
            };
            let fit = em_fit(&two_clusters(3), &cfg).unwrap();
            for w in fit.trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "{:?}", fit.trace);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let p = two_clusters(4);
        let a = em_fit(&p, &config(3, 11)).unwrap();
        let b = em_fit(&p, &config(3, 11)).unwrap();
        assert_eq!(a.gmm, b.gmm);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn permutation_equivariant_up_to_relabeling() {
        let p = two_clusters(5);
        let a = em_fit(&p, &config(2, 1)).unwrap().gmm;
        let idx: Vec<usize> = (0..p.len()).rev().collect();
        let b = em_fit(&p.select(&idx).unwrap(), &config(2, 1)).unwrap().gmm;
        for m in a.means() {
            let best = b.means().iter().map(|x| (x - m).norm()).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "{best}");
        }
    }

    #[test]
    fn too_few_samples() {
        let p = PatchSet::from_rows(2, vec![0.0; 6]).unwrap();
        assert!(matches!(em_fit(&p, &config(4, 0)), Err(Error::InsufficientData { samples: 3, components: 4 })));
    }

    #[test]
    fn empty_component_is_reseeded() {
        // Three identical points cannot support three distinct components.
        let p = PatchSet::from_rows(1, vec![1.0, 1.0, 1.0, 5.0]).unwrap();
        let cfg = EmConfig {
            max_iters: 5,
            ..config(3, 0)
        };
        let fit = em_fit(&p, &cfg).unwrap();
        assert_eq!(fit.gmm.components(), 3);
        assert!(fit.gmm.covariances().iter().all(|c| min_eigenvalue(c) >= cfg.psd_floor * (1.0 - 1e-9)));
    }

    #[test]
    fn zero_inflation_matches_plain_fit() {
        let p = two_clusters(6);
        let a = em_fit(&p, &config(2, 2)).unwrap();
        let b = em_fit_with_inflation(&p, &config(2, 2), 0.0).unwrap();
        assert_eq!(a.gmm, b.gmm);
    }

    #[test]
    fn inflation_recovers_clean_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..10_000)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                let e: f64 = StandardNormal.sample(&mut rng);
                2.0 * x + e
            })
            .collect();
        let p = PatchSet::from_rows(1, data).unwrap();
        let comp = em_fit_with_inflation(&p, &config(1, 0), 1.0).unwrap();
        let plain = em_fit(&p, &config(1, 0)).unwrap();
        assert!((comp.gmm.covariances()[0][(0, 0)] - 4.0).abs() < 0.3);
        assert!((plain.gmm.covariances()[0][(0, 0)] - 5.0).abs() < 0.3);
    }

    #[test]
    fn huge_inflation_clamps_to_floor() {
        let p = two_clusters(8);
        let fit = em_fit_with_inflation(&p, &config(2, 0), 1e6).unwrap();
        for c in fit.gmm.covariances() {
            assert!((c - DMatrix::identity(2, 2) * DEFAULT_PSD_FLOOR).amax() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let p = two_clusters(0);
        assert!(em_fit(&p, &config(0, 0)).is_err());
        assert!(em_fit(&p, &EmConfig { tol: 0.0, ..config(2, 0) }).is_err());
        assert!(em_fit_with_inflation(&p, &config(2, 0), -1.0).is_err());
    }
}
