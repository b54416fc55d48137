//! Log-domain Gaussian densities and E-step responsibilities.

use nalgebra::{DMatrix, DMatrixView, DVector};
use rayon::prelude::*;

use super::{condition_psd, symmetrize, Gmm, DEFAULT_PSD_FLOOR};
use crate::error::{Error, Result};
use crate::patches::PatchSet;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Patches per parallel work item. Fixed so reductions do not depend on the
/// thread count.
pub(crate) const CHUNK: usize = 256;

/// A Gaussian `N(mean, cov + inflation*I)` with its Cholesky factor cached.
#[derive(Debug, Clone)]
pub struct FactoredGaussian {
    mean: DVector<f64>,
    lower: DMatrix<f64>,
    whiten: DMatrix<f64>,
    whitened_mean: DVector<f64>,
    log_norm: f64,
}

impl FactoredGaussian {
    /// Returns `None` when `cov + inflation*I` cannot be factored even after
    /// PSD conditioning.
    pub fn new(mean: &DVector<f64>, cov: &DMatrix<f64>, inflation: f64) -> Option<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return None;
        }
        let mut c = symmetrize(cov);
        for i in 0..d {
            c[(i, i)] += inflation;
        }
        let chol = c
            .clone()
            .cholesky()
            .or_else(|| condition_psd(&c, DEFAULT_PSD_FLOOR).cholesky())?;
        let lower = chol.l();
        let log_det: f64 = 2.0 * lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return None;
        }
        let whiten = lower
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .expect("Cholesky factor has a positive diagonal");
        let whitened_mean = &whiten * mean;
        Some(Self {
            mean: mean.clone(),
            lower,
            whiten,
            whitened_mean,
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Lower-triangular `L` with `L L^T = cov + inflation*I`.
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn log_det(&self) -> f64 {
        -2.0 * self.log_norm - self.dim() as f64 * LN_2PI
    }

    /// `log N(p | mean, cov + inflation*I)` via a triangular solve.
    pub fn log_density(&self, p: &[f64]) -> f64 {
        let diff = DVector::from_iterator(self.dim(), p.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        let z = self
            .lower
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * z.norm_squared()
    }

    /// Mahalanobis term `(p - mean)^T C^{-1} (p - mean)` for every column of
    /// `block`, computed through the cached inverse factor.
    fn quad_forms(&self, block: &DMatrixView<'_, f64>) -> Vec<f64> {
        let z = &self.whiten * block;
        z.column_iter()
            .map(|col| {
                col.iter()
                    .zip(self.whitened_mean.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect()
    }
}

/// `log N(p | mu, sigma + inflation*I)`.
pub fn log_gaussian(
    p: &DVector<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    inflation: f64,
) -> Result<f64> {
    if p.len() != mu.len() {
        return Err(Error::DimensionMismatch {
            expected: mu.len(),
            found: p.len(),
        });
    }
    let g = FactoredGaussian::new(mu, sigma, inflation)
        .ok_or(Error::IllConditioned { component: 0 })?;
    Ok(g.log_density(p.as_slice()))
}

/// A mixture with every component factored once, for repeated evaluation.
#[derive(Debug, Clone)]
pub struct FactoredGmm {
    log_weights: Vec<f64>,
    components: Vec<FactoredGaussian>,
}

/// Soft assignments of `n` samples to `K` components.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    /// `n x K`; row `i` holds `gamma_{ki}` for sample `i`.
    pub gamma: DMatrix<f64>,
    /// `n_k = sum_i gamma_{ki}`.
    pub counts: Vec<f64>,
    /// `sum_i log sum_k pi_k N(p_i | ...)`.
    pub log_likelihood: f64,
}

impl Responsibilities {
    pub fn samples(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn mean_log_likelihood(&self) -> f64 {
        self.log_likelihood / self.samples() as f64
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl FactoredGmm {
    pub fn new(gmm: &Gmm, inflation: f64) -> Result<Self> {
        let components = (0..gmm.components())
            .map(|k| {
                FactoredGaussian::new(&gmm.means()[k], &gmm.covariances()[k], inflation)
                    .ok_or(Error::IllConditioned { component: k })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            log_weights: gmm.weights().iter().map(|w| w.ln()).collect(),
            components,
        })
    }

    pub fn components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn component(&self, k: usize) -> &FactoredGaussian {
        &self.components[k]
    }

    /// `log pi_k + log N(p_i | ...)` for patches `start..end`, as a
    /// `(end - start) x K` row-major buffer.
    fn log_joint_block(&self, patches: &PatchSet, start: usize, end: usize) -> Vec<f64> {
        let block = patches.columns_range(start, end);
        let c = end - start;
        let kk = self.components();
        let mut out = vec![0.0; c * kk];
        for (k, comp) in self.components.iter().enumerate() {
            let base = self.log_weights[k] + comp.log_norm;
            for (j, q) in comp.quad_forms(&block).into_iter().enumerate() {
                out[j * kk + k] = base - 0.5 * q;
            }
        }
        out
    }

    fn check(&self, patches: &PatchSet) -> Result<()> {
        if patches.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: patches.dim(),
            });
        }
        Ok(())
    }

    fn chunks(n: usize) -> Vec<(usize, usize)> {
        (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect()
    }

    pub fn responsibilities(&self, patches: &PatchSet) -> Result<Responsibilities> {
        self.check(patches)?;
        let n = patches.len();
        let kk = self.components();
        let blocks: Vec<Result<(Vec<f64>, Vec<f64>)>> = Self::chunks(n)
            .par_iter()
            .map(|&(s, e)| {
                let mut lj = self.log_joint_block(patches, s, e);
                let mut ll = Vec::with_capacity(e - s);
                for (j, row) in lj.chunks_exact_mut(kk).enumerate() {
                    let lse = log_sum_exp(row);
                    if !lse.is_finite() {
                        return Err(Error::DegeneratePatch { index: s + j });
                    }
                    row.iter_mut().for_each(|v| *v = (*v - lse).exp());
                    ll.push(lse);
                }
                Ok((lj, ll))
            })
            .collect();

        let mut gamma = DMatrix::zeros(n, kk);
        let mut log_likelihood = 0.0;
        let mut row = 0;
        for block in blocks {
            let (g, ll) = block?;
            for (j, r) in g.chunks_exact(kk).enumerate() {
                for (k, v) in r.iter().enumerate() {
                    gamma[(row + j, k)] = *v;
                }
            }
            row += ll.len();
            log_likelihood += ll.iter().sum::<f64>();
        }
        let counts = gamma.column_iter().map(|c| c.iter().sum()).collect();
        Ok(Responsibilities {
            gamma,
            counts,
            log_likelihood,
        })
    }

    /// `sum_i log sum_k pi_k N(p_i | ...)`.
    pub fn log_likelihood(&self, patches: &PatchSet) -> Result<f64> {
        self.check(patches)?;
        let kk = self.components();
        let parts: Vec<Result<f64>> = Self::chunks(patches.len())
            .par_iter()
            .map(|&(s, e)| {
                let lj = self.log_joint_block(patches, s, e);
                let mut acc = 0.0;
                for (j, row) in lj.chunks_exact(kk).enumerate() {
                    let lse = log_sum_exp(row);
                    if !lse.is_finite() {
                        return Err(Error::DegeneratePatch { index: s + j });
                    }
                    acc += lse;
                }
                Ok(acc)
            })
            .collect();
        parts.into_iter().sum()
    }

    /// `argmax_k pi_k N(p_i | ...)` per patch (lowest index wins ties).
    pub fn best_components(&self, patches: &PatchSet) -> Result<Vec<usize>> {
        self.check(patches)?;
        let kk = self.components();
        let parts: Vec<Vec<usize>> = Self::chunks(patches.len())
            .par_iter()
            .map(|&(s, e)| {
                self.log_joint_block(patches, s, e)
                    .chunks_exact(kk)
                    .map(|row| {
                        let mut best = 0;
                        for k in 1..kk {
                            if row[k] > row[best] {
                                best = k;
                            }
                        }
                        best
                    })
                    .collect()
            })
            .collect();
        Ok(parts.into_iter().flatten().collect())
    }
}

/// Posterior component probabilities of every patch under
/// `sum_k pi_k N(mu_k, Sigma_k + inflation*I)`.
pub fn responsibilities(gmm: &Gmm, patches: &PatchSet, inflation: f64) -> Result<Responsibilities> {
    gmm.check_dim(patches.dim())?;
    FactoredGmm::new(gmm, inflation)?.responsibilities(patches)
}
