//! Gaussian mixture models over patch vectors.

mod density;
mod prior;
mod psd;

pub use density::{log_gaussian, responsibilities, FactoredGaussian, FactoredGmm, Responsibilities};
pub use prior::{
    derive_hyperparams, log_posterior_objective, log_prior_density, ComponentStats, HyperParams,
    NiwParams, SufficientStats,
};
pub use psd::{condition_psd, min_eigenvalue, symmetrize};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Eigenvalue floor applied to covariances, on the `[0, 255]` intensity scale.
pub const DEFAULT_PSD_FLOOR: f64 = 1e-4;

const WEIGHT_SUM_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-12;

/// `K` weighted full-covariance Gaussians in `d` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
}

/// Borrowed view of one mixture component.
#[derive(Debug, Clone, Copy)]
pub struct Component<'a> {
    pub weight: f64,
    pub mean: &'a DVector<f64>,
    pub covariance: &'a DMatrix<f64>,
}

impl Gmm {
    /// Validates and builds a mixture. Weights must already lie on the simplex.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidModel("mixture has no components".into()));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::InvalidModel(format!(
                "{k} weights but {} means and {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::InvalidModel("zero-dimensional components".into()));
        }
        for (j, (m, c)) in means.iter().zip(&covariances).enumerate() {
            if m.len() != d || c.nrows() != d || c.ncols() != d {
                return Err(Error::InvalidModel(format!(
                    "component {j} does not have dimension {d}"
                )));
            }
            if m.iter().chain(c.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!(
                    "component {j} has non-finite parameters"
                )));
            }
            let scale = c.amax().max(1.0);
            if max_asymmetry(c) > SYMMETRY_TOL * scale {
                return Err(Error::InvalidModel(format!(
                    "covariance {j} is not symmetric"
                )));
            }
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidModel("weights must be finite and >= 0".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidModel(format!(
                "weights sum to {sum}, not 1"
            )));
        }
        Ok(Self {
            weights,
            means,
            covariances,
        })
    }

    /// Normalizes `weights` to sum to one, symmetrizes and PSD-floors the
    /// covariances, then validates.
    pub fn from_parts(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
        psd_floor: f64,
    ) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::InvalidModel(format!(
                "weights sum to {sum}, cannot normalize"
            )));
        }
        let weights = weights.iter().map(|w| w / sum).collect();
        let covariances = covariances
            .iter()
            .map(|c| condition_psd(c, psd_floor))
            .collect();
        Self::new(weights, means, covariances)
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    pub fn component(&self, k: usize) -> Component<'_> {
        Component {
            weight: self.weights[k],
            mean: &self.means[k],
            covariance: &self.covariances[k],
        }
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
        (self.weights, self.means, self.covariances)
    }

    pub(crate) fn check_dim(&self, d: usize) -> Result<()> {
        if d == self.dim() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: d,
            })
        }
    }
}

pub(crate) fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}
