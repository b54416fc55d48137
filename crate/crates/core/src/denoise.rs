//! MAP denoising with a patch GMM prior by half-quadratic splitting.
//!
//! Each stage selects the dominant component of every overlapping patch,
//! shrinks the patch toward that component, and averages the patches back
//! into the image against the noisy observation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmm::{symmetrize, FactoredGmm, Gmm};
use crate::image::{psnr, ImageBuffer};
use crate::patches::{coverage_counts, extract_patches, overlap_add, PatchSet};

/// Penalty multipliers of the default schedule, in units of `1 / sigma^2`.
pub const DEFAULT_BETA_MULTIPLIERS: [f64; 5] = [1.0, 4.0, 8.0, 16.0, 32.0];

/// Weight of the data term in the image update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataWeight {
    /// `d / sigma^2`, with `d` the patch dimension.
    PatchDimension,
    /// `n / sigma^2`, with `n` the number of overlapping patches.
    PatchCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HqsSchedule {
    pub betas: Vec<f64>,
    /// Added to every covariance when selecting components at each stage.
    pub mode_inflations: Vec<f64>,
    pub data_weight: DataWeight,
}

impl HqsSchedule {
    pub fn new(betas: Vec<f64>, mode_inflations: Vec<f64>, data_weight: DataWeight) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidParameter("schedule needs at least one stage".into()));
        }
        if betas.len() != mode_inflations.len() {
            return Err(Error::InvalidParameter(format!(
                "{} betas but {} mode inflations",
                betas.len(),
                mode_inflations.len()
            )));
        }
        if betas.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return Err(Error::InvalidParameter("betas must be finite and > 0".into()));
        }
        if mode_inflations.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidParameter("mode inflations must be finite and >= 0".into()));
        }
        Ok(Self {
            betas,
            mode_inflations,
            data_weight,
        })
    }

    /// Stages with the given penalties and mode inflations `1 / beta`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        let inflations = betas.iter().map(|b| 1.0 / b).collect();
        Self::new(betas, inflations, DataWeight::PatchDimension)
    }

    /// `beta_j = m_j / sigma^2` for each multiplier `m_j`.
    pub fn scaled(sigma: f64, multipliers: &[f64]) -> Result<Self> {
        check_sigma(sigma)?;
        Self::from_betas(multipliers.iter().map(|m| m / (sigma * sigma)).collect())
    }

    pub fn default_for(sigma: f64) -> Result<Self> {
        Self::scaled(sigma, &DEFAULT_BETA_MULTIPLIERS)
    }

    pub fn with_data_weight(mut self, data_weight: DataWeight) -> Self {
        self.data_weight = data_weight;
        self
    }

    pub fn stages(&self) -> usize {
        self.betas.len()
    }
}

#[derive(Debug, Clone)]
pub struct DenoiseResult {
    pub image: ImageBuffer,
    /// PSNR after each stage; empty without a reference image.
    pub psnr_trace: Vec<f64>,
    /// Number of patches assigned to each component, per stage.
    pub mode_histograms: Vec<Vec<usize>>,
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("sigma must be finite and > 0, got {sigma}")));
    }
    Ok(())
}

/// Side length of the square patches modeled by `prior`.
pub fn patch_side(prior: &Gmm) -> Result<usize> {
    let d = prior.dim();
    let s = (d as f64).sqrt().round() as usize;
    if s * s != d {
        return Err(Error::InvalidModel(format!("dimension {d} is not a square patch")));
    }
    Ok(s)
}

/// Per-component shrinkage `v = mu + W (p - mu)` with
/// `W = (beta Sigma + I)^{-1} beta Sigma`.
struct Shrinker {
    mean: DVector<f64>,
    gain: DMatrix<f64>,
}

impl Shrinker {
    fn new(mean: &DVector<f64>, cov: &DMatrix<f64>, beta: f64, k: usize) -> Result<Self> {
        let d = mean.len();
        let scaled = symmetrize(cov) * beta;
        let system = &scaled + DMatrix::identity(d, d);
        let chol = system.cholesky().ok_or(Error::IllConditioned { component: k })?;
        Ok(Self {
            mean: mean.clone(),
            gain: chol.solve(&scaled),
        })
    }
}

pub fn denoise(
    y: &ImageBuffer,
    sigma: f64,
    prior: &Gmm,
    schedule: &HqsSchedule,
    reference: Option<&ImageBuffer>,
) -> Result<DenoiseResult> {
    check_sigma(sigma)?;
    let side = patch_side(prior)?;
    if let Some(r) = reference {
        y.check_shape(r)?;
    }
    let d = prior.dim();
    let kk = prior.components();

    let mut x = y.clone();
    let mut psnr_trace = Vec::new();
    let mut mode_histograms = Vec::with_capacity(schedule.stages());
    for (stage, (&beta, &delta)) in schedule.betas.iter().zip(&schedule.mode_inflations).enumerate() {
        let patches = extract_patches(&x, side, 1)?;
        let geo = patches.geometry().expect("extracted patches carry geometry").clone();
        let n = patches.len();

        let labels = FactoredGmm::new(prior, delta)?.best_components(&patches)?;
        let mut groups = vec![Vec::new(); kk];
        for (i, &k) in labels.iter().enumerate() {
            groups[k].push(i);
        }
        mode_histograms.push(groups.iter().map(Vec::len).collect());

        let shrunk = shrink(&patches, prior, &groups, beta)?;
        let sum = overlap_add(&shrunk, &geo);
        let count = coverage_counts(&geo);

        let lambda = match schedule.data_weight {
            DataWeight::PatchDimension => d as f64,
            DataWeight::PatchCount => n as f64,
        } / (sigma * sigma);
        let pixels: Vec<f64> = y
            .pixels()
            .iter()
            .zip(sum.iter().zip(&count))
            .map(|(&yv, (&s, &c))| (lambda * yv + beta * s) / (lambda + beta * c))
            .collect();
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { stage });
        }
        x = ImageBuffer::new(y.width(), y.height(), pixels)?;
        if let Some(r) = reference {
            psnr_trace.push(psnr(r, &x)?);
        }
    }
    Ok(DenoiseResult {
        image: x,
        psnr_trace,
        mode_histograms,
    })
}

/// Shrunk values of the patches assigned to one component, keyed by patch index.
type Shrunk = Vec<(usize, Vec<f64>)>;

/// Row-major `n x d` buffer of shrunk patches.
fn shrink(patches: &PatchSet, prior: &Gmm, groups: &[Vec<usize>], beta: f64) -> Result<Vec<f64>> {
    let d = patches.dim();
    let per_component: Vec<Result<Shrunk>> = groups
        .par_iter()
        .enumerate()
        .map(|(k, idx)| {
            if idx.is_empty() {
                return Ok(Vec::new());
            }
            let op = Shrinker::new(&prior.means()[k], &prior.covariances()[k], beta, k)?;
            let mut centered = DMatrix::zeros(d, idx.len());
            for (j, &i) in idx.iter().enumerate() {
                for (r, v) in patches.patch(i).iter().enumerate() {
                    centered[(r, j)] = v - op.mean[r];
                }
            }
            let mut out = DMatrix::zeros(d, idx.len());
            out.gemm(1.0, &op.gain, &centered, 0.0);
            Ok(idx
                .iter()
                .enumerate()
                .map(|(j, &i)| (i, out.column(j).iter().zip(op.mean.iter()).map(|(a, m)| a + m).collect()))
                .collect())
        })
        .collect();

    let mut values = vec![0.0; patches.len() * d];
    for part in per_component {
        for (i, v) in part? {
            values[i * d..(i + 1) * d].copy_from_slice(&v);
        }
    }
    Ok(values)
}
