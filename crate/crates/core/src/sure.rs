//! Monte-Carlo SURE estimate of the residual noise left by a denoiser.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// ChaCha stream used for probe vectors. Noise synthesis uses stream 0, so a
/// probe never coincides with the noise drawn from the same numeric seed.
pub const PROBE_STREAM: u64 = 1;

fn probe_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PROBE_STREAM);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct SureConfig {
    /// Probe perturbation amplitude.
    pub delta: f64,
    pub seed: u64,
    /// Lower bound on the returned variance.
    pub floor: f64,
    /// Number of probe vectors averaged in the divergence estimate.
    pub probes: usize,
}

impl Default for SureConfig {
    fn default() -> Self {
        Self {
            delta: 0.01,
            seed: 0,
            floor: 1.0,
            probes: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SureEstimate {
    /// `max(floor, raw)`.
    pub sigma_tilde_sq: f64,
    /// Unfloored risk estimate.
    pub raw: f64,
    /// Monte-Carlo estimate of the divergence of the denoiser at `y`.
    pub divergence: f64,
    /// `||y - x||^2 / n`.
    pub residual: f64,
    /// The denoised image `x`.
    pub denoised: ImageBuffer,
}

/// Estimate the mean squared error of `denoiser(y)` against the unknown clean
/// image, given white Gaussian noise of standard deviation `sigma` in `y`.
pub fn estimate_sigma_tilde_sq<F>(y: &ImageBuffer, sigma: f64, denoiser: F, config: &SureConfig) -> Result<f64>
where
    F: Fn(&ImageBuffer) -> Result<ImageBuffer>,
{
    sure(y, sigma, denoiser, config).map(|e| e.sigma_tilde_sq)
}

/// As [`estimate_sigma_tilde_sq`], returning the intermediate quantities.
pub fn sure<F>(y: &ImageBuffer, sigma: f64, denoiser: F, config: &SureConfig) -> Result<SureEstimate>
where
    F: Fn(&ImageBuffer) -> Result<ImageBuffer>,
{
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("sigma must be finite and > 0, got {sigma}")));
    }
    if !(config.delta > 0.0) || !config.delta.is_finite() {
        return Err(Error::InvalidParameter(format!("delta must be finite and > 0, got {}", config.delta)));
    }
    if config.probes == 0 {
        return Err(Error::InvalidParameter("probes must be >= 1".into()));
    }
    if !(config.floor >= 0.0) {
        return Err(Error::InvalidParameter(format!("floor must be >= 0, got {}", config.floor)));
    }

    let n = y.len() as f64;
    let x = denoiser(y)?;
    y.check_shape(&x)?;

    let mut rng = probe_rng(config.seed);
    let mut div_sum = 0.0;
    for _ in 0..config.probes {
        let b: Vec<f64> = (0..y.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let perturbed: Vec<f64> = y.pixels().iter().zip(&b).map(|(v, e)| v + config.delta * e).collect();
        let xp = denoiser(&ImageBuffer::new(y.width(), y.height(), perturbed)?)?;
        y.check_shape(&xp)?;
        let dot: f64 = b
            .iter()
            .zip(xp.pixels().iter().zip(x.pixels()))
            .map(|(bi, (a, c))| bi * (a - c))
            .sum();
        div_sum += dot / config.delta;
    }
    let divergence = div_sum / config.probes as f64;
    if !divergence.is_finite() {
        return Err(Error::NonFiniteDivergence);
    }

    let residual = y.mse(&x)?;
    let s2 = sigma * sigma;
    let raw = residual - s2 + 2.0 * s2 * divergence / n;
    Ok(SureEstimate {
        sigma_tilde_sq: raw.max(config.floor),
        raw,
        divergence,
        residual,
        denoised: x,
    })
}
