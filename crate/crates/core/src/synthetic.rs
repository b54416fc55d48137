//! Deterministic synthetic images and mixture samples for tests and demos.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adapt::{adapt, AdaptationConfig};
use crate::em::{em_fit, EmConfig};
use crate::error::{Error, Result};
use crate::gmm::Gmm;
use crate::image::ImageBuffer;
use crate::patches::PatchSet;

/// 64x64 piecewise-constant test image: rectangles and disks on a flat
/// background.
pub fn smoke_image() -> ImageBuffer {
    ImageBuffer::from_fn(64, 64, |r, c| {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        let disk = |cy: f64, cx: f64, rad: f64| (y - cy).powi(2) + (x - cx).powi(2) <= rad * rad;
        if disk(44.0, 44.0, 12.0) {
            40.0
        } else if (6..28).contains(&r) && (8..40).contains(&c) {
            if (14..20).contains(&r) && (16..30).contains(&c) {
                230.0
            } else {
                180.0
            }
        } else if disk(18.0, 52.0, 7.0) {
            130.0
        } else if (38..60).contains(&r) && (4..22).contains(&c) {
            200.0
        } else {
            90.0
        }
    })
    .expect("fixed dimensions")
}

enum Shape {
    Rect { r0: f64, c0: f64, r1: f64, c1: f64 },
    Disk { cy: f64, cx: f64, rad: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { r0, c0, r1, c1 } => y >= r0 && y < r1 && x >= c0 && x < c1,
            Shape::Disk { cy, cx, rad } => (y - cy).powi(2) + (x - cx).powi(2) <= rad * rad,
        }
    }
}

enum Fill {
    Flat(f64),
    Gradient { base: f64, gy: f64, gx: f64 },
    Stripes { base: f64, amp: f64, fy: f64, fx: f64 },
}

impl Fill {
    fn at(&self, y: f64, x: f64) -> f64 {
        match *self {
            Fill::Flat(v) => v,
            Fill::Gradient { base, gy, gx } => base + gy * y + gx * x,
            Fill::Stripes { base, amp, fy, fx } => base + amp * (fy * y + fx * x).sin(),
        }
    }
}

/// A random scene of overlapping flat, shaded and striped shapes over a
/// smooth background, clamped to `[0, 255]`.
pub fn scene(width: usize, height: usize, seed: u64) -> Result<ImageBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let background = Fill::Gradient {
        base: rng.random_range(40.0..200.0),
        gy: rng.random_range(-0.4..0.4),
        gx: rng.random_range(-0.4..0.4),
    };
    let count = rng.random_range(6..12);
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = if rng.random_bool(0.5) {
            let (r0, c0) = (rng.random_range(-0.1 * h..h), rng.random_range(-0.1 * w..w));
            let (rh, cw) = (rng.random_range(0.1 * h..0.5 * h), rng.random_range(0.1 * w..0.5 * w));
            Shape::Rect { r0, c0, r1: r0 + rh, c1: c0 + cw }
        } else {
            Shape::Disk {
                cy: rng.random_range(0.0..h),
                cx: rng.random_range(0.0..w),
                rad: rng.random_range(0.05..0.3) * w.min(h),
            }
        };
        let base = rng.random_range(10.0..245.0);
        let fill = match rng.random_range(0..3) {
            0 => Fill::Flat(base),
            1 => Fill::Gradient {
                base,
                gy: rng.random_range(-1.0..1.0),
                gx: rng.random_range(-1.0..1.0),
            },
            _ => {
                let period = rng.random_range(4.0..12.0);
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let f = std::f64::consts::TAU / period;
                Fill::Stripes {
                    base,
                    amp: rng.random_range(10.0..40.0),
                    fy: f * angle.sin(),
                    fx: f * angle.cos(),
                }
            }
        };
        layers.push((shape, fill));
    }
    ImageBuffer::from_fn(width, height, |r, c| {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        let v = layers
            .iter()
            .rev()
            .find(|(s, _)| s.contains(y, x))
            .map_or_else(|| background.at(y, x), |(_, f)| f.at(y, x));
        v.clamp(0.0, 255.0)
    })
}

/// `n` independent draws from `gmm`.
pub fn sample_gmm(gmm: &Gmm, n: usize, rng: &mut impl Rng) -> Result<PatchSet> {
    let d = gmm.dim();
    let lowers = gmm
        .covariances()
        .iter()
        .enumerate()
        .map(|(k, c)| c.clone().cholesky().map(|ch| ch.l()).ok_or(Error::IllConditioned { component: k }))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut k = 0;
        let mut acc = gmm.weights()[0];
        while u >= acc && k + 1 < gmm.components() {
            k += 1;
            acc += gmm.weights()[k];
        }
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let x = &gmm.means()[k] + &lowers[k] * z;
        data.extend(x.iter());
    }
    PatchSet::from_rows(d, data)
}

fn rotated(var_major: f64, var_minor: f64, angle_deg: f64) -> DMatrix<f64> {
    let t = angle_deg.to_radians();
    let r = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
    let l = DMatrix::from_diagonal(&DVector::from_vec(vec![var_major, var_minor]));
    crate::gmm::symmetrize(&(&r * l * r.transpose()))
}

/// The two-cluster 2-D models of the toy demo: an external model and a
/// shifted, re-weighted and rotated target model.
pub fn toy_models() -> (Gmm, Gmm) {
    let external = Gmm::new(
        vec![0.5, 0.5],
        vec![DVector::from_vec(vec![-1.5, 0.0]), DVector::from_vec(vec![1.5, 0.0])],
        vec![rotated(4.0, 0.25, 45.0), rotated(4.0, 0.25, -45.0)],
    )
    .expect("valid toy model");
    let target = Gmm::new(
        vec![0.4, 0.6],
        vec![DVector::from_vec(vec![-1.0, 1.0]), DVector::from_vec(vec![2.0, 0.5])],
        vec![rotated(4.0, 0.25, 60.0), rotated(4.0, 0.25, -30.0)],
    )
    .expect("valid toy model");
    (external, target)
}

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub external_points: PatchSet,
    pub target_points: PatchSet,
    pub generic: Gmm,
    pub scratch: Gmm,
    pub adapted: Gmm,
    /// Mean-parameter error of the scratch fit against the target model.
    pub scratch_error: f64,
    pub adapted_error: f64,
}

/// Fit the external model to `external_n` points, then estimate the target
/// model from `target_n` points both from scratch and by adaptation.
pub fn run_toy(seed: u64, external_n: usize, target_n: usize, rho: f64) -> Result<ToyOutcome> {
    let (external, target) = toy_models();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let external_points = sample_gmm(&external, external_n, &mut rng)?;
    let target_points = sample_gmm(&target, target_n, &mut rng)?;
    let em = EmConfig {
        components: 2,
        seed,
        max_iters: 200,
        ..EmConfig::default()
    };
    let generic = em_fit(&external_points, &em)?.gmm;
    let scratch = em_fit(&target_points, &em)?.gmm;
    let (adapted, _) = adapt(
        &generic,
        &target_points,
        &AdaptationConfig {
            rho,
            ..AdaptationConfig::default()
        },
    )?;
    let scratch_error = mean_error(&scratch, &target);
    let adapted_error = mean_error(&adapted, &target);
    Ok(ToyOutcome {
        external_points,
        target_points,
        generic,
        scratch,
        adapted,
        scratch_error,
        adapted_error,
    })
}

/// `min over component matchings of sum_k ||mu_k - mu'_{m(k)}||`.
pub fn mean_error(estimate: &Gmm, truth: &Gmm) -> f64 {
    fn best(est: &[DVector<f64>], truth: &[DVector<f64>], used: &mut Vec<bool>, k: usize) -> f64 {
        if k == est.len() {
            return 0.0;
        }
        let mut out = f64::INFINITY;
        for j in 0..truth.len() {
            if !used[j] {
                used[j] = true;
                out = out.min((&est[k] - &truth[j]).norm() + best(est, truth, used, k + 1));
                used[j] = false;
            }
        }
        out
    }
    best(estimate.means(), truth.means(), &mut vec![false; truth.components()], 0)
}
