//! Patch extraction (`P_i x`) and overlap-add accumulation (`sum_i P_i^T v_i`).

use nalgebra::DMatrixView;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Where each patch of a [`PatchSet`] came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGeometry {
    pub patch_size: usize,
    pub stride: usize,
    pub width: usize,
    pub height: usize,
    /// `(row, col)` of the top-left pixel of each patch.
    pub origins: Vec<(usize, usize)>,
}

/// `n` vectors of dimension `d`, stored row-major (one sample per row).
///
/// Patches extracted from an image carry a [`PatchGeometry`]; plain sample
/// sets built with [`PatchSet::from_rows`] do not.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    dim: usize,
    data: Vec<f64>,
    geometry: Option<PatchGeometry>,
}

impl PatchSet {
    pub fn from_rows(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidParameter(format!(
                "sample buffer of length {} does not hold a positive number of {dim}-vectors",
                data.len()
            )));
        }
        Ok(Self {
            dim,
            data,
            geometry: None,
        })
    }

    pub fn from_vectors<V: AsRef<[f64]>>(rows: &[V]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_rows(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn geometry(&self) -> Option<&PatchGeometry> {
        self.geometry.as_ref()
    }

    #[inline]
    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Column view (`d x n`): column `i` is patch `i`.
    pub fn columns(&self) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.data, self.dim, self.len())
    }

    /// Column view of patches `start..end`.
    pub fn columns_range(&self, start: usize, end: usize) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(
            &self.data[start * self.dim..end * self.dim],
            self.dim,
            end - start,
        )
    }

    /// Same geometry, new patch values (`v_i` in place of `P_i x`).
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::DimensionMismatch {
                expected: self.data.len(),
                found: data.len(),
            });
        }
        Ok(Self {
            dim: self.dim,
            data,
            geometry: self.geometry.clone(),
        })
    }

    /// A subset of rows (geometry is dropped).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.patch(i));
        }
        Self::from_rows(self.dim, data)
    }

    /// Concatenates sample sets of equal dimension (geometry is dropped).
    pub fn concat(sets: &[PatchSet]) -> Result<Self> {
        let dim = sets
            .first()
            .map(|s| s.dim)
            .ok_or_else(|| Error::InvalidParameter("no patch sets to concatenate".into()))?;
        let mut data = Vec::new();
        for s in sets {
            if s.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: s.dim,
                });
            }
            data.extend_from_slice(&s.data);
        }
        Self::from_rows(dim, data)
    }
}

/// Origins along one axis: every `stride`, plus the last valid origin so
/// the trailing border is covered.
fn axis_origins(extent: usize, patch_size: usize, stride: usize) -> Vec<usize> {
    let last = extent - patch_size;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if *v.last().unwrap() != last {
        v.push(last);
    }
    v
}

pub fn extract_patches(img: &ImageBuffer, patch_size: usize, stride: usize) -> Result<PatchSet> {
    if patch_size == 0 || stride == 0 {
        return Err(Error::InvalidParameter(format!(
            "patch size and stride must be positive (got {patch_size}, {stride})"
        )));
    }
    let (width, height) = (img.width(), img.height());
    if patch_size > width || patch_size > height {
        return Err(Error::PatchTooLarge {
            patch_size,
            width,
            height,
        });
    }
    let rows = axis_origins(height, patch_size, stride);
    let cols = axis_origins(width, patch_size, stride);
    let origins: Vec<(usize, usize)> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();

    let dim = patch_size * patch_size;
    let mut data = vec![0.0; origins.len() * dim];
    let pixels = img.pixels();
    data.par_chunks_mut(dim)
        .zip(origins.par_iter())
        .for_each(|(dst, &(r0, c0))| {
            for dr in 0..patch_size {
                let src = (r0 + dr) * width + c0;
                dst[dr * patch_size..(dr + 1) * patch_size]
                    .copy_from_slice(&pixels[src..src + patch_size]);
            }
        });

    Ok(PatchSet {
        dim,
        data,
        geometry: Some(PatchGeometry {
            patch_size,
            stride,
            width,
            height,
            origins,
        }),
    })
}

/// Overlap-add of patch values back onto a `width x height` canvas.
///
/// Returns `(sum_image, count_image)`; the count image is the diagonal of
/// `sum_i P_i^T P_i`.
pub fn accumulate_patches(
    patches: &PatchSet,
    width: usize,
    height: usize,
) -> Result<(ImageBuffer, ImageBuffer)> {
    let geo = patches.geometry().ok_or_else(|| {
        Error::InvalidParameter("patch set has no image geometry to accumulate onto".into())
    })?;
    if geo.width != width || geo.height != height {
        return Err(Error::DimensionMismatch {
            expected: geo.width * geo.height,
            found: width * height,
        });
    }
    let sum = overlap_add(patches.data(), geo);
    let count = coverage_counts(geo);
    Ok((
        ImageBuffer::new(width, height, sum)?,
        ImageBuffer::new(width, height, count)?,
    ))
}

pub(crate) fn overlap_add(values: &[f64], geo: &PatchGeometry) -> Vec<f64> {
    let s = geo.patch_size;
    let mut sum = vec![0.0; geo.width * geo.height];
    for (patch, &(r0, c0)) in values.chunks_exact(s * s).zip(&geo.origins) {
        for dr in 0..s {
            let dst = &mut sum[(r0 + dr) * geo.width + c0..][..s];
            for (d, v) in dst.iter_mut().zip(&patch[dr * s..(dr + 1) * s]) {
                *d += v;
            }
        }
    }
    sum
}

pub(crate) fn coverage_counts(geo: &PatchGeometry) -> Vec<f64> {
    let s = geo.patch_size;
    let mut count = vec![0.0; geo.width * geo.height];
    for &(r0, c0) in &geo.origins {
        for dr in 0..s {
            for c in &mut count[(r0 + dr) * geo.width + c0..][..s] {
                *c += 1.0;
            }
        }
    }
    count
}
