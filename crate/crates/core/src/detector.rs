//! Hypotheses built from detections: the anomaly region, the mean-contrast
//! vector `η`, the test statistic, and the synthetic image model used by the
//! experiments.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{image_shape, sample_gaussian_with, ContrastVector, CovMatrix, Image};

/// Sorted set of anomalous pixel indices within `[0, n)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct AnomalyRegion {
    indices: Vec<usize>,
    n: usize,
}

impl AnomalyRegion {
    pub fn new(mut indices: Vec<usize>, n: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&last) = indices.last() {
            if last >= n {
                return Err(Error::Domain(format!("pixel index {last} out of range for n = {n}")));
            }
        }
        Ok(Self { indices, n })
    }

    pub fn from_mask(mask: impl IntoIterator<Item = bool>) -> Self {
        let mut n = 0;
        let mut indices = Vec::new();
        for (i, inside) in mask.into_iter().enumerate() {
            if inside {
                indices.push(i);
            }
            n = i + 1;
        }
        Self { indices, n }
    }

    pub fn empty(n: usize) -> Self {
        Self {
            indices: Vec::new(),
            n,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn complement_len(&self) -> usize {
        self.n - self.indices.len()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// `0 < |A| < n`.
    pub fn is_testable(&self) -> bool {
        !self.indices.is_empty() && self.indices.len() < self.n
    }
}

/// `η = 1_A / |A| - 1_{A^c} / |A^c|`.
pub fn build_eta(region: &AnomalyRegion, n: usize) -> Result<ContrastVector> {
    if region.n() != n {
        return Err(Error::shape(n, region.n()));
    }
    if !region.is_testable() {
        return Err(Error::UndefinedHypothesis {
            region_size: region.len(),
            n,
        });
    }
    let inside = 1.0 / region.len() as f64;
    let outside = -1.0 / region.complement_len() as f64;
    let mut eta = Array1::from_elem(n, outside);
    for &i in region.indices() {
        eta[i] = inside;
    }
    ContrastVector::new(eta)
}

/// `(ηᵀx, ηᵀΣη)`.
pub fn test_statistic(eta: &ContrastVector, x: &Image, cov: &CovMatrix) -> Result<(f64, f64)> {
    if eta.len() != x.len() {
        return Err(Error::shape(eta.len(), x.len()));
    }
    let variance = cov.quad_form(eta.values())?;
    if !(variance > 0.0) {
        return Err(Error::Domain(format!("test statistic variance is {variance}")));
    }
    Ok((eta.values().dot(x.pixels()), variance))
}

/// The selected hypothesis `H0: ηᵀs = null_value`.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub eta: ContrastVector,
    pub region: AnomalyRegion,
    pub variance: f64,
    pub observed: f64,
    pub null_value: f64,
}

impl Hypothesis {
    pub fn new(region: AnomalyRegion, x: &Image, cov: &CovMatrix) -> Result<Self> {
        let eta = build_eta(&region, x.len())?;
        let (observed, variance) = test_statistic(&eta, x, cov)?;
        Ok(Self {
            eta,
            region,
            variance,
            observed,
            null_value: 0.0,
        })
    }

    pub fn with_null_value(mut self, c: f64) -> Self {
        self.null_value = c;
        self
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Image `s + ε` with `s = Δ` on a square patch of `region_size` pixels placed
/// uniformly at random, zero elsewhere, and `ε ~ N(0, Σ)`.
pub fn make_synthetic(
    n: usize,
    delta: f64,
    region_size: usize,
    cov: &CovMatrix,
    seed: u64,
) -> Result<(Image, AnomalyRegion)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (signal, region) = planted_signal(n, delta, region_size, &mut rng)?;
    if cov.dim() != n {
        return Err(Error::shape(n, cov.dim()));
    }
    let x = sample_gaussian_with(&signal, cov, &mut rng)?;
    Ok((x, region))
}

/// The noiseless signal image and its true region, drawing the patch
/// location from `rng`.
pub fn planted_signal<R: Rng + ?Sized>(
    n: usize,
    delta: f64,
    region_size: usize,
    rng: &mut R,
) -> Result<(Image, AnomalyRegion)> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::Domain(format!("signal strength must be >= 0, got {delta}")));
    }
    let (height, width) = image_shape(n);
    if height != width {
        return Err(Error::Domain(format!("n = {n} is not a square image")));
    }
    let side = (region_size as f64).sqrt().round() as usize;
    if region_size == 0 || side * side != region_size || side > height {
        return Err(Error::Domain(format!(
            "a square patch of {region_size} pixels does not fit a {height}x{width} image"
        )));
    }
    let top = rng.random_range(0..=height - side);
    let left = rng.random_range(0..=width - side);
    let mut pixels = Array1::zeros(n);
    let mut indices = Vec::with_capacity(region_size);
    for r in top..top + side {
        for c in left..left + side {
            let i = r * width + c;
            pixels[i] = delta;
            indices.push(i);
        }
    }
    Ok((Image::new(pixels, height, width)?, AnomalyRegion::new(indices, n)?))
}

/// Sample covariance of held-out normal images plus diagonal loading of
/// `1e-6 · trace / n` (or `1e-6` when the sample covariance vanishes).
pub fn estimate_cov(held_out: &[Image]) -> Result<CovMatrix> {
    if held_out.len() < 2 {
        return Err(Error::Domain(format!(
            "need at least 2 images to estimate a covariance, got {}",
            held_out.len()
        )));
    }
    let n = held_out[0].len();
    if let Some(bad) = held_out.iter().find(|im| im.len() != n) {
        return Err(Error::shape(n, bad.len()));
    }
    let k = held_out.len();
    let mut data = Array2::<f64>::zeros((k, n));
    for (mut row, im) in data.rows_mut().into_iter().zip(held_out) {
        row.assign(im.pixels());
    }
    let mean = data.mean_axis(ndarray::Axis(0)).unwrap();
    data -= &mean;
    let mut cov = data.t().dot(&data) / (k - 1) as f64;
    let trace = cov.diag().sum();
    let loading = if trace > 0.0 { 1e-6 * trace / n as f64 } else { 1e-6 };
    cov.diag_mut().mapv_inplace(|d| d + loading);
    // symmetrize away rounding in the product
    let sym = (&cov + &cov.t()) * 0.5;
    CovMatrix::new(sym)
}
