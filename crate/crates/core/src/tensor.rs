//! Dense containers shared by the rest of the crate: images, covariance
//! matrices with their Cholesky factor, and contrast vectors.
//!
//! Pixels are stored row-major everywhere.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A single-channel image, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array1<f64>,
    height: usize,
    width: usize,
}

impl Image {
    pub fn new(pixels: Array1<f64>, height: usize, width: usize) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::Domain("image must have at least one pixel".into()));
        }
        if height * width != pixels.len() {
            return Err(Error::shape(height * width, pixels.len()));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("image contains non-finite pixels".into()));
        }
        Ok(Self {
            pixels,
            height,
            width,
        })
    }

    /// Square image when `n` is a perfect square, otherwise a single row.
    pub fn from_flat(pixels: Array1<f64>) -> Result<Self> {
        let (h, w) = image_shape(pixels.len());
        Self::new(pixels, h, w)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            pixels: Array1::zeros(height * width),
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &Array1<f64> {
        &self.pixels
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.pixels.view()
    }

    pub fn into_pixels(self) -> Array1<f64> {
        self.pixels
    }
}

/// `(height, width)` used for a flat vector of `n` pixels.
pub fn image_shape(n: usize) -> (usize, usize) {
    let side = (n as f64).sqrt().round() as usize;
    if side * side == n {
        (side, side)
    } else {
        (1, n)
    }
}

/// Symmetric positive definite covariance with a cached lower Cholesky
/// factor.
#[derive(Debug, Clone)]
pub struct CovMatrix {
    entries: Array2<f64>,
    lower: Array2<f64>,
}

impl CovMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let n = entries.nrows();
        if n == 0 || entries.ncols() != n {
            return Err(Error::Factorization(format!(
                "covariance must be square and non-empty, got {}x{}",
                n,
                entries.ncols()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Factorization("non-finite covariance entry".into()));
        }
        let scale = entries.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            if entries[[i, i]] <= 0.0 {
                return Err(Error::Factorization(format!(
                    "diagonal entry {i} is not positive"
                )));
            }
            for j in 0..i {
                if (entries[[i, j]] - entries[[j, i]]).abs() > 1e-12 * scale {
                    return Err(Error::Factorization(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        match cholesky(&entries) {
            Ok(lower) => Ok(Self { entries, lower }),
            Err(_) => {
                let jitter = 1e-10 * entries.diag().sum() / n as f64;
                let mut jittered = entries;
                jittered.diag_mut().mapv_inplace(|d| d + jitter);
                let lower = cholesky(&jittered)?;
                Ok(Self {
                    entries: jittered,
                    lower,
                })
            }
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            entries: Array2::eye(n),
            lower: Array2::eye(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn cholesky_factor(&self) -> &Array2<f64> {
        &self.lower
    }

    pub fn mul_vec(&self, v: &Array1<f64>) -> Result<Array1<f64>> {
        check_dim(self.dim(), v.len())?;
        Ok(self.entries.dot(v))
    }

    /// `vᵀ Σ v`.
    pub fn quad_form(&self, v: &Array1<f64>) -> Result<f64> {
        Ok(v.dot(&self.mul_vec(v)?))
    }

    /// Solve `Σ w = v` with the cached factor.
    pub fn solve(&self, v: &Array1<f64>) -> Result<Array1<f64>> {
        check_dim(self.dim(), v.len())?;
        let n = self.dim();
        let l = &self.lower;
        let mut y = v.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[[i, k]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[[k, i]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        Ok(y)
    }
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::shape(expected, actual));
    }
    Ok(())
}

/// Unpivoted Cholesky factorization, `M = L Lᵀ`.
pub fn cholesky(m: &Array2<f64>) -> Result<Array2<f64>> {
    let n = m.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = m[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Factorization(format!(
                "matrix is not positive definite (pivot {j} = {d:e})"
            )));
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in j + 1..n {
            let mut s = m[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    Ok(l)
}

/// Solve `M w = v` using the factor cached in `M`.
pub fn cholesky_solve(m: &CovMatrix, v: &Array1<f64>) -> Result<Array1<f64>> {
    m.solve(v)
}

/// `AR(1) ⊗ AR(1)` covariance for a `side × side` image, with
/// `AR(1)_{ij} = rho^{|i-j|}`.
pub fn ar1_kron_cov(side: usize, rho: f64) -> Result<CovMatrix> {
    if side == 0 {
        return Err(Error::Domain("side must be at least 1".into()));
    }
    if !(rho.abs() < 1.0) {
        return Err(Error::Domain(format!("|rho| must be < 1, got {rho}")));
    }
    let ar: Vec<f64> = (0..side).map(|k| rho.powi(k as i32)).collect();
    let n = side * side;
    let entries = Array2::from_shape_fn((n, n), |(p, q)| {
        let (r1, c1) = (p / side, p % side);
        let (r2, c2) = (q / side, q % side);
        ar[r1.abs_diff(r2)] * ar[c1.abs_diff(c2)]
    });
    CovMatrix::new(entries)
}

/// Draw `mean + L ξ` with `ξ` standard normal; deterministic for a seed.
pub fn sample_gaussian(mean: &Image, cov: &CovMatrix, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_gaussian_with(mean, cov, &mut rng)
}

pub fn sample_gaussian_with<R: Rng + ?Sized>(
    mean: &Image,
    cov: &CovMatrix,
    rng: &mut R,
) -> Result<Image> {
    check_dim(cov.dim(), mean.len())?;
    let xi: Array1<f64> = (0..mean.len()).map(|_| rng.sample(StandardNormal)).collect();
    let noise = lower_mul(cov.cholesky_factor(), &xi);
    Image::new(mean.pixels() + &noise, mean.height(), mean.width())
}

fn lower_mul(l: &Array2<f64>, v: &Array1<f64>) -> Array1<f64> {
    let n = v.len();
    Array1::from_shape_fn(n, |i| (0..=i).map(|k| l[[i, k]] * v[k]).sum())
}

/// Contrast vector `η` defining the test statistic `ηᵀx`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastVector(Array1<f64>);

impl ContrastVector {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.iter().all(|&v| v == 0.0) {
            return Err(Error::Domain("contrast vector is identically zero".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(&self.0 * factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_spd(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_fn((n, n), |_| rng.sample::<f64, _>(StandardNormal));
        a.dot(&a.t()) + Array2::<f64>::eye(n) * 0.5
    }

    #[test]
    fn solve_identity_and_scalar() {
        let id = CovMatrix::identity(3);
        assert_eq!(
            cholesky_solve(&id, &array![1.0, 2.0, 3.0]).unwrap(),
            array![1.0, 2.0, 3.0]
        );
        let four = CovMatrix::new(array![[4.0]]).unwrap();
        assert_eq!(cholesky_solve(&four, &array![8.0]).unwrap(), array![2.0]);
    }

    #[test]
    fn solve_random_spd_residual() {
        let m = random_spd(5, 7);
        let cov = CovMatrix::new(m.clone()).unwrap();
        let v = array![0.3, -1.2, 2.0, 0.7, -0.1];
        let w = cholesky_solve(&cov, &v).unwrap();
        let resid = &m.dot(&w) - &v;
        let rel = resid.dot(&resid).sqrt() / v.dot(&v).sqrt();
        assert!(rel <= 1e-10, "relative residual {rel}");
    }

    #[test]
    fn non_pd_is_rejected() {
        assert!(matches!(
            CovMatrix::new(Array2::zeros((2, 2))),
            Err(Error::Factorization(_))
        ));
        assert!(CovMatrix::new(array![[1.0, 2.0], [2.0, 1.0]]).is_err());
        assert!(CovMatrix::new(array![[1.0, 0.5], [0.4, 1.0]]).is_err());
    }

    #[test]
    fn ar1_kron_two_by_two() {
        let cov = ar1_kron_cov(2, 0.25).unwrap();
        // pixel (0,0) is index 0, pixel (1,1) is index 3
        assert!((cov.entries()[[0, 3]] - 0.0625).abs() < 1e-15);
        assert!((cov.entries()[[0, 1]] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ar1_kron_rho_zero_is_identity() {
        let cov = ar1_kron_cov(4, 0.0).unwrap();
        assert_eq!(cov.entries(), &Array2::<f64>::eye(16));
    }

    #[test]
    fn ar1_kron_matches_elementwise_formula() {
        let rho: f64 = 0.25;
        let cov = ar1_kron_cov(3, rho).unwrap();
        for i1 in 0..3 {
            for i2 in 0..3 {
                for j1 in 0..3 {
                    for j2 in 0..3 {
                        let expected = rho.powi((i1 as i32 - j1 as i32).abs() + (i2 as i32 - j2 as i32).abs());
                        let got = cov.entries()[[i1 * 3 + i2, j1 * 3 + j2]];
                        assert!((got - expected).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn ar1_kron_rejects_unit_rho() {
        assert!(matches!(ar1_kron_cov(3, 1.0), Err(Error::Domain(_))));
        assert!(matches!(ar1_kron_cov(3, -1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn ar1_kron_is_symmetric_and_pd_over_range() {
        for &side in &[1usize, 2, 5, 8] {
            for &rho in &[-0.9, -0.3, 0.0, 0.25, 0.9] {
                let cov = ar1_kron_cov(side, rho).unwrap();
                let e = cov.entries();
                assert_eq!(e, &e.t().to_owned());
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let cov = ar1_kron_cov(3, 0.25).unwrap();
        let mean = Image::zeros(3, 3);
        let a = sample_gaussian(&mean, &cov, 11).unwrap();
        let b = sample_gaussian(&mean, &cov, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_gaussian(&mean, &cov, 12).unwrap());
    }

    #[test]
    fn sample_mean_and_covariance_converge() {
        let side = 3;
        let n = side * side;
        let cov = ar1_kron_cov(side, 0.25).unwrap();
        let mean = Image::zeros(side, side);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 100_000;
        let mut sum = Array1::<f64>::zeros(n);
        let mut outer = Array2::<f64>::zeros((n, n));
        for _ in 0..draws {
            let x = sample_gaussian_with(&mean, &cov, &mut rng).unwrap().into_pixels();
            sum += &x;
            for i in 0..n {
                for j in 0..n {
                    outer[[i, j]] += x[i] * x[j];
                }
            }
        }
        let bound = 4.0 / (draws as f64).sqrt();
        for &s in sum.iter() {
            assert!((s / draws as f64).abs() < bound);
        }
        let emp = outer / draws as f64;
        let diff = &emp - cov.entries();
        let rel = diff.iter().map(|d| d * d).sum::<f64>().sqrt()
            / cov.entries().iter().map(|d| d * d).sum::<f64>().sqrt();
        assert!(rel < 0.05, "frobenius relative error {rel}");
    }

    #[test]
    fn image_rejects_bad_input() {
        assert!(Image::new(Array1::zeros(0), 0, 0).is_err());
        assert!(Image::new(array![1.0, f64::NAN], 1, 2).is_err());
        assert!(Image::new(array![1.0, 2.0, 3.0], 2, 2).is_err());
    }

    #[test]
    fn zero_contrast_rejected() {
        assert!(ContrastVector::new(Array1::zeros(3)).is_err());
    }
}
