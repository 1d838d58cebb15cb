//! FID, KID, PSNR and SSIM.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::autodiff::Real;
use crate::discriminators::AuxClassifier;
use crate::error::{ensure, Error, Result};
use crate::image::RgbImage;

const PSD_TOLERANCE: f64 = 1e-6;

/// Gaussian fit of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, n: usize) -> Result<Self> {
        let d = mean.len();
        ensure!(
            cov.nrows() == d && cov.ncols() == d,
            "feature stats: covariance is {}x{}, mean has {d} entries",
            cov.nrows(),
            cov.ncols()
        );
        ensure!(
            (&cov - cov.transpose()).amax() <= 1e-8 * cov.amax().max(1.0),
            "feature stats: covariance is not symmetric"
        );
        Ok(Self { mean, cov, n })
    }

    /// Sample mean and unbiased covariance of the rows.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(rows.len() >= 2, "feature stats: need at least 2 samples, got {}", rows.len());
        let d = rows[0].len();
        ensure!(d > 0 && rows.iter().all(|r| r.len() == d), "feature stats: ragged rows");
        let n = rows.len();
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
        cov = (&cov + cov.transpose()) * 0.5;
        Self::new(mean, cov, n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Eigen-decomposition based square root of a symmetric PSD matrix.
fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = m.amax().max(1.0);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -PSD_TOLERANCE * scale {
            return Err(Error::numeric("frechet_distance", format!("{what} has eigenvalue {v}")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `‖m_r − m_g‖² + Tr(C_r + C_g − 2(C_r C_g)^{1/2})`, with the trace of the
/// square root taken from the symmetric `C_r^{1/2} C_g C_r^{1/2}`.
pub fn frechet_distance(real: &FeatureStats, gen: &FeatureStats) -> Result<f64> {
    ensure!(
        real.dim() == gen.dim(),
        "frechet_distance: dimensions {} and {} differ",
        real.dim(),
        gen.dim()
    );
    let diff = (&real.mean - &gen.mean).norm_squared();
    let s = sqrt_psd(&real.cov, "real covariance")?;
    let mut m = &s * &gen.cov * &s;
    m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m.clone());
    let scale = m.amax().max(1.0);
    let mut tr_sqrt = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -PSD_TOLERANCE * scale {
            return Err(Error::numeric("frechet_distance", format!("product has eigenvalue {v}")));
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    let d = diff + real.cov.trace() + gen.cov.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(Error::numeric("frechet_distance", "non-finite result"));
    }
    Ok(d.max(0.0))
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    ensure!(d > 0 && rows.iter().all(|r| r.len() == d), "kid: ragged or empty rows");
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

/// Unbiased squared MMD with kernel `(xᵀy/dim + 1)³`.
pub fn kid(real: &[Vec<f64>], gen: &[Vec<f64>]) -> Result<f64> {
    ensure!(
        real.len() >= 2 && gen.len() >= 2,
        "kid: need at least 2 samples per set, got {} and {}",
        real.len(),
        gen.len()
    );
    let (x, y) = (to_matrix(real)?, to_matrix(gen)?);
    ensure!(x.ncols() == y.ncols(), "kid: feature dimensions differ");
    let dim = x.ncols() as f64;
    let kernel = |g: DMatrix<f64>| g.map(|v| (v / dim + 1.0).powi(3));
    let kxx = kernel(&x * x.transpose());
    let kyy = kernel(&y * y.transpose());
    let kxy = kernel(&x * y.transpose());
    let (m, n) = (x.nrows() as f64, y.nrows() as f64);
    let off = |k: &DMatrix<f64>| k.sum() - k.trace();
    Ok(off(&kxx) / (m * (m - 1.0)) + off(&kyy) / (n * (n - 1.0)) - 2.0 * kxy.sum() / (m * n))
}

fn same_shape(a: &RgbImage, b: &RgbImage) -> Result<()> {
    ensure!(
        a.width() == b.width() && a.height() == b.height(),
        "image sizes differ: {}x{} vs {}x{}",
        a.width(),
        a.height(),
        b.width(),
        b.height()
    );
    ensure!(!a.is_empty(), "empty images");
    Ok(())
}

/// `10·log10(max²/MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &RgbImage, b: &RgbImage, max_value: f64) -> Result<f64> {
    same_shape(a, b)?;
    ensure!(max_value > 0.0, "psnr: max value must be positive");
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

pub const SSIM_WINDOW: usize = 8;

/// Mean SSIM over all `8×8` windows (stride 1) and channels, with
/// population statistics per window. Images smaller than a window use one
/// window covering the whole image.
pub fn ssim(a: &RgbImage, b: &RgbImage, max_value: f64) -> Result<f64> {
    same_shape(a, b)?;
    ensure!(max_value > 0.0, "ssim: max value must be positive");
    let (w, h) = (a.width(), a.height());
    let (ww, wh) = (SSIM_WINDOW.min(w), SSIM_WINDOW.min(h));
    let c1 = (0.01 * max_value).powi(2);
    let c2 = (0.03 * max_value).powi(2);
    let (ad, bd) = (a.data(), b.data());
    let count = (ww * wh) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for c in 0..3 {
        for y0 in 0..=h - wh {
            for x0 in 0..=w - ww {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let i = (y * w + x) * 3 + c;
                        let (p, q) = (ad[i] as f64, bd[i] as f64);
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / count, sb / count);
                // no clamping: identical inputs then give exactly 1
                let va = saa / count - ma * ma;
                let vb = sbb / count - mb * mb;
                let cov = sab / count - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

/// Penultimate classifier activations, one row per image.
pub fn extract_features<T: Real>(images: &[&RgbImage], clf: &AuxClassifier<T>) -> Result<Vec<Vec<f64>>> {
    ensure!(clf.trained, "extract_features: classifier has not been trained");
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        out.extend(clf.predict(chunk)?.features);
    }
    Ok(out)
}
