//! Image and geometry metrics.

use crate::error::{Error, Result};
use crate::losses::{FeatureEncoder, IdentityEmbedder};
use crate::numcore::{Real, Tape};
use crate::renderer::{CameraPose, Field, RenderedImage};
use crate::synthworld::{gt_field, ExpressionParams, IdentityParams};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Default probe grid resolution for [`geometry_error`].
pub const GEOMETRY_GRID: usize = 32;
/// Occupancy spacing `Δ`; the spacing of the default grid, held fixed when
/// the grid is refined so values stay comparable.
pub const GEOMETRY_DELTA: f64 = 1.0 / GEOMETRY_GRID as f64;

fn check_same(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidArgument(format!("image shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for images in `[0, 1]`, capped at 99 dB.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    check_same(a, b)?;
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM over all 8×8 sliding windows and channels, uniform weights,
/// stabilizers `(0.01)²` and `(0.03)²`. Images smaller than the window use a
/// single window covering the whole image.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    check_same(a, b)?;
    let (h, w, ch) = a.dim();
    let wh = SSIM_WINDOW.min(h);
    let ww = SSIM_WINDOW.min(w);
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        for i in 0..=(h - wh) {
            for j in 0..=(w - ww) {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for di in 0..wh {
                    for dj in 0..ww {
                        let x = a[[i + di, j + dj, c]];
                        let y = b[[i + di, j + dj, c]];
                        sa += x;
                        sb += y;
                        saa += x * x;
                        sbb += y * y;
                        sab += x * y;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                total += s;
                count += 1;
            }
        }
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}

/// Cosine similarity of identity embeddings.
pub fn id_similarity<R: Real>(emb: &IdentityEmbedder<R>, a: &RenderedImage, b: &RenderedImage) -> f64 {
    let ea = emb.embed_image(a);
    let eb = emb.embed_image(b);
    let dot: f64 = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
    let na = ea.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = eb.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn gaussian_fit(feats: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = feats[0].len();
    let n = feats.len() as f64;
    let mut mean = DVector::zeros(d);
    for f in feats {
        mean += DVector::from_column_slice(f);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for f in feats {
        let x = DVector::from_column_slice(f) - &mean;
        cov += &x * x.transpose();
    }
    cov /= n - 1.0;
    (mean, cov)
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from rounding are clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("feature-Fréchet needs at least two images per set".into()));
    }
    let (ma, ca) = gaussian_fit(a);
    let (mb, cb) = gaussian_fit(b);
    let ra = psd_sqrt(&ca);
    let cross = psd_sqrt(&(&ra * &cb * &ra));
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Fréchet distance of pooled [`FeatureEncoder`] features.
pub fn feature_frechet<R: Real>(enc: &FeatureEncoder<R>, a: &[RenderedImage], b: &[RenderedImage]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("feature-Fréchet needs at least two images per set".into()));
    }
    let fa: Vec<_> = a.iter().map(|i| enc.pooled(i)).collect();
    let fb: Vec<_> = b.iter().map(|i| enc.pooled(i)).collect();
    frechet_distance(&fa, &fb)
}

/// Cell centers of an `n³` grid over `[−0.5, 0.5]³`.
pub fn probe_grid(n: usize) -> Vec<[f64; 3]> {
    let step = 1.0 / n as f64;
    let coord = |k: usize| -0.5 + (k as f64 + 0.5) * step;
    let mut pts = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                pts.push([coord(i), coord(j), coord(k)]);
            }
        }
    }
    pts
}

/// Densities of `field` at `points`, evaluated in chunks.
pub fn field_densities<R: Real, F>(field: &F, points: &[[f64; 3]]) -> Result<Vec<f64>>
where
    F: for<'t> Field<'t, R>,
{
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(8192) {
        let tape = Tape::<R>::new();
        let x = ArrayD::from_shape_fn(IxDyn(&[chunk.len(), 3]), |ix| R::lit(chunk[ix[0]][ix[1]]));
        let (sigma, _) = field.eval(&tape, tape.constant(x))?;
        tape.check()?;
        out.extend(sigma.value().iter().map(|v| v.f64()));
    }
    Ok(out)
}

pub fn occupancy(sigma: f64) -> f64 {
    1.0 - (-sigma * GEOMETRY_DELTA).exp()
}

/// Occupancy MSE between `field` and the analytic head on an `n³` grid.
pub fn geometry_error_with_grid<R: Real, F>(field: &F, gt: &IdentityParams, e: &ExpressionParams, n: usize) -> Result<f64>
where
    F: for<'t> Field<'t, R>,
{
    let pts = probe_grid(n);
    let sig = field_densities::<R, F>(field, &pts)?;
    let total: f64 = pts
        .iter()
        .zip(&sig)
        .map(|(x, &s)| (occupancy(s) - occupancy(gt_field(gt, e, *x).sigma)).powi(2))
        .sum();
    Ok(total / pts.len() as f64)
}

/// Occupancy MSE on the default 32³ grid.
pub fn geometry_error<R: Real, F>(field: &F, gt: &IdentityParams, e: &ExpressionParams) -> Result<f64>
where
    F: for<'t> Field<'t, R>,
{
    geometry_error_with_grid::<R, F>(field, gt, e, GEOMETRY_GRID)
}

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Probe grid resolution per axis for the geometry error.
    pub geometry_grid: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            geometry_grid: GEOMETRY_GRID,
        }
    }
}

/// Metrics of one rendered novel view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewMetrics {
    pub yaw: f64,
    pub pitch: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub id_similarity: f64,
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub recon_psnr: f64,
    pub recon_ssim: f64,
    pub recon_id_similarity: f64,
    pub novel_psnr: f64,
    pub novel_ssim: f64,
    pub id_similarity: f64,
    pub feature_frechet: f64,
    pub geometry_error: f64,
    pub per_view: Vec<ViewMetrics>,
}

impl MetricsReport {
    /// Top-level keys in serialization order.
    pub const KEYS: [&'static str; 9] = [
        "recon_psnr",
        "recon_ssim",
        "recon_id_similarity",
        "novel_psnr",
        "novel_ssim",
        "id_similarity",
        "feature_frechet",
        "geometry_error",
        "per_view",
    ];
}

/// Everything needed to score a fitted field against the analytic world.
pub struct Evaluation<'a, R: Real> {
    pub encoder: &'a FeatureEncoder<R>,
    pub embedder: &'a IdentityEmbedder<R>,
    pub input: &'a RenderedImage,
    pub recon: &'a RenderedImage,
    /// `(pose, rendered, ground truth)` for every novel view.
    pub novel: &'a [(CameraPose, RenderedImage, RenderedImage)],
}

impl<R: Real> Evaluation<'_, R> {
    /// Builds the report; `geometry` is the precomputed occupancy error.
    pub fn report(&self, geometry: f64) -> Result<MetricsReport> {
        let mut per_view = Vec::with_capacity(self.novel.len());
        for (pose, got, gt) in self.novel {
            per_view.push(ViewMetrics {
                yaw: pose.yaw,
                pitch: pose.pitch,
                psnr: psnr(&got.rgb, &gt.rgb)?,
                ssim: ssim(&got.rgb, &gt.rgb)?,
                id_similarity: id_similarity(self.embedder, got, self.input),
            });
        }
        let mean = |f: fn(&ViewMetrics) -> f64| {
            if per_view.is_empty() {
                0.0
            } else {
                per_view.iter().map(f).sum::<f64>() / per_view.len() as f64
            }
        };
        let fre = if self.novel.len() >= 2 {
            let got: Vec<_> = self.novel.iter().map(|v| v.1.clone()).collect();
            let gt: Vec<_> = self.novel.iter().map(|v| v.2.clone()).collect();
            feature_frechet(self.encoder, &got, &gt)?
        } else {
            0.0
        };
        Ok(MetricsReport {
            recon_psnr: psnr(&self.recon.rgb, &self.input.rgb)?,
            recon_ssim: ssim(&self.recon.rgb, &self.input.rgb)?,
            recon_id_similarity: id_similarity(self.embedder, self.recon, self.input),
            novel_psnr: mean(|v| v.psnr),
            novel_ssim: mean(|v| v.ssim),
            id_similarity: mean(|v| v.id_similarity),
            feature_frechet: fre,
            geometry_error: geometry,
            per_view,
        })
    }
}
