//! Differentiable volume rendering: pinhole rays, stratified sampling,
//! emission-absorption compositing with expected depth, input-view point
//! classification for masked rendering, and depth reprojection to point
//! clouds.

mod camera;

pub use camera::{cross, dot, gen_rays, norm, normalize, project, CameraFrame, CameraPose, RayBatch, Resolution, Vec3};

use crate::error::{Error, Result};
use crate::numcore::{Real, Tape, Var};
use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Guard for expected depth on (nearly) empty rays.
pub const DEPTH_EPS: f64 = 1e-10;

/// Color and density at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceSample {
    pub color: [f64; 3],
    pub sigma: f64,
}

/// A radiance field evaluated in batches on a tape.
///
/// `eval` maps `N×3` points to `N×1` densities and `N×3` colors.
pub trait Field<'t, R: Real> {
    fn eval(&self, tape: &'t Tape<R>, points: Var<'t, R>) -> Result<(Var<'t, R>, Var<'t, R>)>;
}

/// Binary foreground mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub resolution: Resolution,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn full(resolution: Resolution, value: bool) -> Self {
        Self {
            resolution,
            data: vec![value; resolution.pixels()],
        }
    }

    /// Pixels whose composited alpha exceeds one half.
    pub fn from_alpha(alpha: &Array2<f64>) -> Self {
        let (h, w) = alpha.dim();
        Self {
            resolution: Resolution { height: h, width: w },
            data: alpha.iter().map(|&a| a > 0.5).collect(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.resolution.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// Indices of set pixels.
    pub fn indices(&self) -> Vec<usize> {
        self.data.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }
}

/// Classification of a 3D point against the input view's mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointClass {
    Foreground,
    Background,
    /// Outside the input frustum; masked operations treat it as foreground.
    Unknown,
}

/// Projects `x` into the input view and reads the mask there.
pub fn classify_point(x: Vec3, input_pose: &CameraPose, input_mask: &Mask) -> PointClass {
    let res = input_mask.resolution;
    let Some((row, col, _)) = project(input_pose, res, x) else {
        return PointClass::Unknown;
    };
    if row < 0.0 || col < 0.0 || row >= res.height as f64 || col >= res.width as f64 {
        return PointClass::Unknown;
    }
    if input_mask.get(row as usize, col as usize) {
        PointClass::Foreground
    } else {
        PointClass::Background
    }
}

/// Input view used by masked rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedView {
    pub pose: CameraPose,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 64,
            near: 1.3,
            far: 2.7,
        }
    }
}

impl SamplingConfig {
    /// Cheaper sampling used for generator renders: 24 samples over a
    /// slab that still encloses every head.
    pub fn coarse() -> Self {
        Self {
            samples_per_ray: 24,
            near: 1.5,
            far: 2.5,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RenderOptions {
    pub sampling: SamplingConfig,
    /// Jitter samples within their strata; midpoints when `None`.
    pub jitter_seed: Option<u64>,
    pub masked: Option<MaskedView>,
}

impl RenderOptions {
    pub fn new(sampling: SamplingConfig) -> Self {
        Self {
            sampling,
            jitter_seed: None,
            masked: None,
        }
    }

    pub fn with_mask(mut self, masked: Option<MaskedView>) -> Self {
        self.masked = masked;
        self
    }
}

/// Rendered RGB, expected depth and alpha, all `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    /// `H×W×3` in `[0, 1]`.
    pub rgb: Array3<f64>,
    /// `H×W` expected depth along each ray.
    pub depth: Array2<f64>,
    /// `H×W` accumulated opacity.
    pub alpha: Array2<f64>,
}

impl RenderedImage {
    pub fn resolution(&self) -> Resolution {
        let (h, w) = self.alpha.dim();
        Resolution { height: h, width: w }
    }

    pub fn mask(&self) -> Mask {
        Mask::from_alpha(&self.alpha)
    }

    /// Pixel-major `(H·W)×3` copy of the colors.
    pub fn rgb_rows<R: Real>(&self) -> ArrayD<R> {
        let res = self.resolution();
        self.rgb
            .mapv(R::lit)
            .into_shape_with_order(IxDyn(&[res.pixels(), 3]))
            .expect("contiguous rgb")
    }

    pub fn from_rgb(rgb: Array3<f64>) -> Self {
        let (h, w, _) = rgb.dim();
        Self {
            rgb,
            depth: Array2::zeros((h, w)),
            alpha: Array2::ones((h, w)),
        }
    }
}

/// Differentiable render: `rays×5` rows of rgb, alpha, depth.
pub struct RenderVar<'t, R: Real> {
    pub out: Var<'t, R>,
    pub rays: Rc<RayBatch>,
}

impl<'t, R: Real> RenderVar<'t, R> {
    pub fn rgb(&self) -> Var<'t, R> {
        self.out.slice_cols(0, 3)
    }

    pub fn alpha(&self) -> Var<'t, R> {
        self.out.slice_cols(3, 1)
    }

    pub fn depth(&self) -> Var<'t, R> {
        self.out.slice_cols(4, 1)
    }

    pub fn resolution(&self) -> Resolution {
        self.rays.resolution
    }

    pub fn image(&self) -> RenderedImage {
        let v = self.out.value();
        let res = self.resolution();
        let (h, w) = (res.height, res.width);
        let mut rgb = Array3::zeros((h, w, 3));
        let mut depth = Array2::zeros((h, w));
        let mut alpha = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                for c in 0..3 {
                    rgb[[i, j, c]] = v[[k, c]].f64();
                }
                alpha[[i, j]] = v[[k, 3]].f64();
                depth[[i, j]] = v[[k, 4]].f64();
            }
        }
        RenderedImage { rgb, depth, alpha }
    }
}

/// Sample distances and segment lengths for every ray (`rays×samples`).
pub fn sample_distances(rays: usize, cfg: &SamplingConfig, jitter_seed: Option<u64>) -> (Array2<f64>, Array2<f64>) {
    let s = cfg.samples_per_ray;
    let delta = (cfg.far - cfg.near) / s as f64;
    let mut t = Array2::zeros((rays, s));
    let mut rng = jitter_seed.map(ChaCha8Rng::seed_from_u64);
    for r in 0..rays {
        for i in 0..s {
            let u = match rng.as_mut() {
                Some(rng) => rng.gen::<f64>(),
                None => 0.5,
            };
            t[[r, i]] = cfg.near + (i as f64 + u) * delta;
        }
    }
    (t, Array2::from_elem((rays, s), delta))
}

/// Renders `field` from `pose`. Sample points are constants; gradients flow
/// through the field's outputs only.
pub fn render_var<'t, R: Real, F: Field<'t, R> + ?Sized>(
    tape: &'t Tape<R>,
    field: &F,
    pose: &CameraPose,
    res: Resolution,
    opts: &RenderOptions,
) -> Result<RenderVar<'t, R>> {
    let cfg = &opts.sampling;
    if !(cfg.near < cfg.far) || cfg.samples_per_ray == 0 {
        return Err(Error::InvalidArgument(format!(
            "sampling requires near < far and samples > 0 (near {}, far {}, samples {})",
            cfg.near, cfg.far, cfg.samples_per_ray
        )));
    }
    let rays = gen_rays(pose, res);
    let n = rays.len();
    let s = cfg.samples_per_ray;
    let (t, delta) = sample_distances(n, cfg, opts.jitter_seed);
    let mut points = Array2::<R>::zeros((n * s, 3));
    let mut keep = opts.masked.as_ref().map(|_| Array2::<R>::ones((n * s, 1)));
    for r in 0..n {
        for i in 0..s {
            let k = r * s + i;
            let mut x = [0.0; 3];
            for c in 0..3 {
                x[c] = rays.origins[[r, c]] + t[[r, i]] * rays.directions[[r, c]];
                points[[k, c]] = R::lit(x[c]);
            }
            if let (Some(mv), Some(keep)) = (opts.masked.as_ref(), keep.as_mut()) {
                if classify_point(x, &mv.pose, &mv.mask) == PointClass::Background {
                    keep[[k, 0]] = R::zero();
                }
            }
        }
    }
    let (sigma, color) = field.eval(tape, tape.constant(points.into_dyn()))?;
    let sigma = match keep {
        Some(keep) => sigma.mul(tape.constant(keep.into_dyn())),
        None => sigma,
    };
    let sigma = sigma.reshape(&[n, s]);
    let color = color.reshape(&[n, s, 3]);
    let out = sigma.composite(
        color,
        Rc::new(t.mapv(R::lit)),
        Rc::new(delta.mapv(R::lit)),
        R::lit(cfg.far),
        R::lit(DEPTH_EPS),
    );
    Ok(RenderVar { out, rays: Rc::new(rays) })
}

/// Renders a tape-independent field (such as the analytic world) to an image.
pub fn render<R: Real, F>(field: &F, pose: &CameraPose, res: Resolution, opts: &RenderOptions) -> Result<RenderedImage>
where
    F: for<'t> Field<'t, R>,
{
    let tape = Tape::<R>::new();
    let out = render_var(&tape, field, pose, res, opts)?;
    tape.check()?;
    Ok(out.image())
}

/// Compositing weights `w_i = T_i (1 − exp(−σ_i δ_i))` and the final
/// transmittance `T_N`.
pub fn compositing_weights(sigmas: &[f64], deltas: &[f64]) -> (Vec<f64>, f64) {
    let mut trans = 1.0;
    let weights = sigmas
        .iter()
        .zip(deltas)
        .map(|(&s, &d)| {
            let e = (-s * d).exp();
            let w = trans * (1.0 - e);
            trans *= e;
            w
        })
        .collect();
    (weights, trans)
}

/// Composites one ray's samples ordered near to far. `t` holds each sample's
/// distance along the ray. Returns `(rgb, expected depth, alpha)`.
pub fn composite(samples: &[RadianceSample], t: &[f64], deltas: &[f64], far: f64) -> Result<([f64; 3], f64, f64)> {
    if samples.len() != deltas.len() || samples.len() != t.len() {
        return Err(Error::InvalidArgument("composite: samples, t and deltas differ in length".into()));
    }
    if let Some(d) = deltas.iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::InvalidArgument(format!("composite: non-positive delta {d}")));
    }
    let s = samples.len();
    let tape = Tape::<f64>::new();
    let sigma = Array2::from_shape_fn((1, s), |(_, i)| samples[i].sigma);
    let color = Array3::from_shape_fn((1, s, 3), |(_, i, c)| samples[i].color[c]);
    let out = tape.constant(sigma.into_dyn()).composite(
        tape.constant(color.into_dyn()),
        Rc::new(Array2::from_shape_vec((1, s), t.to_vec()).unwrap()),
        Rc::new(Array2::from_shape_vec((1, s), deltas.to_vec()).unwrap()),
        far,
        DEPTH_EPS,
    );
    tape.check()?;
    let v = out.value();
    Ok(([v[[0, 0]], v[[0, 1]], v[[0, 2]]], v[[0, 4]], v[[0, 3]]))
}

/// Points reprojected from a rendered depth map, with field attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributedPointCloud {
    /// `N×3` world coordinates.
    pub points: Array2<f64>,
    pub densities: Array1<f64>,
    /// `N×3`.
    pub colors: Array2<f64>,
    /// Source pixel (row-major index) of each point.
    pub pixels: Vec<usize>,
}

impl AttributedPointCloud {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Reprojection points `origin + depth · direction` for the chosen pixels.
pub fn reproject_points(img: &RenderedImage, pose: &CameraPose, pixels: &[usize]) -> Array2<f64> {
    let res = img.resolution();
    let rays = gen_rays(pose, res);
    let mut pts = Array2::zeros((pixels.len(), 3));
    for (n, &k) in pixels.iter().enumerate() {
        let d = img.depth[[k / res.width, k % res.width]];
        for c in 0..3 {
            pts[[n, c]] = rays.origins[[k, c]] + d * rays.directions[[k, c]];
        }
    }
    pts
}

/// Lifts every masked pixel to 3D at its expected depth and attaches the
/// field's density and color there.
pub fn reproject<R: Real, F>(img: &RenderedImage, pose: &CameraPose, mask: &Mask, field: &F) -> Result<AttributedPointCloud>
where
    F: for<'t> Field<'t, R>,
{
    let pixels = mask.indices();
    let points = reproject_points(img, pose, &pixels);
    if pixels.is_empty() {
        return Ok(AttributedPointCloud {
            points,
            densities: Array1::zeros(0),
            colors: Array2::zeros((0, 3)),
            pixels,
        });
    }
    let tape = Tape::<R>::new();
    let (sigma, color) = field.eval(&tape, tape.constant(points.mapv(R::lit).into_dyn()))?;
    tape.check()?;
    let sv = sigma.value();
    let cv = color.value();
    let n = pixels.len();
    Ok(AttributedPointCloud {
        densities: Array1::from_shape_fn(n, |i| sv[[i, 0]].f64()),
        colors: Array2::from_shape_fn((n, 3), |(i, c)| cv[[i, c]].f64()),
        points,
        pixels,
    })
}

/// Differentiable reprojection of `pixels` from a render: `N×3` points whose
/// positions depend on the rendered depth.
pub fn reproject_var<'t, R: Real>(render: &RenderVar<'t, R>, pixels: &[usize]) -> Var<'t, R> {
    let tape = render.out.tape();
    let n = pixels.len();
    let rays = &render.rays;
    let origins = Array2::from_shape_fn((n, 3), |(i, c)| R::lit(rays.origins[[pixels[i], c]]));
    let dirs = Array2::from_shape_fn((n, 3), |(i, c)| R::lit(rays.directions[[pixels[i], c]]));
    let depth = render.depth().gather_rows(Rc::new(pixels.to_vec()));
    tape.constant(dirs.into_dyn()).mul_col(depth).add(tape.constant(origins.into_dyn()))
}
