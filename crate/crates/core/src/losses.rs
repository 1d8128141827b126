//! Scalar objectives for inversion and fine-tuning.
//!
//! Pixel, perceptual and identity primitives; the image-space supervision
//! `L_img`; neighborhood latent sampling; the explicit geometric constraint
//! `L_exp` (density and color matched over reprojected point clouds); the
//! implicit regularization `L_imp` (image losses between neighbor renders of
//! the two generators); and their weighted total.

use crate::error::{Error, Result};
use crate::generator::{BoundGenerator, LatentCode};
use crate::numcore::{adam_step, AdamConfig, AdamState, ParamSet, Real, Tape, Tensor, Var};
use crate::renderer::{
    classify_point, render_var, reproject_var, CameraPose, Mask, MaskedView, PointClass, RenderOptions, RenderVar, RenderedImage,
    Resolution, SamplingConfig,
};
use crate::synthworld::{render_gt, sample_pose, ExpressionParams, IdentityParams};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Loss weights and neighborhood distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Pixel term of latent inversion.
    pub lambda0: f64,
    /// `L_img` pixel, perceptual and identity terms.
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Explicit geometric constraint `L_exp`.
    pub lambda4: f64,
    /// `L_imp` pixel, perceptual and identity terms.
    pub lambda5: f64,
    pub lambda6: f64,
    pub lambda7: f64,
    /// Distance of neighborhood latents from the pivot.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda0: 0.1,
            lambda1: 1.0,
            lambda2: 10.0,
            lambda3: 0.1,
            lambda4: 10.0,
            lambda5: 1.0,
            lambda6: 10.0,
            lambda7: 0.1,
            alpha: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda0,
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.lambda6,
            self.lambda7,
            self.alpha,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("loss weights and alpha must be finite and non-negative".into()))
        }
    }

    pub fn uses_implicit(&self) -> bool {
        self.lambda5 != 0.0 || self.lambda6 != 0.0 || self.lambda7 != 0.0
    }

    pub fn uses_explicit(&self) -> bool {
        self.lambda4 != 0.0
    }
}

/// `(H·W)×3` image rows as a `3×H×W` tensor.
fn to_chw<'t, R: Real>(img: Var<'t, R>, res: Resolution) -> Var<'t, R> {
    img.t().reshape(&[3, res.height, res.width])
}

fn conv_stack<'t, R: Real>(x: Var<'t, R>, layers: &[(Var<'t, R>, Var<'t, R>)]) -> Vec<Var<'t, R>> {
    let mut out = Vec::with_capacity(layers.len());
    let mut h = x;
    for &(w, b) in layers {
        h = h.conv2d(w, b, 2, 1).tanh();
        out.push(h);
    }
    out
}

/// Per-channel spatial mean of a `C×H×W` activation, as a `1×C` row.
fn spatial_mean<'t, R: Real>(x: Var<'t, R>) -> Var<'t, R> {
    let s = x.shape();
    let (c, n) = (s[0], s[1] * s[2]);
    let tape = x.tape();
    let ones = tape.constant(ArrayD::from_elem(IxDyn(&[n, 1]), R::lit(1.0 / n as f64)));
    x.reshape(&[c, n]).matmul(ones).t()
}

fn gauss_conv<R: Real>(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, gain: f64) -> (Tensor<R>, Tensor<R>) {
    let fan_in = (in_c * 9) as f64;
    let n = Normal::new(0.0, gain / fan_in.sqrt()).unwrap();
    let w = ArrayD::from_shape_fn(IxDyn(&[out_c, in_c, 3, 3]), |_| R::lit(n.sample(rng)));
    (w, ArrayD::zeros(IxDyn(&[out_c])))
}

/// Fixed random convolutional pyramid: three stride-2 stages with 16, 32 and
/// 64 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEncoder<R: Real> {
    pub seed: u64,
    stages: Vec<(Tensor<R>, Tensor<R>)>,
}

impl<R: Real> FeatureEncoder<R> {
    pub const CHANNELS: [usize; 3] = [16, 32, 64];
    pub const DEFAULT_SEED: u64 = 1234;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_c = 3;
        let stages = Self::CHANNELS
            .iter()
            .map(|&c| {
                let s = gauss_conv(&mut rng, c, in_c, 1.5);
                in_c = c;
                s
            })
            .collect();
        Self { seed, stages }
    }

    /// Activations of every stage for an `(H·W)×3` image.
    pub fn features<'t>(&self, img: Var<'t, R>, res: Resolution) -> Vec<Var<'t, R>> {
        let tape = img.tape();
        let layers: Vec<_> = self
            .stages
            .iter()
            .map(|(w, b)| (tape.constant(w.clone()), tape.constant(b.clone())))
            .collect();
        conv_stack(to_chw(img, res), &layers)
    }

    /// Concatenated spatial means of all stages (`1×112`), used for Fréchet
    /// statistics.
    pub fn pooled(&self, img: &RenderedImage) -> Vec<f64> {
        let tape = Tape::<R>::new();
        let x = tape.constant(img.rgb_rows::<R>());
        self.features(x, img.resolution())
            .into_iter()
            .flat_map(|f| spatial_mean(f).value().iter().map(|v| v.f64()).collect::<Vec<_>>())
            .collect()
    }
}

/// Embedder training setup: renders its own labeled views of synthetic
/// identities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub identities: usize,
    pub views: usize,
    pub resolution: usize,
    pub samples_per_ray: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            identities: 32,
            views: 6,
            resolution: 32,
            samples_per_ray: 32,
            epochs: 40,
            batch: 16,
            lr: 3e-3,
            seed: 99,
        }
    }
}

/// Outcome of embedder training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderReport {
    pub accuracy: f64,
    pub final_loss: f64,
}

/// Small trained encoder mapping an image to a unit-norm 32-d identity
/// embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEmbedder<R: Real> {
    params: ParamSet<R>,
}

const EMBED_CHANNELS: [usize; 3] = [16, 32, 32];
pub const EMBED_DIM: usize = 32;
const COSINE_SCALE: f64 = 10.0;

/// `x / ||x||` per row of an `N×D` block.
fn normalize_rows<'t, R: Real>(x: Var<'t, R>) -> Var<'t, R> {
    let d = x.shape()[1];
    let ones = x.tape().constant(ArrayD::from_elem(IxDyn(&[d, 1]), R::one()));
    let norm = x.square().matmul(ones).add_scalar(R::lit(1e-12)).sqrt();
    x.mul_col(norm.recip().reshape(&[x.shape()[0]]))
}

impl<R: Real> IdentityEmbedder<R> {
    fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut in_c = 3;
        for (k, &c) in EMBED_CHANNELS.iter().enumerate() {
            let (w, b) = gauss_conv(&mut rng, c, in_c, 1.0);
            params.push(format!("conv{k}.weight"), w);
            params.push(format!("conv{k}.bias"), b);
            in_c = c;
        }
        let n = Normal::new(0.0, 1.0 / (in_c as f64).sqrt()).unwrap();
        params.push(
            "proj.weight",
            ArrayD::from_shape_fn(IxDyn(&[in_c, EMBED_DIM]), |_| R::lit(n.sample(&mut rng))),
        );
        params.push("proj.bias", ArrayD::zeros(IxDyn(&[EMBED_DIM])));
        Self { params }
    }

    pub fn from_params(params: ParamSet<R>) -> Result<Self> {
        let reference = Self::init(0);
        if reference.params.names() != params.names()
            || reference.params.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::InvalidArgument("checkpoint does not match identity embedder".into()));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &ParamSet<R> {
        &self.params
    }

    fn embed_with<'t>(vars: &[Var<'t, R>], img: Var<'t, R>, res: Resolution) -> Var<'t, R> {
        let layers: Vec<_> = (0..EMBED_CHANNELS.len()).map(|k| (vars[2 * k], vars[2 * k + 1])).collect();
        let feats = conv_stack(to_chw(img, res), &layers);
        let pooled = spatial_mean(*feats.last().unwrap());
        let n = vars.len();
        normalize_rows(pooled.matmul(vars[n - 2]).add_row(vars[n - 1]))
    }

    /// Unit-norm `1×32` embedding of an `(H·W)×3` image.
    pub fn embed<'t>(&self, img: Var<'t, R>, res: Resolution) -> Var<'t, R> {
        let tape = img.tape();
        let vars: Vec<_> = self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        Self::embed_with(&vars, img, res)
    }

    pub fn embed_image(&self, img: &RenderedImage) -> Vec<f64> {
        let tape = Tape::<R>::new();
        let e = self.embed(tape.constant(img.rgb_rows::<R>()), img.resolution());
        e.value().iter().map(|v| v.f64()).collect()
    }

    /// Trains on labeled ground-truth renders with a cosine-softmax
    /// classifier over identities; reports training-set accuracy.
    pub fn train(cfg: &EmbedderConfig) -> Result<(Self, EmbedderReport)> {
        if cfg.identities < 2 || cfg.views == 0 {
            return Err(Error::InvalidArgument("embedder training needs at least two identities".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let res = Resolution::square(cfg.resolution);
        let sampling = SamplingConfig {
            samples_per_ray: cfg.samples_per_ray,
            ..Default::default()
        };
        let mut data = Vec::with_capacity(cfg.identities * cfg.views);
        for label in 0..cfg.identities {
            let id = IdentityParams::from_seed(rng.gen());
            for _ in 0..cfg.views {
                let pose = sample_pose(&mut rng);
                let e = ExpressionParams::sample(&mut rng);
                data.push((render_gt(&id, &e, &pose, res, &sampling)?.rgb_rows::<R>(), label));
            }
        }
        let mut model = Self::init(rng.gen());
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut prototypes: Tensor<R> = ArrayD::from_shape_fn(IxDyn(&[cfg.identities, EMBED_DIM]), |_| R::lit(n.sample(&mut rng)));
        let mut state = {
            let mut refs = model.params.refs();
            refs.push(&prototypes);
            AdamState::new(&refs, AdamConfig::default())
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut final_loss = f64::NAN;
        for _ in 0..cfg.epochs {
            shuffle(&mut order, &mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch.max(1)) {
                let mut inputs: Vec<&Tensor<R>> = model.params.refs();
                inputs.push(&prototypes);
                let (loss, grads) = crate::numcore::value_and_grad::<R, Error, _>(&inputs, |tape, vars| {
                    let (net, proto) = vars.split_at(vars.len() - 1);
                    let proto_n = normalize_rows(proto[0]).t();
                    let mut total: Option<Var<'_, R>> = None;
                    for &k in batch {
                        let (img, label) = &data[k];
                        let e = Self::embed_with(net, tape.constant(img.clone()), res);
                        let logits = e.matmul(proto_n).scale(R::lit(COSINE_SCALE));
                        let ce = logits.exp().sum().ln().sub(logits.slice_cols(*label, 1).sum());
                        total = Some(match total {
                            Some(t) => t.add(ce),
                            None => ce,
                        });
                    }
                    Ok(total.expect("non-empty batch").scale(R::lit(1.0 / batch.len() as f64)))
                })?;
                epoch_loss += loss.f64() * batch.len() as f64;
                let mut targets = model.params.refs_mut();
                targets.push(&mut prototypes);
                adam_step(&mut targets, &grads, &mut state, cfg.lr)?;
            }
            final_loss = epoch_loss / data.len() as f64;
        }
        let proto: Vec<Vec<f64>> = prototypes
            .outer_iter()
            .map(|row| {
                let v: Vec<f64> = row.iter().map(|x| x.f64()).collect();
                let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / nrm).collect()
            })
            .collect();
        let mut correct = 0;
        for (img, label) in &data {
            let tape = Tape::<R>::new();
            let e: Vec<f64> = model.embed(tape.constant(img.clone()), res).value().iter().map(|v| v.f64()).collect();
            let best = (0..proto.len())
                .max_by(|&a, &b| dot(&e, &proto[a]).total_cmp(&dot(&e, &proto[b])))
                .unwrap();
            correct += usize::from(best == *label);
        }
        let report = EmbedderReport {
            accuracy: correct as f64 / data.len() as f64,
            final_loss,
        };
        Ok((model, report))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn shuffle(v: &mut [usize], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// The fixed perceptual encoder and the trained identity embedder.
#[derive(Clone, Debug, PartialEq)]
pub struct LossModels<R: Real> {
    pub encoder: FeatureEncoder<R>,
    pub embedder: IdentityEmbedder<R>,
}

/// Mean squared error over pixels (and channels) of two `(H·W)×3` images,
/// restricted to `mask` pixels when given. An empty mask yields zero.
pub fn l_pix<'t, R: Real>(a: Var<'t, R>, b: Var<'t, R>, mask: Option<&Mask>) -> Result<Var<'t, R>> {
    if a.shape() != b.shape() {
        return Err(Error::Num(crate::numcore::NumError::ShapeMismatch {
            context: "l_pix",
            left: a.shape(),
            right: b.shape(),
        }));
    }
    let diff = a.sub(b);
    match mask {
        None => Ok(diff.square().mean()),
        Some(m) => {
            let idx = m.indices();
            if idx.is_empty() {
                return Ok(a.tape().scalar(R::zero()));
            }
            Ok(diff.gather_rows(Rc::new(idx)).square().mean())
        }
    }
}

/// Sum over encoder stages of the activation MSE.
pub fn l_perc<'t, R: Real>(enc: &FeatureEncoder<R>, a: Var<'t, R>, b: Var<'t, R>, res: Resolution) -> Var<'t, R> {
    let fa = enc.features(a, res);
    let fb = enc.features(b, res);
    let mut total = fa[0].sub(fb[0]).square().mean();
    for (x, y) in fa.iter().zip(&fb).skip(1) {
        total = total.add(x.sub(*y).square().mean());
    }
    total
}

/// `1 − cos(embed(a), embed(b))`, computed as half the squared distance of
/// the unit embeddings.
pub fn l_id<'t, R: Real>(emb: &IdentityEmbedder<R>, a: Var<'t, R>, b: Var<'t, R>, res: Resolution) -> Var<'t, R> {
    let ea = emb.embed(a, res);
    let eb = emb.embed(b, res);
    ea.sub(eb).square().sum().scale(R::lit(0.5))
}

/// A neighborhood draw: latent at distance `α` from the pivot plus a pose
/// from the dataset prior and an expression from the box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborDraw {
    pub z: LatentCode,
    pub pose: CameraPose,
    pub expression: ExpressionParams,
}

fn step_toward(init: &[f64], alpha: f64, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let smp: Vec<f64> = (0..init.len()).map(|_| rng.sample(StandardNormal)).collect();
        let dir: Vec<f64> = smp.iter().zip(init).map(|(s, z)| s - z).collect();
        let len = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        if len > 0.0 {
            return neighbor_from_sample(init, &smp, alpha).expect("non-degenerate sample");
        }
    }
}

/// `z_init + α (z_smp − z_init) / ||z_smp − z_init||`; `None` when the sample
/// coincides with the pivot.
pub fn neighbor_from_sample(init: &[f64], smp: &[f64], alpha: f64) -> Option<Vec<f64>> {
    let dir: Vec<f64> = smp.iter().zip(init).map(|(s, z)| s - z).collect();
    let len = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    if len == 0.0 {
        return None;
    }
    Some(init.iter().zip(&dir).map(|(z, d)| z + alpha * d / len).collect())
}

/// Neighborhood latent at distance `α` from `z_init`. W+ codes move each
/// layer independently.
pub fn sample_neighbor(z_init: &LatentCode, alpha: f64, rng: &mut impl Rng) -> LatentCode {
    LatentCode {
        mode: z_init.mode,
        codes: z_init.codes.iter().map(|c| step_toward(c, alpha, rng)).collect(),
    }
}

pub fn draw_neighbor(z_init: &LatentCode, alpha: f64, rng: &mut impl Rng) -> NeighborDraw {
    let z = sample_neighbor(z_init, alpha, rng);
    let pose = sample_pose(rng);
    let expression = ExpressionParams::sample(rng);
    NeighborDraw { z, pose, expression }
}

/// Sampling and image sizes used by the objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSetup {
    pub sampling: SamplingConfig,
    /// Input-view render size.
    pub resolution: usize,
    /// Neighbor render size.
    pub neighbor_resolution: usize,
}

impl Default for RenderSetup {
    fn default() -> Self {
        Self {
            sampling: SamplingConfig::coarse(),
            resolution: 32,
            neighbor_resolution: 16,
        }
    }
}

impl RenderSetup {
    pub fn options(&self, masked: Option<&MaskedView>) -> RenderOptions {
        RenderOptions::new(self.sampling.clone()).with_mask(masked.cloned())
    }
}

/// Unweighted image-space primitives.
#[derive(Clone, Copy)]
pub struct ImageTerms<'t, R: Real> {
    pub pix: Var<'t, R>,
    pub perc: Var<'t, R>,
    pub id: Var<'t, R>,
}

impl<'t, R: Real> ImageTerms<'t, R> {
    pub fn compute(models: &LossModels<R>, a: Var<'t, R>, b: Var<'t, R>, res: Resolution, mask: Option<&Mask>) -> Result<Self> {
        Ok(Self {
            pix: l_pix(a, b, mask)?,
            perc: l_perc(&models.encoder, a, b, res),
            id: l_id(&models.embedder, a, b, res),
        })
    }

    pub fn weighted(&self, w_pix: f64, w_perc: f64, w_id: f64) -> Var<'t, R> {
        self.pix
            .scale(R::lit(w_pix))
            .add(self.perc.scale(R::lit(w_perc)))
            .add(self.id.scale(R::lit(w_id)))
    }
}

/// Renders a bound generator at a latent, expression and pose.
pub fn render_generator<'t, R: Real>(
    g: &BoundGenerator<'t, R>,
    z: Var<'t, R>,
    e: ExpressionParams,
    pose: &CameraPose,
    res: Resolution,
    opts: &RenderOptions,
) -> Result<RenderVar<'t, R>> {
    let field = g.field(z, e);
    render_var(z.tape(), &field, pose, res, opts)
}

/// Image-space supervision at the input view.
pub fn image_space_terms<'t, R: Real>(
    models: &LossModels<R>,
    gf: &BoundGenerator<'t, R>,
    z_init: Var<'t, R>,
    input: &RenderedImage,
    pose: &CameraPose,
    e: ExpressionParams,
    setup: &RenderSetup,
) -> Result<ImageTerms<'t, R>> {
    let res = input.resolution();
    let render = render_generator(gf, z_init, e, pose, res, &setup.options(None))?;
    let target = z_init.tape().constant(input.rgb_rows::<R>());
    ImageTerms::compute(models, render.rgb(), target, res, None)
}

/// `λ1 l_pix + λ2 l_perc + λ3 l_id` between the fine-tuned render at the pivot
/// and the input image.
#[allow(clippy::too_many_arguments)]
pub fn image_space_loss<'t, R: Real>(
    models: &LossModels<R>,
    gf: &BoundGenerator<'t, R>,
    z_init: Var<'t, R>,
    input: &RenderedImage,
    pose: &CameraPose,
    e: ExpressionParams,
    weights: &LossWeights,
    setup: &RenderSetup,
) -> Result<Var<'t, R>> {
    let terms = image_space_terms(models, gf, z_init, input, pose, e, setup)?;
    Ok(terms.weighted(weights.lambda1, weights.lambda2, weights.lambda3))
}

/// Indices of the nearest `reference` row for every `query` row (exact brute
/// force, first minimum on ties).
pub fn nearest_indices(query: &Array2<f64>, reference: &Array2<f64>) -> Vec<usize> {
    query
        .outer_iter()
        .map(|q| {
            let mut best = (f64::INFINITY, 0);
            for (k, r) in reference.outer_iter().enumerate() {
                let d = (q[0] - r[0]).powi(2) + (q[1] - r[1]).powi(2) + (q[2] - r[2]).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1
        })
        .collect()
}

/// Points with densities and colors.
#[derive(Clone, Debug, PartialEq)]
pub struct Cloud {
    /// `N×3`.
    pub points: Array2<f64>,
    pub densities: Vec<f64>,
    /// `N×3`.
    pub colors: Array2<f64>,
}

/// One-sided attributed Chamfer term: mean over `s_o` of the squared density
/// and color differences to the nearest point of `s_f`.
pub fn attributed_chamfer(s_o: &Cloud, s_f: &Cloud) -> f64 {
    if s_o.densities.is_empty() || s_f.densities.is_empty() {
        return 0.0;
    }
    let nn = nearest_indices(&s_o.points, &s_f.points);
    let total: f64 = nn
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let ds = (s_f.densities[j] - s_o.densities[i]).powi(2);
            let dc: f64 = (0..3).map(|c| (s_f.colors[[j, c]] - s_o.colors[[i, c]]).powi(2)).sum();
            ds + dc
        })
        .sum();
    total / nn.len() as f64
}

/// Renders of both generators at one neighborhood draw.
pub struct NeighborRenders<'t, R: Real> {
    pub fine: RenderVar<'t, R>,
    pub orig: RenderVar<'t, R>,
    pub z: Var<'t, R>,
    pub expression: ExpressionParams,
    pub pose: CameraPose,
}

pub fn render_neighbors<'t, R: Real>(
    gf: &BoundGenerator<'t, R>,
    go: &BoundGenerator<'t, R>,
    draw: &NeighborDraw,
    masked: Option<&MaskedView>,
    setup: &RenderSetup,
    tape: &'t Tape<R>,
) -> Result<NeighborRenders<'t, R>> {
    let z = gf.latent(tape, &draw.z)?;
    let res = Resolution::square(setup.neighbor_resolution);
    let opts = setup.options(masked);
    let fine = render_generator(gf, z, draw.expression, &draw.pose, res, &opts)?;
    let orig = render_generator(go, z, draw.expression, &draw.pose, res, &opts)?;
    Ok(NeighborRenders {
        fine,
        orig,
        z,
        expression: draw.expression,
        pose: draw.pose,
    })
}

fn foreground_pixels<R: Real>(render: &RenderVar<'_, R>) -> Vec<usize> {
    render
        .alpha()
        .value()
        .iter()
        .enumerate()
        .filter(|(_, a)| a.f64() > 0.5)
        .map(|(k, _)| k)
        .collect()
}

fn values_2d<R: Real>(v: &Tensor<R>) -> Array2<f64> {
    let s = v.shape();
    Array2::from_shape_fn((s[0], s[1]), |(i, j)| v[[i, j]].f64())
}

/// Drops pixels whose reprojected point is classified background in the
/// input view.
fn keep_foreground(points: &Array2<f64>, pixels: Vec<usize>, masked: Option<&MaskedView>) -> (Array2<f64>, Vec<usize>) {
    let Some(mv) = masked else {
        return (points.clone(), pixels);
    };
    let keep: Vec<usize> = (0..pixels.len())
        .filter(|&i| {
            let x = [points[[i, 0]], points[[i, 1]], points[[i, 2]]];
            classify_point(x, &mv.pose, &mv.mask) != PointClass::Background
        })
        .collect();
    (points.select(ndarray::Axis(0), &keep), keep.iter().map(|&i| pixels[i]).collect())
}

/// Squared density and color differences of matched rows, averaged over rows.
fn matched_error<'t, R: Real>(sigma_a: Var<'t, R>, color_a: Var<'t, R>, sigma_b: Var<'t, R>, color_b: Var<'t, R>) -> Var<'t, R> {
    let n = sigma_a.shape()[0] as f64;
    sigma_a
        .sub(sigma_b)
        .square()
        .sum()
        .add(color_a.sub(color_b).square().sum())
        .scale(R::lit(1.0 / n))
}

/// Explicit geometric constraint from precomputed neighbor renders.
///
/// Clouds are lifted from the foreground pixels of each render at their
/// expected depth; the fine cloud's positions stay differentiable through
/// its depth. Nearest-neighbor assignment is computed on values and held
/// fixed. With `symmetric`, the reverse direction is added.
pub fn explicit_from_renders<'t, R: Real>(
    gf: &BoundGenerator<'t, R>,
    go: &BoundGenerator<'t, R>,
    nb: &NeighborRenders<'t, R>,
    masked: Option<&MaskedView>,
    symmetric: bool,
) -> Result<Var<'t, R>> {
    let tape = nb.z.tape();
    let orig_img = nb.orig.image();
    let pix_o = foreground_pixels(&nb.orig);
    let pts_o = crate::renderer::reproject_points(&orig_img, &nb.pose, &pix_o);
    let (pts_o, _) = keep_foreground(&pts_o, pix_o, masked);
    if pts_o.nrows() == 0 {
        log::warn!("explicit geometric loss: neighbor render of the original generator has no foreground");
        return Ok(tape.scalar(R::zero()));
    }
    let pix_f = foreground_pixels(&nb.fine);
    let pf_all = reproject_var(&nb.fine, &pix_f);
    let pf_values = values_2d(&pf_all.value());
    let (pf_kept_values, kept_f) = {
        let (vals, kept_pixels) = keep_foreground(&pf_values, pix_f.clone(), masked);
        let rows: Vec<usize> = kept_pixels.iter().map(|p| pix_f.binary_search(p).unwrap()).collect();
        (vals, rows)
    };
    let orig_points = tape.constant(pts_o.mapv(R::lit).into_dyn());
    let (sig_o, col_o) = go.forward(nb.z, &nb.expression, orig_points)?;
    let (sig_o, col_o) = (tape.constant((*sig_o.value()).clone()), tape.constant((*col_o.value()).clone()));
    if kept_f.is_empty() {
        // no fine foreground: compare the fine field at the original points
        let (sig_f, col_f) = gf.forward(nb.z, &nb.expression, orig_points)?;
        return Ok(matched_error(sig_f, col_f, sig_o, col_o));
    }
    let pf = pf_all.gather_rows(Rc::new(kept_f));
    let (sig_f, col_f) = gf.forward(nb.z, &nb.expression, pf)?;
    let nn = Rc::new(nearest_indices(&pts_o, &pf_kept_values));
    let mut loss = matched_error(sig_f.gather_rows(nn.clone()), col_f.gather_rows(nn), sig_o, col_o);
    if symmetric {
        let back = Rc::new(nearest_indices(&pf_kept_values, &pts_o));
        loss = loss.add(matched_error(sig_f, col_f, sig_o.gather_rows(back.clone()), col_o.gather_rows(back)));
    }
    Ok(loss)
}

/// Explicit geometric constraint at one neighborhood draw.
pub fn explicit_geom_loss<'t, R: Real>(
    gf: &BoundGenerator<'t, R>,
    go: &BoundGenerator<'t, R>,
    draw: &NeighborDraw,
    masked: Option<&MaskedView>,
    setup: &RenderSetup,
    symmetric: bool,
    tape: &'t Tape<R>,
) -> Result<Var<'t, R>> {
    let nb = render_neighbors(gf, go, draw, masked, setup, tape)?;
    explicit_from_renders(gf, go, &nb, masked, symmetric)
}

/// Pixels that are foreground in either neighbor render.
fn union_mask<R: Real>(nb: &NeighborRenders<'_, R>) -> Mask {
    let res = nb.fine.resolution();
    let a = nb.fine.alpha().value();
    let b = nb.orig.alpha().value();
    Mask {
        resolution: res,
        data: a.iter().zip(b.iter()).map(|(x, y)| x.f64() > 0.5 || y.f64() > 0.5).collect(),
    }
}

/// Unweighted implicit terms from precomputed neighbor renders.
pub fn implicit_terms<'t, R: Real>(models: &LossModels<R>, nb: &NeighborRenders<'t, R>, masked: bool) -> Result<ImageTerms<'t, R>> {
    let tape = nb.z.tape();
    let target = tape.constant((*nb.orig.rgb().value()).clone());
    let mask = masked.then(|| union_mask(nb));
    ImageTerms::compute(models, nb.fine.rgb(), target, nb.fine.resolution(), mask.as_ref())
}

/// `λ5 l_pix + λ6 l_perc + λ7 l_id` between neighbor renders of the two
/// generators.
#[allow(clippy::too_many_arguments)]
pub fn implicit_geom_loss<'t, R: Real>(
    models: &LossModels<R>,
    gf: &BoundGenerator<'t, R>,
    go: &BoundGenerator<'t, R>,
    draw: &NeighborDraw,
    weights: &LossWeights,
    masked: Option<&MaskedView>,
    setup: &RenderSetup,
    tape: &'t Tape<R>,
) -> Result<Var<'t, R>> {
    let nb = render_neighbors(gf, go, draw, masked, setup, tape)?;
    let t = implicit_terms(models, &nb, masked.is_some())?;
    Ok(t.weighted(weights.lambda5, weights.lambda6, weights.lambda7))
}

/// Total objective and its logged components.
pub struct TotalLoss<'t, R: Real> {
    pub total: Var<'t, R>,
    pub l_img: Var<'t, R>,
    pub l_exp: Option<Var<'t, R>>,
    pub imp: Option<ImageTerms<'t, R>>,
    pub draw: NeighborDraw,
}

/// Everything the total objective needs besides the two generators.
pub struct TotalInputs<'a, R: Real> {
    pub models: &'a LossModels<R>,
    pub z_init: &'a LatentCode,
    pub input: &'a RenderedImage,
    pub pose: &'a CameraPose,
    pub expression: ExpressionParams,
    pub weights: &'a LossWeights,
    pub setup: &'a RenderSetup,
    /// Input view and mask for masked regularization.
    pub masked: Option<&'a MaskedView>,
    pub symmetric_chamfer: bool,
}

/// Geometric regularizers at one neighborhood draw.
pub struct Regularizer<'t, R: Real> {
    /// `λ4 L_exp + L_imp`, or `None` when all their weights are zero.
    pub weighted: Option<Var<'t, R>>,
    pub l_exp: Option<Var<'t, R>>,
    pub imp: Option<ImageTerms<'t, R>>,
}

/// `λ4 L_exp + λ5 l_pix + λ6 l_perc + λ7 l_id` at `draw`; terms with zero
/// weight are skipped and nothing is rendered when all are.
pub fn neighbor_regularizer<'t, R: Real>(
    gf: &BoundGenerator<'t, R>,
    go: &BoundGenerator<'t, R>,
    inp: &TotalInputs<'_, R>,
    draw: &NeighborDraw,
    tape: &'t Tape<R>,
) -> Result<Regularizer<'t, R>> {
    let w = inp.weights;
    let mut out = Regularizer {
        weighted: None,
        l_exp: None,
        imp: None,
    };
    if !(w.uses_explicit() || w.uses_implicit()) {
        return Ok(out);
    }
    let nb = render_neighbors(gf, go, draw, inp.masked, inp.setup, tape)?;
    let mut acc: Option<Var<'t, R>> = None;
    if w.uses_explicit() {
        let e = explicit_from_renders(gf, go, &nb, inp.masked, inp.symmetric_chamfer)?;
        acc = Some(e.scale(R::lit(w.lambda4)));
        out.l_exp = Some(e);
    }
    if w.uses_implicit() {
        let t = implicit_terms(inp.models, &nb, inp.masked.is_some())?;
        let v = t.weighted(w.lambda5, w.lambda6, w.lambda7);
        acc = Some(match acc {
            Some(a) => a.add(v),
            None => v,
        });
        out.imp = Some(t);
    }
    out.weighted = acc;
    Ok(out)
}

/// `L_img + λ4 L_exp + L_imp` with one fresh neighborhood draw from `rng`.
/// Terms with zero weight are skipped.
pub fn total_loss<'t, R: Real>(
    gf: &BoundGenerator<'t, R>,
    go: &BoundGenerator<'t, R>,
    inp: &TotalInputs<'_, R>,
    rng: &mut impl Rng,
    tape: &'t Tape<R>,
) -> Result<TotalLoss<'t, R>> {
    let w = inp.weights;
    let draw = draw_neighbor(inp.z_init, w.alpha, rng);
    let z_init = gf.latent(tape, inp.z_init)?;
    let l_img = image_space_loss(inp.models, gf, z_init, inp.input, inp.pose, inp.expression, w, inp.setup)?;
    let reg = neighbor_regularizer(gf, go, inp, &draw, tape)?;
    let total = match reg.weighted {
        Some(r) => l_img.add(r),
        None => l_img,
    };
    Ok(TotalLoss {
        total,
        l_img,
        l_exp: reg.l_exp,
        imp: reg.imp,
        draw,
    })
}

/// Latent-inversion objective `l_perc + λ0 l_pix` against a target image.
pub fn inversion_loss<'t, R: Real>(
    models: &LossModels<R>,
    render: Var<'t, R>,
    target: &RenderedImage,
    lambda0: f64,
) -> Result<Var<'t, R>> {
    let res = target.resolution();
    let t = render.tape().constant(target.rgb_rows::<R>());
    Ok(l_perc(&models.encoder, render, t, res).add(l_pix(render, t, None)?.scale(R::lit(lambda0))))
}
