//! Pretraining, inversion, fine-tuning, animation and ablation runs.

use crate::error::{Error, Result};
use crate::generator::{broadcast_latent, Generator, GeneratorConfig, LatentCode, LatentMode};
use crate::losses::{
    image_space_loss, inversion_loss, l_perc, l_pix, neighbor_regularizer, total_loss, draw_neighbor, FeatureEncoder, LossModels,
    LossWeights, RenderSetup, TotalInputs,
};
use crate::metrics::{self, Evaluation, MetricsConfig, MetricsReport};
use crate::numcore::{adam_step, write_checkpoint, AdamConfig, AdamState, Real, Tape, Tensor, Var};
use crate::renderer::{RenderVar, CameraPose, MaskedView, RenderOptions, RenderedImage, Resolution, SamplingConfig};
use crate::synthworld::{render_gt, Dataset, ExpressionParams, IdentityParams, PITCH_RANGE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

fn divergence(what: &str, detail: impl std::fmt::Display) -> Error {
    Error::Divergence(format!("{what}: {detail}"))
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(divergence(what, format!("loss is {v}")))
    }
}

/// Auto-decoder pretraining settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr_weights: f64,
    pub lr_latents: f64,
    /// Weight of `||w||²` per latent.
    pub latent_reg: f64,
    pub perc_weight: f64,
    /// Standard deviation of the initial latent table.
    pub latent_init_std: f64,
    /// Learning rates decay geometrically to this fraction by the last epoch.
    pub lr_final_ratio: f64,
    pub resolution: usize,
    pub sampling: SamplingConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr_weights: 2e-3,
            lr_latents: 1e-2,
            latent_reg: 1e-3,
            perc_weight: 0.1,
            latent_init_std: 1.0,
            lr_final_ratio: 0.1,
            resolution: 32,
            sampling: SamplingConfig::coarse(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_weights > 0.0 && self.lr_latents > 0.0) {
            return Err(Error::InvalidArgument("pretrain learning rates must be positive".into()));
        }
        if !(self.lr_final_ratio > 0.0 && self.lr_final_ratio <= 1.0) {
            return Err(Error::InvalidArgument("lr_final_ratio must be in (0, 1]".into()));
        }
        if self.latent_reg < 0.0 || self.perc_weight < 0.0 || self.latent_init_std < 0.0 {
            return Err(Error::InvalidArgument("pretrain weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Pretrained generator and its per-identity latents.
#[derive(Clone, Debug)]
pub struct Pretrained<R: Real> {
    pub generator: Generator<R>,
    pub latents: Vec<LatentCode>,
    /// Mean objective per epoch.
    pub epoch_loss: Vec<f64>,
}

impl<R: Real> Pretrained<R> {
    /// Mean of the latent table, the starting point of W-mode inversion.
    pub fn latent_mean(&self) -> LatentCode {
        latent_mean(&self.latents)
    }
}

pub fn latent_mean(latents: &[LatentCode]) -> LatentCode {
    let dim = latents.first().map_or(0, LatentCode::dim);
    let mut mean = vec![0.0; dim];
    for z in latents {
        for (m, v) in mean.iter_mut().zip(&z.codes[0]) {
            *m += v;
        }
    }
    let n = latents.len().max(1) as f64;
    LatentCode::w(mean.into_iter().map(|m| m / n).collect())
}

fn write_rescue<R: Real>(rescue: Option<&Path>, g: &Generator<R>) {
    if let Some(path) = rescue {
        if let Err(e) = write_checkpoint(path, g.params()) {
            log::error!("could not write last good checkpoint {}: {e}", path.display());
        } else {
            log::warn!("wrote last good checkpoint to {}", path.display());
        }
    }
}

fn decayed(lr: f64, ratio: f64, progress: f64) -> f64 {
    lr * ratio.powf(progress)
}

/// Jointly fits generator weights and one latent per training identity
/// with `l_pix + perc_weight·l_perc + latent_reg·||w||²`. On divergence the
/// last finite weights are written to `rescue` before the error is returned.
pub fn pretrain<R: Real>(
    dataset: &Dataset,
    gen_cfg: &GeneratorConfig,
    cfg: &PretrainConfig,
    encoder: &FeatureEncoder<R>,
    rescue: Option<&Path>,
) -> Result<Pretrained<R>> {
    cfg.validate()?;
    if dataset.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.resolution != dataset.config.resolution {
        return Err(Error::InvalidArgument(format!(
            "pretrain resolution {} differs from dataset resolution {}",
            cfg.resolution, dataset.config.resolution
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_ids = dataset.train_seeds.len();
    let init = Normal::new(0.0, cfg.latent_init_std.max(f64::MIN_POSITIVE)).unwrap();
    let mut table: Vec<Tensor<R>> = (0..n_ids)
        .map(|_| {
            let code: Vec<f64> = (0..gen_cfg.latent_dim)
                .map(|_| if cfg.latent_init_std > 0.0 { init.sample(&mut rng) } else { 0.0 })
                .collect();
            LatentCode::w(code).to_tensor()
        })
        .collect();
    let mut gen = Generator::<R>::new(gen_cfg.clone());
    let mut w_state = AdamState::new(&gen.params().refs(), AdamConfig::default());
    let mut z_states: Vec<AdamState<R>> = table.iter().map(|z| AdamState::new(&[z], AdamConfig::default())).collect();
    let res = dataset.resolution();
    let opts = RenderOptions::new(cfg.sampling.clone());
    let targets: Vec<Tensor<R>> = dataset.records.iter().map(|r| r.image().rgb_rows::<R>()).collect();
    let mut order: Vec<usize> = (0..dataset.records.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let progress = if cfg.epochs > 1 { epoch as f64 / (cfg.epochs - 1) as f64 } else { 0.0 };
        let lr_w = decayed(cfg.lr_weights, cfg.lr_final_ratio, progress);
        let lr_z = decayed(cfg.lr_latents, cfg.lr_final_ratio, progress);
        crate::losses::shuffle(&mut order, &mut rng);
        let mut sum = 0.0;
        for &k in &order {
            let rec = &dataset.records[k];
            let tape = Tape::<R>::new();
            let bound = gen.bind(&tape, true);
            let z = tape.param(table[rec.id].clone());
            let rendered = crate::losses::render_generator(&bound, z, rec.expression, &rec.pose, res, &opts)?;
            let target = tape.constant(targets[k].clone());
            let loss = l_pix(rendered.rgb(), target, None)?
                .add(l_perc(encoder, rendered.rgb(), target, res).scale(R::lit(cfg.perc_weight)))
                .add(z.square().sum().scale(R::lit(cfg.latent_reg)));
            let value = loss.item().f64();
            if let Err(e) = tape.check().map_err(Error::from).and_then(|_| check_finite("pretrain", value)) {
                write_rescue(rescue, &gen);
                return Err(divergence("pretrain", e));
            }
            let mut wrt: Vec<_> = bound.vars().to_vec();
            wrt.push(z);
            let mut grads = tape.gradients(loss, &wrt)?;
            let gz = grads.pop().expect("latent gradient");
            if let Err(e) = adam_step(&mut gen.params_mut()?.refs_mut(), &grads, &mut w_state, lr_w) {
                write_rescue(rescue, &gen);
                return Err(divergence("pretrain", e));
            }
            adam_step(&mut [&mut table[rec.id]], &[gz], &mut z_states[rec.id], lr_z).map_err(|e| divergence("pretrain", e))?;
            sum += value;
        }
        let mean = sum / order.len() as f64;
        log::info!("pretrain epoch {epoch}: loss {mean:.5}");
        epoch_loss.push(mean);
    }
    Ok(Pretrained {
        generator: gen.clone_frozen(),
        latents: table.iter().map(|t| LatentCode::from_tensor(LatentMode::W, t)).collect(),
        epoch_loss,
    })
}

/// Renders a generator at a latent without recording gradients.
pub fn render_latent<R: Real>(
    g: &Generator<R>,
    z: &LatentCode,
    e: ExpressionParams,
    pose: &CameraPose,
    res: Resolution,
    sampling: &SamplingConfig,
) -> Result<RenderedImage> {
    let tape = Tape::<R>::new();
    let bound = g.bind(&tape, false);
    let lat = bound.latent(&tape, z)?;
    let out = crate::losses::render_generator(&bound, lat, e, pose, res, &RenderOptions::new(sampling.clone()))?;
    tape.check()?;
    Ok(out.image())
}

/// Mean reconstruction PSNR of the pretrained generator over training views.
pub fn training_psnr<R: Real>(pre: &Pretrained<R>, dataset: &Dataset, sampling: &SamplingConfig) -> Result<f64> {
    let res = dataset.resolution();
    let mut total = 0.0;
    for rec in &dataset.records {
        let img = render_latent(&pre.generator, &pre.latents[rec.id], rec.expression, &rec.pose, res, sampling)?;
        total += metrics::psnr(&img.rgb, &rec.image().rgb)?;
    }
    Ok(total / dataset.records.len() as f64)
}

/// Latent-optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    /// Pixel weight `λ0`; the perceptual term has weight one.
    pub lambda0: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 150,
            lr: 0.05,
            lambda0: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub z_init: LatentCode,
    pub mode: LatentMode,
    pub final_loss: f64,
    /// Objective before each update.
    pub trace: Vec<f64>,
    #[serde(skip)]
    pub recon: Option<RenderedImage>,
}

struct InversionProblem<'a, R: Real> {
    go: &'a Generator<R>,
    models: &'a LossModels<R>,
    target: &'a RenderedImage,
    pose: &'a CameraPose,
    e: ExpressionParams,
    mode: LatentMode,
    opts: &'a RenderOptions,
    lambda0: f64,
}

type Evaluated<'t, R> = (Var<'t, R>, RenderVar<'t, R>, Var<'t, R>);

impl<R: Real> InversionProblem<'_, R> {
    fn eval<'t>(&self, tape: &'t Tape<R>, z: &Tensor<R>, track: bool) -> Result<Evaluated<'t, R>> {
        let bound = self.go.bind(tape, false);
        bound.check_latent(self.mode, z.shape()[0], z.shape()[1])?;
        let zv = if track { tape.param(z.clone()) } else { tape.constant(z.clone()) };
        let out = crate::losses::render_generator(&bound, zv, self.e, self.pose, self.target.resolution(), self.opts)?;
        let loss = inversion_loss(self.models, out.rgb(), self.target, self.lambda0)?;
        tape.check()?;
        Ok((zv, out, loss))
    }
}

/// Optimizes the latent of a frozen generator against `target` with
/// `l_perc + λ0 l_pix`. A W-mode `init` is broadcast when `mode` is W+.
#[allow(clippy::too_many_arguments)]
pub fn invert<R: Real>(
    go: &Generator<R>,
    models: &LossModels<R>,
    target: &RenderedImage,
    pose: &CameraPose,
    e: ExpressionParams,
    init: &LatentCode,
    mode: LatentMode,
    cfg: &InversionConfig,
    sampling: &SamplingConfig,
) -> Result<InversionResult> {
    if go.is_trainable() {
        return Err(Error::InvalidArgument("inversion requires a frozen generator".into()));
    }
    let start = match (mode, init.mode) {
        (LatentMode::WPlus, LatentMode::W) => broadcast_latent(init, go.config.layers)?,
        (LatentMode::W, LatentMode::WPlus) => {
            return Err(Error::InvalidArgument("cannot start a W inversion from a W+ latent".into()))
        }
        _ => init.clone(),
    };
    let opts = RenderOptions::new(sampling.clone());
    let mut z: Tensor<R> = start.to_tensor();
    let mut state = AdamState::new(&[&z], AdamConfig::default());
    let mut trace = Vec::with_capacity(cfg.steps);
    let problem = InversionProblem {
        go,
        models,
        target,
        pose,
        e,
        mode,
        opts: &opts,
        lambda0: cfg.lambda0,
    };
    for step in 0..cfg.steps {
        let tape = Tape::<R>::new();
        let (zv, _, loss) = problem.eval(&tape, &z, true).map_err(|err| divergence("invert", err))?;
        let value = loss.item().f64();
        check_finite("invert", value)?;
        trace.push(value);
        let grads = tape.gradients(loss, &[zv])?;
        adam_step(&mut [&mut z], &grads, &mut state, cfg.lr).map_err(|err| divergence("invert", err))?;
        log::debug!("invert step {step}: {value:.5}");
    }
    let z_init = if cfg.steps == 0 { start } else { LatentCode::from_tensor(mode, &z) };
    let tape = Tape::<R>::new();
    let (_, out, loss) = problem.eval(&tape, &z_init.to_tensor(), false).map_err(|err| divergence("invert", err))?;
    let final_loss = loss.item().f64();
    check_finite("invert", final_loss)?;
    Ok(InversionResult {
        z_init,
        mode,
        final_loss,
        trace,
        recon: Some(out.image()),
    })
}

/// W inversion from `init`; for W+ the W result is broadcast and optimized
/// per layer for another `cfg.steps` iterations.
#[allow(clippy::too_many_arguments)]
pub fn invert_staged<R: Real>(
    go: &Generator<R>,
    models: &LossModels<R>,
    target: &RenderedImage,
    pose: &CameraPose,
    e: ExpressionParams,
    init: &LatentCode,
    mode: LatentMode,
    cfg: &InversionConfig,
    sampling: &SamplingConfig,
) -> Result<(InversionResult, Option<InversionResult>)> {
    let w = invert(go, models, target, pose, e, init, LatentMode::W, cfg, sampling)?;
    if mode == LatentMode::W {
        return Ok((w, None));
    }
    let wp = invert(go, models, target, pose, e, &w.z_init, LatentMode::WPlus, cfg, sampling)?;
    Ok((w, Some(wp)))
}

/// Fine-tuning settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub iterations: usize,
    pub lr: f64,
    pub weights: LossWeights,
    /// Restrict the regularizers to points inside the input-view mask.
    pub masked: bool,
    pub symmetric_chamfer: bool,
    /// Neighborhood draws averaged per iteration.
    pub neighbors_per_iteration: usize,
    pub seed: u64,
    pub setup: RenderSetup,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 2e-5,
            weights: LossWeights::default(),
            masked: true,
            symmetric_chamfer: false,
            neighbors_per_iteration: 1,
            seed: 0,
            setup: RenderSetup::default(),
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("fine-tuning needs at least one iteration".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("fine-tuning learning rate must be positive".into()));
        }
        if self.neighbors_per_iteration == 0 {
            return Err(Error::InvalidArgument("neighbors_per_iteration must be at least 1".into()));
        }
        self.weights.validate()
    }
}

/// One row of `losses.csv`. Absent terms are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub l_img: f64,
    pub l_exp: f64,
    pub imp_pix: f64,
    pub imp_perc: f64,
    pub imp_id: f64,
    pub total: f64,
    /// `||z_ng − z_init||` of the first draw.
    pub neighbor_distance: f64,
}

#[derive(Clone, Debug)]
pub struct FineTuneResult<R: Real> {
    pub generator: Generator<R>,
    pub trace: Vec<LossRow>,
}

pub fn write_loss_csv(rows: &[LossRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Input view of a fine-tune.
#[derive(Clone, Debug)]
pub struct InputView<'a> {
    pub image: &'a RenderedImage,
    pub pose: CameraPose,
    pub expression: ExpressionParams,
}

/// Adam on a trainable copy of `go` around the fixed pivot `z_init`.
/// On divergence the last finite weights are written to `rescue`.
pub fn finetune<R: Real>(
    go: &Generator<R>,
    models: &LossModels<R>,
    z_init: &LatentCode,
    input: &InputView<'_>,
    cfg: &FineTuneConfig,
    rescue: Option<&Path>,
) -> Result<FineTuneResult<R>> {
    cfg.validate()?;
    if go.is_trainable() {
        return Err(Error::InvalidArgument("fine-tuning requires a frozen original generator".into()));
    }
    let mut gf = go.clone_trainable();
    let mut state = AdamState::new(&gf.params().refs(), AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let masked = cfg.masked.then(|| MaskedView {
        pose: input.pose,
        mask: input.image.mask(),
    });
    let inputs = TotalInputs {
        models,
        z_init,
        input: input.image,
        pose: &input.pose,
        expression: input.expression,
        weights: &cfg.weights,
        setup: &cfg.setup,
        masked: masked.as_ref(),
        symmetric_chamfer: cfg.symmetric_chamfer,
    };
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let tape = Tape::<R>::new();
        let bf = gf.bind(&tape, true);
        let bo = go.bind(&tape, false);
        let (total, row) = if cfg.neighbors_per_iteration == 1 {
            let t = total_loss(&bf, &bo, &inputs, &mut rng, &tape)?;
            let row = loss_row(it, t.l_img, t.l_exp, t.imp.as_ref(), t.total, z_init.distance(&t.draw.z));
            (t.total, row)
        } else {
            averaged_loss(&bf, &bo, &inputs, cfg.neighbors_per_iteration, &mut rng, &tape, it)?
        };
        if let Err(e) = tape.check().map_err(Error::from).and_then(|_| check_finite("finetune", row.total)) {
            write_rescue(rescue, &gf);
            return Err(divergence("finetune", e));
        }
        let grads = tape.gradients(total, bf.vars())?;
        if let Err(e) = adam_step(&mut gf.params_mut()?.refs_mut(), &grads, &mut state, cfg.lr) {
            write_rescue(rescue, &gf);
            return Err(divergence("finetune", e));
        }
        log::debug!("finetune iteration {it}: {:.5}", row.total);
        trace.push(row);
    }
    Ok(FineTuneResult {
        generator: gf.clone_frozen(),
        trace,
    })
}

fn loss_row<R: Real>(
    iteration: usize,
    l_img: Var<'_, R>,
    l_exp: Option<Var<'_, R>>,
    imp: Option<&crate::losses::ImageTerms<'_, R>>,
    total: Var<'_, R>,
    neighbor_distance: f64,
) -> LossRow {
    let v = |x: Var<'_, R>| x.item().f64();
    LossRow {
        iteration,
        l_img: v(l_img),
        l_exp: l_exp.map_or(0.0, v),
        imp_pix: imp.map_or(0.0, |t| v(t.pix)),
        imp_perc: imp.map_or(0.0, |t| v(t.perc)),
        imp_id: imp.map_or(0.0, |t| v(t.id)),
        total: v(total),
        neighbor_distance,
    }
}

/// `L_img` plus the regularizers averaged over `k` draws.
fn averaged_loss<'t, R: Real>(
    bf: &crate::generator::BoundGenerator<'t, R>,
    bo: &crate::generator::BoundGenerator<'t, R>,
    inp: &TotalInputs<'_, R>,
    k: usize,
    rng: &mut ChaCha8Rng,
    tape: &'t Tape<R>,
    iteration: usize,
) -> Result<(Var<'t, R>, LossRow)> {
    let w = inp.weights;
    let z = bf.latent(tape, inp.z_init)?;
    let l_img = image_space_loss(inp.models, bf, z, inp.input, inp.pose, inp.expression, w, inp.setup)?;
    let mut total = l_img;
    let mut row = loss_row(iteration, l_img, None, None, l_img, 0.0);
    let scale = R::lit(1.0 / k as f64);
    for j in 0..k {
        let draw = draw_neighbor(inp.z_init, w.alpha, rng);
        if j == 0 {
            row.neighbor_distance = inp.z_init.distance(&draw.z);
        }
        let reg = neighbor_regularizer(bf, bo, inp, &draw, tape)?;
        if let Some(r) = reg.weighted {
            total = total.add(r.scale(scale));
        }
        let kf = k as f64;
        row.l_exp += reg.l_exp.map_or(0.0, |v| v.item().f64()) / kf;
        if let Some(t) = reg.imp {
            row.imp_pix += t.pix.item().f64() / kf;
            row.imp_perc += t.perc.item().f64() / kf;
            row.imp_id += t.id.item().f64() / kf;
        }
    }
    row.total = total.item().f64();
    Ok((total, row))
}

/// Renders `z` under every `(pose, expression)` of `sequence`.
pub fn animate<R: Real>(
    g: &Generator<R>,
    z: &LatentCode,
    sequence: &[(CameraPose, ExpressionParams)],
    res: Resolution,
    sampling: &SamplingConfig,
) -> Result<Vec<RenderedImage>> {
    sequence.iter().map(|(pose, e)| render_latent(g, z, *e, pose, res, sampling)).collect()
}

/// Kind of animation sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sweep {
    Yaw,
    Pitch,
    Expr,
}

impl std::str::FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "yaw" => Ok(Sweep::Yaw),
            "pitch" => Ok(Sweep::Pitch),
            "expr" => Ok(Sweep::Expr),
            other => Err(Error::InvalidArgument(format!("unknown sweep {other:?} (expected yaw, pitch or expr)"))),
        }
    }
}

fn lerp(a: f64, b: f64, k: usize, n: usize) -> f64 {
    if n <= 1 {
        (a + b) / 2.0
    } else {
        a + (b - a) * k as f64 / (n - 1) as f64
    }
}

/// `frames` evenly spaced poses or expressions around `(pose, e)`: yaw over
/// `[−0.5, 0.5]`, pitch over the dataset range, or both expression
/// coordinates over `[−1, 1]`.
pub fn sweep_sequence(kind: Sweep, frames: usize, pose: CameraPose, e: ExpressionParams) -> Vec<(CameraPose, ExpressionParams)> {
    (0..frames)
        .map(|k| match kind {
            Sweep::Yaw => (CameraPose { yaw: lerp(-0.5, 0.5, k, frames), ..pose }, e),
            Sweep::Pitch => (
                CameraPose {
                    pitch: lerp(PITCH_RANGE.0, PITCH_RANGE.1, k, frames),
                    ..pose
                },
                e,
            ),
            Sweep::Expr => {
                let t = lerp(-1.0, 1.0, k, frames);
                (pose, ExpressionParams::new(t, t))
            }
        })
        .collect()
}

/// Fine-tuning objective variants compared by the ablation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    /// `L_img` only.
    ImageOnly,
    /// `L_img + L_imp`.
    PlusImplicit,
    /// `L_img + L_imp + L_exp`, unmasked.
    PlusExplicit,
    /// All terms with masked regularization.
    Full,
    /// [`Variant::Full`] at another neighborhood distance.
    Alpha(f64),
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::ImageOnly => "L_img".into(),
            Variant::PlusImplicit => "+L_imp".into(),
            Variant::PlusExplicit => "+L_exp".into(),
            Variant::Full => "full".into(),
            Variant::Alpha(a) => format!("alpha={a}"),
        }
    }

    /// Weights and masking for this variant, starting from `base`.
    pub fn apply(&self, base: &FineTuneConfig) -> FineTuneConfig {
        let mut cfg = base.clone();
        let w = &mut cfg.weights;
        match *self {
            Variant::ImageOnly => {
                w.lambda4 = 0.0;
                w.lambda5 = 0.0;
                w.lambda6 = 0.0;
                w.lambda7 = 0.0;
                cfg.masked = false;
            }
            Variant::PlusImplicit => {
                w.lambda4 = 0.0;
                cfg.masked = false;
            }
            Variant::PlusExplicit => cfg.masked = false,
            Variant::Full => cfg.masked = true,
            Variant::Alpha(a) => {
                w.alpha = a;
                cfg.masked = true;
            }
        }
        cfg
    }

    /// True when the fine-tune never consumes the random stream.
    pub fn is_seed_independent(&self) -> bool {
        matches!(self, Variant::ImageOnly)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L_img" => Ok(Variant::ImageOnly),
            "+L_imp" => Ok(Variant::PlusImplicit),
            "+L_exp" => Ok(Variant::PlusExplicit),
            "full" => Ok(Variant::Full),
            other => match other.strip_prefix("alpha=").map(str::parse::<f64>) {
                Some(Ok(a)) if a >= 0.0 && a.is_finite() => Ok(Variant::Alpha(a)),
                _ => Err(Error::InvalidArgument(format!(
                    "unknown variant {other:?} (expected L_img, +L_imp, +L_exp, full or alpha=<value>)"
                ))),
            },
        }
    }
}

/// Offsets `(Δyaw, Δpitch)` of the evaluation views from the input pose.
pub const NOVEL_OFFSETS: [(f64, f64); 4] = [(-0.4, 0.0), (0.4, 0.0), (0.0, -0.2), (0.0, 0.2)];

/// Held-out test case: an identity rendered at an input view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub identity_seed: u64,
    pub pose: CameraPose,
    pub expression: ExpressionParams,
}

impl TestCase {
    /// Input view of the `index`-th held-out identity: near-frontal so every
    /// evaluation offset stays inside the pose range.
    pub fn held_out(dataset: &Dataset, index: usize) -> Result<Self> {
        let seed = *dataset
            .held_out_seeds
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("held-out identity {index} does not exist")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        Ok(Self {
            identity_seed: seed,
            pose: CameraPose::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.1..0.1)),
            expression: ExpressionParams::sample(&mut rng),
        })
    }

    pub fn identity(&self) -> IdentityParams {
        IdentityParams::from_seed(self.identity_seed)
    }

    pub fn render(&self, res: Resolution, sampling: &SamplingConfig) -> Result<RenderedImage> {
        render_gt(&self.identity(), &self.expression, &self.pose, res, sampling)
    }

    pub fn novel_poses(&self) -> Vec<CameraPose> {
        NOVEL_OFFSETS
            .iter()
            .map(|(dy, dp)| CameraPose {
                yaw: self.pose.yaw + dy,
                pitch: self.pose.pitch + dp,
                ..self.pose
            })
            .collect()
    }
}

/// Scores `g` at `z` against the analytic ground truth of `case`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<R: Real>(
    g: &Generator<R>,
    z: &LatentCode,
    case: &TestCase,
    input: &RenderedImage,
    models: &LossModels<R>,
    gt_sampling: &SamplingConfig,
    sampling: &SamplingConfig,
    cfg: &MetricsConfig,
) -> Result<(MetricsReport, RenderedImage, Vec<RenderedImage>)> {
    let res = input.resolution();
    let recon = render_latent(g, z, case.expression, &case.pose, res, sampling)?;
    let id = case.identity();
    let mut novel = Vec::new();
    for pose in case.novel_poses() {
        let got = render_latent(g, z, case.expression, &pose, res, sampling)?;
        let gt = render_gt(&id, &case.expression, &pose, res, gt_sampling)?;
        novel.push((pose, got, gt));
    }
    let field = FieldAt {
        g,
        z: z.to_tensor(),
        e: case.expression,
    };
    let geometry = metrics::geometry_error_with_grid::<R, _>(&field, &id, &case.expression, cfg.geometry_grid)?;
    let report = Evaluation {
        encoder: &models.encoder,
        embedder: &models.embedder,
        input,
        recon: &recon,
        novel: &novel,
    }
    .report(geometry)?;
    let renders = novel.into_iter().map(|(_, got, _)| got).collect();
    Ok((report, recon, renders))
}

/// A generator at a fixed latent and expression, bound afresh on each tape.
pub struct FieldAt<'a, R: Real> {
    pub g: &'a Generator<R>,
    pub z: Tensor<R>,
    pub e: ExpressionParams,
}

impl<'t, R: Real> crate::renderer::Field<'t, R> for FieldAt<'_, R> {
    fn eval(
        &self,
        tape: &'t Tape<R>,
        points: Var<'t, R>,
    ) -> Result<(Var<'t, R>, Var<'t, R>)> {
        let bound = self.g.bind(tape, false);
        bound.forward(tape.constant(self.z.clone()), &self.e, points)
    }
}

/// Settings shared by all runs of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Number of held-out identities, taken in order.
    pub identities: usize,
    pub seeds: Vec<u64>,
    pub mode: LatentMode,
    pub inversion: InversionConfig,
    pub finetune: FineTuneConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            identities: 5,
            seeds: vec![0, 1, 2],
            mode: LatentMode::W,
            inversion: InversionConfig::default(),
            finetune: FineTuneConfig::default(),
        }
    }
}

/// Metrics of one fine-tune in an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub identity: usize,
    pub alpha: f64,
    pub recon_psnr: f64,
    pub recon_id_similarity: f64,
    pub novel_psnr: f64,
    pub id_similarity: f64,
    pub feature_frechet: f64,
    pub geometry_error: f64,
    /// Largest `| ||z_ng − z_init|| − α |` over all draws.
    pub neighbor_distance_error: f64,
}

/// Per-variant medians over identities and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationMedian {
    pub variant: String,
    pub runs: usize,
    pub recon_psnr: f64,
    pub recon_id_similarity: f64,
    pub novel_psnr: f64,
    pub id_similarity: f64,
    pub feature_frechet: f64,
    pub geometry_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub medians: Vec<AblationMedian>,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

impl AblationTable {
    pub fn from_rows(rows: Vec<AblationRow>) -> Self {
        let mut names: Vec<String> = Vec::new();
        for r in &rows {
            if !names.contains(&r.variant) {
                names.push(r.variant.clone());
            }
        }
        let medians = names
            .into_iter()
            .map(|name| {
                let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == name).collect();
                let med = |f: fn(&AblationRow) -> f64| median(&mut sel.iter().map(|r| f(r)).collect::<Vec<_>>());
                AblationMedian {
                    runs: sel.len(),
                    recon_psnr: med(|r| r.recon_psnr),
                    recon_id_similarity: med(|r| r.recon_id_similarity),
                    novel_psnr: med(|r| r.novel_psnr),
                    id_similarity: med(|r| r.id_similarity),
                    feature_frechet: med(|r| r.feature_frechet),
                    geometry_error: med(|r| r.geometry_error),
                    variant: name,
                }
            })
            .collect();
        Self { rows, medians }
    }

    pub fn median_of(&self, variant: &str) -> Option<&AblationMedian> {
        self.medians.iter().find(|m| m.variant == variant)
    }

    /// One row per run followed by one `median` row per variant.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "variant",
            "seed",
            "identity",
            "alpha",
            "recon_psnr",
            "recon_id_similarity",
            "novel_psnr",
            "id_similarity",
            "feature_frechet",
            "geometry_error",
            "neighbor_distance_error",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                r.seed.to_string(),
                r.identity.to_string(),
                r.alpha.to_string(),
                r.recon_psnr.to_string(),
                r.recon_id_similarity.to_string(),
                r.novel_psnr.to_string(),
                r.id_similarity.to_string(),
                r.feature_frechet.to_string(),
                r.geometry_error.to_string(),
                r.neighbor_distance_error.to_string(),
            ])?;
        }
        for m in &self.medians {
            w.write_record([
                m.variant.clone(),
                "median".into(),
                "median".into(),
                String::new(),
                m.recon_psnr.to_string(),
                m.recon_id_similarity.to_string(),
                m.novel_psnr.to_string(),
                m.id_similarity.to_string(),
                m.feature_frechet.to_string(),
                m.geometry_error.to_string(),
                String::new(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Held-out case with its input render and pivot latent.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub index: usize,
    pub case: TestCase,
    pub input: RenderedImage,
    pub z_init: LatentCode,
}

/// Renders and inverts the first `cfg.identities` held-out identities.
pub fn prepare_cases<R: Real>(
    go: &Generator<R>,
    init: &LatentCode,
    models: &LossModels<R>,
    dataset: &Dataset,
    cfg: &AblationConfig,
) -> Result<Vec<PreparedCase>> {
    let res = dataset.resolution();
    let sampling = &cfg.finetune.setup.sampling;
    (0..cfg.identities)
        .map(|index| {
            let case = TestCase::held_out(dataset, index)?;
            let input = case.render(res, &dataset.config.sampling)?;
            let (w, wp) = invert_staged(go, models, &input, &case.pose, case.expression, init, cfg.mode, &cfg.inversion, sampling)?;
            let z_init = wp.unwrap_or(w).z_init;
            Ok(PreparedCase { index, case, input, z_init })
        })
        .collect()
}

/// Fine-tunes every variant on every prepared case and seed. Seed-independent
/// variants run once per case and are reported under each seed.
pub fn run_ablation<R: Real>(
    go: &Generator<R>,
    models: &LossModels<R>,
    dataset: &Dataset,
    cases: &[PreparedCase],
    variants: &[Variant],
    cfg: &AblationConfig,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for pc in cases {
        for variant in variants {
            let mut shared: Option<AblationRow> = None;
            for &seed in &cfg.seeds {
                if let (Some(row), true) = (&shared, variant.is_seed_independent()) {
                    rows.push(AblationRow { seed, ..row.clone() });
                    continue;
                }
                let mut ft = variant.apply(&cfg.finetune);
                ft.seed = seed;
                let row = ablation_run(go, models, dataset, pc, variant, &ft)?;
                log::info!(
                    "ablation {} identity {} seed {seed}: novel psnr {:.2}, geometry {:.5}",
                    row.variant,
                    row.identity,
                    row.novel_psnr,
                    row.geometry_error
                );
                shared = Some(row.clone());
                rows.push(row);
            }
        }
    }
    Ok(AblationTable::from_rows(rows))
}

/// One fine-tune plus evaluation.
pub fn ablation_run<R: Real>(
    go: &Generator<R>,
    models: &LossModels<R>,
    dataset: &Dataset,
    pc: &PreparedCase,
    variant: &Variant,
    ft: &FineTuneConfig,
) -> Result<AblationRow> {
    let input = InputView {
        image: &pc.input,
        pose: pc.case.pose,
        expression: pc.case.expression,
    };
    let result = finetune(go, models, &pc.z_init, &input, ft, None)?;
    let (report, _, _) = evaluate(
        &result.generator,
        &pc.z_init,
        &pc.case,
        &pc.input,
        models,
        &dataset.config.sampling,
        &ft.setup.sampling,
        &MetricsConfig::default(),
    )?;
    let uses_draws = ft.weights.uses_explicit() || ft.weights.uses_implicit();
    let neighbor_distance_error = if uses_draws {
        result
            .trace
            .iter()
            .map(|r| (r.neighbor_distance - ft.weights.alpha).abs())
            .fold(0.0, f64::max)
    } else {
        0.0
    };
    Ok(AblationRow {
        variant: variant.name(),
        seed: ft.seed,
        identity: pc.index,
        alpha: ft.weights.alpha,
        recon_psnr: report.recon_psnr,
        recon_id_similarity: report.recon_id_similarity,
        novel_psnr: report.novel_psnr,
        id_similarity: report.id_similarity,
        feature_frechet: report.feature_frechet,
        geometry_error: report.geometry_error,
        neighbor_distance_error,
    })
}
