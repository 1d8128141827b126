use crate::config::RunConfig;
use crate::error::CliError;
use nerfinv_core::io::{contact_sheet, load_mask_png, load_rgb_png, read_json, save_mask_png, save_rgb_png, write_json};
use nerfinv_core::losses::{FeatureEncoder, IdentityEmbedder, LossModels};
use nerfinv_core::numcore::{read_checkpoint, write_checkpoint, Real};
use nerfinv_core::pipeline::{
    self, animate, evaluate, finetune, invert_staged, latent_mean, pretrain, run_ablation, sweep_sequence, training_psnr,
    write_loss_csv, AblationConfig, InputView, PreparedCase, Sweep, TestCase, Variant,
};
use nerfinv_core::renderer::{CameraPose, RenderedImage};
use nerfinv_core::synthworld::{load_dataset, make_dataset, save_dataset, Dataset};
use nerfinv_core::{ExpressionParams, Generator, GeneratorConfig, LatentCode, LatentMode};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

/// Working precision of every CLI run.
pub type P = f32;

pub const CONFIG_FILE: &str = "config.json";
pub const DATA_DIR: &str = "data";
pub const G_O: &str = "g_o.ckpt";
pub const G_F: &str = "g_f.ckpt";
pub const SIDECAR: &str = "generator.json";
pub const LATENTS: &str = "latents.json";
pub const EMBEDDER: &str = "embedder.ckpt";
pub const Z_INIT: &str = "z_init.json";
pub const INPUT_PNG: &str = "input.png";
pub const INPUT_MASK: &str = "input_mask.png";
pub const INPUT_JSON: &str = "input.json";

/// Architecture and content hashes of the checkpoints in a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub config: GeneratorConfig,
    pub precision: String,
    pub hashes: BTreeMap<String, String>,
}

/// Input view recorded by `invert` and consumed by later stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputRecord {
    pub pose: CameraPose,
    pub expression: ExpressionParams,
    /// Ground-truth identity when the input is a held-out render.
    pub identity_seed: Option<u64>,
    pub mode: LatentMode,
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Result<Self, CliError> {
        let dir = cfg.run_dir();
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
        let ctx = Self { cfg, dir };
        write_json(&ctx.cfg, &ctx.path(CONFIG_FILE))?;
        Ok(ctx)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::MissingCheckpoint(format!("missing file: {}", p.display())))
        }
    }

    fn dataset(&self) -> Result<Dataset, CliError> {
        Ok(load_dataset(&self.path(DATA_DIR))?)
    }

    fn models(&self) -> Result<LossModels<P>, CliError> {
        let params = read_checkpoint::<P>(&self.require(EMBEDDER)?)?;
        Ok(LossModels {
            encoder: FeatureEncoder::new(self.cfg.losses.encoder_seed),
            embedder: IdentityEmbedder::from_params(params)?,
        })
    }

    fn sidecar(&self) -> Result<Sidecar, CliError> {
        self.require(SIDECAR)?;
        Ok(read_json(&self.path(SIDECAR))?)
    }

    /// A frozen generator from `name`, checked against the sidecar hash.
    fn generator(&self, name: &str) -> Result<Generator<P>, CliError> {
        let path = self.require(name)?;
        let side = self.sidecar()?;
        let g = Generator::from_params(side.config.clone(), read_checkpoint::<P>(&path)?)?;
        if let Some(h) = side.hashes.get(name) {
            if *h != g.content_hash() {
                return Err(CliError::MissingCheckpoint(format!("{} does not match the hash in {SIDECAR}", path.display())));
            }
        }
        Ok(g.clone_frozen())
    }

    fn record_hash(&self, name: &str, g: &Generator<P>) -> Result<(), CliError> {
        let mut side = if self.path(SIDECAR).exists() {
            self.sidecar()?
        } else {
            Sidecar {
                config: g.config.clone(),
                precision: format!("{:?}", <P as Real>::PRECISION).to_lowercase(),
                hashes: BTreeMap::new(),
            }
        };
        side.hashes.insert(name.to_string(), g.content_hash());
        write_json(&side, &self.path(SIDECAR))?;
        Ok(())
    }

    fn input(&self) -> Result<(RenderedImage, InputRecord), CliError> {
        let rec: InputRecord = read_json(&self.require(INPUT_JSON)?)?;
        let rgb = load_rgb_png(&self.require(INPUT_PNG)?)?;
        let mut img = RenderedImage::from_rgb(rgb);
        if self.path(INPUT_MASK).exists() {
            img.alpha = load_mask_png(&self.path(INPUT_MASK))?;
        }
        Ok((img, rec))
    }

    fn z_init(&self) -> Result<LatentCode, CliError> {
        self.require(Z_INIT)?;
        Ok(read_json(&self.path(Z_INIT))?)
    }
}

pub fn make_data(ctx: &Ctx) -> Result<String, CliError> {
    let ds = make_dataset(&ctx.cfg.world)?;
    save_dataset(&ds, &ctx.path(DATA_DIR))?;
    Ok(format!(
        "wrote {} records for {} identities to {}",
        ds.records.len(),
        ds.train_seeds.len(),
        ctx.path(DATA_DIR).display()
    ))
}

#[derive(Serialize)]
struct PretrainReport {
    epoch_loss: Vec<f64>,
    training_psnr: f64,
    embedder_accuracy: f64,
    content_hash: String,
}

pub fn pretrain_cmd(ctx: &Ctx) -> Result<String, CliError> {
    let ds = ctx.dataset()?;
    let (embedder, emb_report) = IdentityEmbedder::<P>::train(&ctx.cfg.losses.embedder)?;
    write_checkpoint(&ctx.path(EMBEDDER), embedder.params())?;
    let encoder = FeatureEncoder::<P>::new(ctx.cfg.losses.encoder_seed);
    let pcfg = ctx.cfg.pretrain_config();
    let rescue = ctx.path("g_o.last_good.ckpt");
    let pre = pretrain(&ds, &ctx.cfg.generator, &pcfg, &encoder, Some(&rescue))?;
    write_checkpoint(&ctx.path(G_O), pre.generator.params())?;
    ctx.record_hash(G_O, &pre.generator)?;
    write_json(&pre.latents, &ctx.path(LATENTS))?;
    let psnr = training_psnr(&pre, &ds, &pcfg.sampling)?;
    write_json(
        &PretrainReport {
            epoch_loss: pre.epoch_loss.clone(),
            training_psnr: psnr,
            embedder_accuracy: emb_report.accuracy,
            content_hash: pre.generator.content_hash(),
        },
        &ctx.path("pretrain.json"),
    )?;
    Ok(format!("pretrained {} epochs, training PSNR {psnr:.2} dB", pcfg.epochs))
}

/// Where the input image of an inversion comes from.
pub enum InputSource {
    HeldOut(usize),
    Image { path: PathBuf, mask: Option<PathBuf> },
}

pub struct InvertArgs {
    pub source: InputSource,
    pub pose: Option<(f64, f64)>,
    pub expr: Option<(f64, f64)>,
    pub mode: LatentMode,
    pub steps: Option<usize>,
}

#[derive(Serialize)]
struct InversionLog {
    mode: LatentMode,
    final_loss: f64,
    w_trace: Vec<f64>,
    w_plus_trace: Option<Vec<f64>>,
}

pub fn invert_cmd(ctx: &Ctx, args: &InvertArgs) -> Result<String, CliError> {
    let go = ctx.generator(G_O)?;
    let latents: Vec<LatentCode> = read_json(&ctx.require(LATENTS)?)?;
    let models = ctx.models()?;
    let (image, mut record) = match &args.source {
        InputSource::HeldOut(k) => {
            let ds = ctx.dataset()?;
            let mut case = TestCase::held_out(&ds, *k)?;
            if let Some((y, p)) = args.pose {
                case.pose = CameraPose::new(y, p);
            }
            if let Some((a, b)) = args.expr {
                case.expression = ExpressionParams::new(a, b);
            }
            let img = case.render(ds.resolution(), &ds.config.sampling)?;
            let rec = InputRecord {
                pose: case.pose,
                expression: case.expression,
                identity_seed: Some(case.identity_seed),
                mode: args.mode,
            };
            (img, rec)
        }
        InputSource::Image { path, mask } => {
            let rgb = load_rgb_png(path).map_err(|e| match e {
                nerfinv_core::Error::Io(_) | nerfinv_core::Error::Image(_) => {
                    CliError::Usage(format!("cannot read input image {}: {e}", path.display()))
                }
                other => other.into(),
            })?;
            let mut img = RenderedImage::from_rgb(rgb);
            if let Some(m) = mask {
                img.alpha = load_mask_png(m).map_err(|e| CliError::Usage(format!("cannot read mask {}: {e}", m.display())))?;
            }
            let (y, p) = args.pose.unwrap_or((0.0, 0.0));
            let (a, b) = args.expr.unwrap_or((0.0, 0.0));
            let rec = InputRecord {
                pose: CameraPose::new(y, p),
                expression: ExpressionParams::new(a, b),
                identity_seed: None,
                mode: args.mode,
            };
            (img, rec)
        }
    };
    save_rgb_png(&image.rgb, &ctx.path(INPUT_PNG))?;
    save_mask_png(&image.mask(), &ctx.path(INPUT_MASK))?;
    write_json(&record, &ctx.path(INPUT_JSON))?;
    // continue from the stored 8-bit copy so later stages see the same input
    let (image, stored) = ctx.input()?;
    record.identity_seed = stored.identity_seed;
    let mut inv = ctx.cfg.inversion_config();
    if let Some(s) = args.steps {
        inv.steps = s;
    }
    let init = latent_mean(&latents);
    let sampling = &ctx.cfg.finetune.setup.sampling;
    let (w, wp) = invert_staged(&go, &models, &image, &record.pose, record.expression, &init, args.mode, &inv, sampling)?;
    let last = wp.as_ref().unwrap_or(&w);
    write_json(&last.z_init, &ctx.path(Z_INIT))?;
    save_rgb_png(&last.recon.as_ref().expect("reconstruction").rgb, &ctx.path("recon.png"))?;
    write_json(
        &InversionLog {
            mode: args.mode,
            final_loss: last.final_loss,
            w_trace: w.trace.clone(),
            w_plus_trace: wp.as_ref().map(|r| r.trace.clone()),
        },
        &ctx.path("inversion.json"),
    )?;
    Ok(format!("inverted in {} mode, final loss {:.5}", args.mode, last.final_loss))
}

pub fn finetune_cmd(ctx: &Ctx, variant: Variant) -> Result<String, CliError> {
    let go = ctx.generator(G_O)?;
    let go_bytes = std::fs::read(ctx.path(G_O)).map_err(|e| CliError::MissingCheckpoint(e.to_string()))?;
    let z_init = ctx.z_init()?;
    let (image, rec) = ctx.input()?;
    let models = ctx.models()?;
    let cfg = variant.apply(&ctx.cfg.finetune_config());
    let view = InputView {
        image: &image,
        pose: rec.pose,
        expression: rec.expression,
    };
    let rescue = ctx.path("g_f.last_good.ckpt");
    let result = finetune(&go, &models, &z_init, &view, &cfg, Some(&rescue))?;
    write_checkpoint(&ctx.path(G_F), result.generator.params())?;
    ctx.record_hash(G_F, &result.generator)?;
    write_loss_csv(&result.trace, &ctx.path("losses.csv"))?;
    let after = std::fs::read(ctx.path(G_O)).map_err(|e| CliError::MissingCheckpoint(e.to_string()))?;
    if after != go_bytes || ctx.z_init()? != z_init {
        return Err(CliError::Core(nerfinv_core::Error::InvalidArgument("pivot changed during fine-tuning".into())));
    }
    let last = result.trace.last().map_or(f64::NAN, |r| r.total);
    Ok(format!("fine-tuned {} iterations ({}), final loss {last:.5}", cfg.iterations, variant.name()))
}

pub fn animate_cmd(ctx: &Ctx, sweep: Sweep, frames: usize, source: &str) -> Result<String, CliError> {
    let g = ctx.generator(source)?;
    let z = ctx.z_init()?;
    let (image, rec) = ctx.input()?;
    let seq = sweep_sequence(sweep, frames, rec.pose, rec.expression);
    let imgs = animate(&g, &z, &seq, image.resolution(), &ctx.cfg.finetune.setup.sampling)?;
    let novel = ctx.path("novel");
    std::fs::create_dir_all(&novel).map_err(nerfinv_core::Error::from)?;
    let name = format!("{sweep:?}").to_lowercase();
    for (k, img) in imgs.iter().enumerate() {
        save_rgb_png(&img.rgb, &novel.join(format!("{name}_{k:03}.png")))?;
    }
    let frames_rgb: Vec<_> = imgs.iter().map(|i| i.rgb.clone()).collect();
    save_rgb_png(&contact_sheet(&frames_rgb, frames.clamp(1, 8)), &ctx.path("grid.png"))?;
    Ok(format!("rendered {} {name} frames", imgs.len()))
}

pub fn evaluate_cmd(ctx: &Ctx) -> Result<String, CliError> {
    let g = ctx.generator(G_F)?;
    let z = ctx.z_init()?;
    let (image, rec) = ctx.input()?;
    let seed = rec
        .identity_seed
        .ok_or_else(|| CliError::Usage("evaluate needs a held-out input (invert --heldout) for ground truth".into()))?;
    let ds = ctx.dataset()?;
    let models = ctx.models()?;
    let case = TestCase {
        identity_seed: seed,
        pose: rec.pose,
        expression: rec.expression,
    };
    let (report, recon, novel) = evaluate(
        &g,
        &z,
        &case,
        &image,
        &models,
        &ds.config.sampling,
        &ctx.cfg.finetune.setup.sampling,
        &ctx.cfg.metrics,
    )?;
    let dir = ctx.path("novel");
    std::fs::create_dir_all(&dir).map_err(nerfinv_core::Error::from)?;
    for (k, img) in novel.iter().enumerate() {
        save_rgb_png(&img.rgb, &dir.join(format!("view_{k:03}.png")))?;
    }
    save_rgb_png(&recon.rgb, &ctx.path("recon_finetuned.png"))?;
    write_json(&report, &ctx.path("metrics.json"))?;
    Ok(format!(
        "recon PSNR {:.2} dB, novel PSNR {:.2} dB, geometry error {:.5}",
        report.recon_psnr, report.novel_psnr, report.geometry_error
    ))
}

pub fn ablate_cmd(ctx: &Ctx, variants: &[Variant], seeds: &[u64], identities: usize) -> Result<String, CliError> {
    let go = ctx.generator(G_O)?;
    let latents: Vec<LatentCode> = read_json(&ctx.require(LATENTS)?)?;
    let models = ctx.models()?;
    let ds = ctx.dataset()?;
    let cfg = AblationConfig {
        identities,
        seeds: seeds.to_vec(),
        mode: LatentMode::W,
        inversion: ctx.cfg.inversion_config(),
        finetune: ctx.cfg.finetune_config(),
    };
    let cases: Vec<PreparedCase> = pipeline::prepare_cases(&go, &latent_mean(&latents), &models, &ds, &cfg)?;
    let table = run_ablation(&go, &models, &ds, &cases, variants, &cfg)?;
    table.write_csv(&ctx.path("ablation.csv"))?;
    write_json(&table, &ctx.path("ablation.json"))?;
    Ok(format!("ablation: {} runs over {} variants", table.rows.len(), table.medians.len()))
}

/// Parses `"a,b"` into two numbers.
pub fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok((
            a.parse().map_err(|e| format!("{a:?}: {e}"))?,
            b.parse().map_err(|e| format!("{b:?}: {e}"))?,
        )),
        _ => Err(format!("expected two comma-separated numbers, got {s:?}")),
    }
}
