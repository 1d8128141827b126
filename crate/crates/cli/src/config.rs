use nerfinv_core::losses::{EmbedderConfig, FeatureEncoder, LossWeights, RenderSetup};
use nerfinv_core::metrics::MetricsConfig;
use nerfinv_core::pipeline::{FineTuneConfig, InversionConfig, PretrainConfig};
use nerfinv_core::renderer::SamplingConfig;
use nerfinv_core::synthworld::WorldConfig;
use nerfinv_core::GeneratorConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

use crate::error::CliError;

/// Overrides `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "NERFINV_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossModelSection {
    pub encoder_seed: u64,
    pub embedder: EmbedderConfig,
}

impl Default for LossModelSection {
    fn default() -> Self {
        Self {
            encoder_seed: FeatureEncoder::<f32>::DEFAULT_SEED,
            embedder: EmbedderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub lr_weights: f64,
    pub lr_latents: f64,
    pub latent_reg: f64,
    pub perc_weight: f64,
    pub latent_init_std: f64,
    pub lr_final_ratio: f64,
    pub sampling: SamplingConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            epochs: p.epochs,
            lr_weights: p.lr_weights,
            lr_latents: p.lr_latents,
            latent_reg: p.latent_reg,
            perc_weight: p.perc_weight,
            latent_init_std: p.latent_init_std,
            lr_final_ratio: p.lr_final_ratio,
            sampling: p.sampling,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionSection {
    pub steps: usize,
    pub lr: f64,
}

impl Default for InversionSection {
    fn default() -> Self {
        let i = InversionConfig::default();
        Self { steps: i.steps, lr: i.lr }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneSection {
    pub iterations: usize,
    pub lr: f64,
    pub masked: bool,
    pub symmetric_chamfer: bool,
    pub neighbors_per_iteration: usize,
    pub setup: RenderSetup,
}

impl Default for FineTuneSection {
    fn default() -> Self {
        let f = FineTuneConfig::default();
        Self {
            iterations: f.iterations,
            lr: f.lr,
            masked: f.masked,
            symmetric_chamfer: f.symmetric_chamfer,
            neighbors_per_iteration: f.neighbors_per_iteration,
            setup: f.setup,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub identities: usize,
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            identities: 5,
            seeds: vec![0, 1, 2],
            variants: ["L_img", "+L_imp", "+L_exp", "full"].map(String::from).to_vec(),
        }
    }
}

/// Everything a run needs; persisted as `config.json` in the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub generator: GeneratorConfig,
    pub losses: LossModelSection,
    pub weights: LossWeights,
    pub pretrain: PretrainSection,
    pub inversion: InversionSection,
    pub finetune: FineTuneSection,
    pub metrics: MetricsConfig,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            world: WorldConfig::default(),
            generator: GeneratorConfig::default(),
            losses: LossModelSection::default(),
            weights: LossWeights::default(),
            pretrain: PretrainSection::default(),
            inversion: InversionSection::default(),
            finetune: FineTuneSection::default(),
            metrics: MetricsConfig::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config file; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg: RunConfig = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.generator.layers == 0 || self.generator.width == 0 || self.generator.latent_dim == 0 {
            return bad("generator.layers, width and latent_dim must be positive".into());
        }
        if self.world.resolution == 0 || self.world.n_ids == 0 {
            return bad("world.resolution and world.n_ids must be positive".into());
        }
        if self.metrics.geometry_grid == 0 {
            return bad("metrics.geometry_grid must be positive".into());
        }
        for v in &self.ablation.variants {
            if let Err(e) = v.parse::<nerfinv_core::pipeline::Variant>() {
                return bad(format!("ablation.variants: {e}"));
            }
        }
        self.pretrain_config().validate().map_err(|e| CliError::Config(format!("pretrain: {e}")))?;
        self.finetune_config().validate().map_err(|e| CliError::Config(format!("finetune: {e}")))?;
        if !(self.inversion.lr > 0.0) {
            return bad("inversion.lr must be positive".into());
        }
        Ok(())
    }

    /// `output_dir`, or the environment override.
    pub fn run_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => self.output_dir.clone(),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            lr_weights: p.lr_weights,
            lr_latents: p.lr_latents,
            latent_reg: p.latent_reg,
            perc_weight: p.perc_weight,
            latent_init_std: p.latent_init_std,
            lr_final_ratio: p.lr_final_ratio,
            resolution: self.world.resolution,
            sampling: p.sampling.clone(),
            seed: self.seed,
        }
    }

    pub fn inversion_config(&self) -> InversionConfig {
        InversionConfig {
            steps: self.inversion.steps,
            lr: self.inversion.lr,
            lambda0: self.weights.lambda0,
        }
    }

    pub fn finetune_config(&self) -> FineTuneConfig {
        let f = &self.finetune;
        FineTuneConfig {
            iterations: f.iterations,
            lr: f.lr,
            weights: self.weights.clone(),
            masked: f.masked,
            symmetric_chamfer: f.symmetric_chamfer,
            neighbors_per_iteration: f.neighbors_per_iteration,
            seed: self.seed,
            setup: f.setup.clone(),
        }
    }
}

/// One-line description of every config key.
const DESCRIPTIONS: &[(&str, &str)] = &[
    ("seed", "run seed for pretraining shuffles, latent init and neighborhood draws"),
    ("output_dir", "run directory (overridden by $NERFINV_OUTPUT_ROOT)"),
    ("world.n_ids", "training identities"),
    ("world.views_per_id", "camera poses per training identity"),
    ("world.expr_per_view", "expressions rendered per pose"),
    ("world.held_out_ids", "identities reserved for inversion"),
    ("world.resolution", "image side length in pixels"),
    ("world.seed", "dataset seed"),
    ("world.sampling.samples_per_ray", "ground-truth render samples per ray"),
    ("world.sampling.near", "ground-truth near bound"),
    ("world.sampling.far", "ground-truth far bound"),
    ("generator.layers", "FiLM-modulated layers (W+ has one code per layer)"),
    ("generator.width", "hidden width"),
    ("generator.latent_dim", "latent dimension"),
    ("generator.octaves", "positional-encoding octaves"),
    ("generator.init_seed", "weight initialization seed"),
    ("losses.encoder_seed", "seed of the fixed perceptual encoder"),
    ("losses.embedder.identities", "identities used to train the identity embedder"),
    ("losses.embedder.views", "views per embedder identity"),
    ("losses.embedder.resolution", "embedder training image size"),
    ("losses.embedder.samples_per_ray", "embedder training render samples"),
    ("losses.embedder.epochs", "embedder training epochs"),
    ("losses.embedder.batch", "embedder batch size"),
    ("losses.embedder.lr", "embedder learning rate"),
    ("losses.embedder.seed", "embedder seed"),
    ("weights.lambda0", "pixel weight of latent inversion"),
    ("weights.lambda1", "L_img pixel weight"),
    ("weights.lambda2", "L_img perceptual weight"),
    ("weights.lambda3", "L_img identity weight"),
    ("weights.lambda4", "explicit geometric (Chamfer) weight"),
    ("weights.lambda5", "L_imp pixel weight"),
    ("weights.lambda6", "L_imp perceptual weight"),
    ("weights.lambda7", "L_imp identity weight"),
    ("weights.alpha", "neighborhood distance from the pivot latent"),
    ("pretrain.epochs", "auto-decoder epochs"),
    ("pretrain.lr_weights", "generator learning rate"),
    ("pretrain.lr_latents", "latent table learning rate"),
    ("pretrain.latent_reg", "latent norm penalty"),
    ("pretrain.perc_weight", "perceptual weight"),
    ("pretrain.latent_init_std", "initial latent standard deviation"),
    ("pretrain.lr_final_ratio", "final learning-rate fraction (geometric decay)"),
    ("pretrain.sampling.samples_per_ray", "generator samples per ray while pretraining"),
    ("pretrain.sampling.near", "pretraining near bound"),
    ("pretrain.sampling.far", "pretraining far bound"),
    ("inversion.steps", "Adam steps per inversion stage"),
    ("inversion.lr", "latent learning rate"),
    ("finetune.iterations", "fine-tuning iterations"),
    ("finetune.lr", "fine-tuning learning rate"),
    ("finetune.masked", "restrict regularizers to the input-view foreground"),
    ("finetune.symmetric_chamfer", "add the reverse Chamfer direction"),
    ("finetune.neighbors_per_iteration", "neighborhood draws averaged per iteration"),
    ("finetune.setup.sampling.samples_per_ray", "generator samples per ray after pretraining"),
    ("finetune.setup.sampling.near", "generator near bound"),
    ("finetune.setup.sampling.far", "generator far bound"),
    ("finetune.setup.resolution", "input-view render size"),
    ("finetune.setup.neighbor_resolution", "neighbor render size"),
    ("metrics.geometry_grid", "probe grid resolution for geometry error"),
    ("ablation.identities", "held-out identities per ablation"),
    ("ablation.seeds", "fine-tuning seeds per ablation"),
    ("ablation.variants", "variants: L_img, +L_imp, +L_exp, full, alpha=<value>"),
];

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.to_string())),
    }
}

/// Dotted config keys with their default values.
pub fn default_keys() -> Vec<(String, String)> {
    let mut out = Vec::new();
    flatten("", &serde_json::to_value(RunConfig::default()).expect("serializable"), &mut out);
    out
}

pub fn description(key: &str) -> Option<&'static str> {
    DESCRIPTIONS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d)
}

/// The config reference appended to `--help`.
pub fn help_text() -> String {
    let keys = default_keys();
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (JSON, unknown keys rejected) with defaults:\n");
    for (k, v) in keys {
        s.push_str(&format!("  {k:width$}  {v:>14}  {}\n", description(&k).unwrap_or("")));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_documented() {
        for (k, _) in default_keys() {
            assert!(description(&k).is_some(), "undocumented config key {k}");
        }
        assert_eq!(default_keys().len(), DESCRIPTIONS.len());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"finetune": {"iterations": 5, "learning_rate": 1}}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&p)), Err(CliError::Config(_))));
        std::fs::write(&p, r#"{"finetune": {"iterations": 5}}"#).unwrap();
        let cfg = RunConfig::load(Some(&p)).unwrap();
        assert_eq!(cfg.finetune.iterations, 5);
        assert_eq!(cfg.finetune.lr, 2e-5);
    }

    #[test]
    fn defaults_follow_the_published_schedule() {
        let c = RunConfig::default();
        let w = &c.weights;
        assert_eq!(
            [w.lambda0, w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5, w.lambda6, w.lambda7, w.alpha],
            [0.1, 1.0, 10.0, 0.1, 10.0, 1.0, 10.0, 0.1, 5.0]
        );
        assert_eq!(c.finetune.iterations, 500);
        assert_eq!(c.finetune.lr, 2e-5);
    }
}
