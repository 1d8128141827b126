#![allow(dead_code)]

use nerfinv_core::losses::{EmbedderConfig, FeatureEncoder, IdentityEmbedder, LossModels, RenderSetup};
use nerfinv_core::renderer::SamplingConfig;
use nerfinv_core::{Generator, GeneratorConfig};
use std::sync::OnceLock;

pub fn tiny_config() -> GeneratorConfig {
    GeneratorConfig {
        layers: 2,
        width: 8,
        latent_dim: 4,
        octaves: 2,
        init_seed: 5,
    }
}

/// Tiny generator whose density head is offset by `bias`, so renders carry
/// foreground regardless of the random weights.
pub fn biased_gen(bias: f64, seed: u64) -> Generator<f64> {
    let cfg = GeneratorConfig {
        init_seed: seed,
        ..tiny_config()
    };
    let mut params = Generator::<f64>::new(cfg.clone()).params().clone();
    let last = params.len() - 1;
    params.tensors_mut()[last][[0]] = bias;
    Generator::from_params(cfg, params).unwrap()
}

pub fn tiny_setup() -> RenderSetup {
    RenderSetup {
        sampling: SamplingConfig {
            samples_per_ray: 8,
            ..Default::default()
        },
        resolution: 4,
        neighbor_resolution: 4,
    }
}

/// Embedder trained once per test binary at the default settings.
pub fn trained_embedder() -> &'static (IdentityEmbedder<f64>, f64) {
    static EMB: OnceLock<(IdentityEmbedder<f64>, f64)> = OnceLock::new();
    EMB.get_or_init(|| {
        let (e, report) = IdentityEmbedder::<f64>::train(&EmbedderConfig::default()).unwrap();
        (e, report.accuracy)
    })
}

/// Cheap models for objective plumbing tests.
pub fn quick_models() -> LossModels<f64> {
    let cfg = EmbedderConfig {
        identities: 2,
        views: 1,
        resolution: 8,
        samples_per_ray: 8,
        epochs: 1,
        ..Default::default()
    };
    LossModels {
        encoder: FeatureEncoder::new(FeatureEncoder::<f64>::DEFAULT_SEED),
        embedder: IdentityEmbedder::train(&cfg).unwrap().0,
    }
}
