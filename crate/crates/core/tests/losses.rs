mod common;

use common::{biased_gen, quick_models, tiny_setup, trained_embedder};
use nerfinv_core::losses::*;
use nerfinv_core::numcore::Tape;
use nerfinv_core::pipeline::median;
use nerfinv_core::renderer::{CameraPose, MaskedView, RenderedImage, Resolution, SamplingConfig};
use nerfinv_core::synthworld::{render_gt, sample_pose};
use nerfinv_core::{ExpressionParams, IdentityParams, LatentCode};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gt(seed: u64, e: ExpressionParams, pose: &CameraPose) -> RenderedImage {
    let sampling = SamplingConfig {
        samples_per_ray: 32,
        ..Default::default()
    };
    render_gt(&IdentityParams::from_seed(seed), &e, pose, Resolution::square(32), &sampling).unwrap()
}

fn shift_right(img: &RenderedImage, px: usize) -> RenderedImage {
    let (h, w, _) = img.rgb.dim();
    let rgb = Array3::from_shape_fn((h, w, 3), |(i, j, c)| if j >= px { img.rgb[[i, j - px, c]] } else { 0.0 });
    RenderedImage::from_rgb(rgb)
}

fn perc(enc: &FeatureEncoder<f64>, a: &RenderedImage, b: &RenderedImage) -> f64 {
    let tape = Tape::new();
    l_perc(enc, tape.constant(a.rgb_rows()), tape.constant(b.rgb_rows()), a.resolution()).item()
}

fn ident(emb: &IdentityEmbedder<f64>, a: &RenderedImage, b: &RenderedImage) -> f64 {
    let tape = Tape::new();
    l_id(emb, tape.constant(a.rgb_rows()), tape.constant(b.rgb_rows()), a.resolution()).item()
}

#[test]
fn embedder_passes_fitness_gate() {
    let (emb, accuracy) = trained_embedder();
    assert!(*accuracy >= 0.9, "training accuracy {accuracy}");
    let img = gt(3, ExpressionParams::new(0.0, 0.0), &CameraPose::new(0.1, 0.0));
    let e = emb.embed_image(&img);
    let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-9);
}

#[test]
fn identity_loss_separates_identities() {
    let (emb, _) = trained_embedder();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for _ in 0..50 {
        let (a, b): (u64, u64) = (rng.gen(), rng.gen());
        let e = ExpressionParams::sample(&mut rng);
        let v1 = gt(a, e, &sample_pose(&mut rng));
        let v2 = gt(a, ExpressionParams::sample(&mut rng), &sample_pose(&mut rng));
        let other = gt(b, e, &sample_pose(&mut rng));
        same.push(ident(emb, &v1, &v2));
        diff.push(ident(emb, &v1, &other));
    }
    assert!(median(&mut same) < median(&mut diff));
}

/// Losses of a 2px-shifted copy and of an unrelated identity's render, for
/// `n` sampled images.
fn shift_vs_unrelated(n: usize) -> (Vec<f64>, Vec<f64>) {
    let enc = FeatureEncoder::<f64>::new(FeatureEncoder::<f64>::DEFAULT_SEED);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    (0..n)
        .map(|_| {
            let img = gt(rng.gen(), ExpressionParams::sample(&mut rng), &sample_pose(&mut rng));
            let other = gt(rng.gen(), ExpressionParams::sample(&mut rng), &sample_pose(&mut rng));
            (perc(&enc, &img, &shift_right(&img, 2)), perc(&enc, &img, &other))
        })
        .unzip()
}

#[test]
fn perceptual_loss_prefers_translated_copy_over_other_identity() {
    let (mut shifted, mut other) = shift_vs_unrelated(20);
    let wins = shifted.iter().zip(&other).filter(|(s, o)| s < o).count();
    eprintln!("shifted copy closer in {wins}/20 pairs");
    assert!(wins > 10);
    assert!(median(&mut shifted) < median(&mut other));
}

fn random_input(seed: u64) -> (RenderedImage, CameraPose, ExpressionParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = CameraPose::new(rng.gen_range(-0.2..0.2), 0.0);
    let e = ExpressionParams::sample(&mut rng);
    let sampling = SamplingConfig {
        samples_per_ray: 16,
        ..Default::default()
    };
    let img = render_gt(&IdentityParams::from_seed(seed), &e, &pose, Resolution::square(4), &sampling).unwrap();
    (img, pose, e)
}

#[test]
fn image_space_loss_is_weighted_sum_of_terms() {
    let models = quick_models();
    let g = biased_gen(1.0, 9);
    let (input, pose, e) = random_input(1);
    let z = LatentCode::w(vec![0.3, -0.2, 0.1, 0.5]);
    let setup = tiny_setup();
    let weights = LossWeights::default();
    let tape = Tape::new();
    let bound = g.bind(&tape, true);
    let zv = bound.latent(&tape, &z).unwrap();
    let total = image_space_loss(&models, &bound, zv, &input, &pose, e, &weights, &setup).unwrap().item();

    let tape = Tape::new();
    let bound = g.bind(&tape, false);
    let zv = bound.latent(&tape, &z).unwrap();
    let render = render_generator(&bound, zv, e, &pose, input.resolution(), &setup.options(None)).unwrap().rgb();
    let target = tape.constant(input.rgb_rows());
    let res = input.resolution();
    let pix = l_pix(render, target, None).unwrap().item();
    let per = l_perc(&models.encoder, render, target, res).item();
    let id = l_id(&models.embedder, render, target, res).item();
    let expected = weights.lambda1 * pix + weights.lambda2 * per + weights.lambda3 * id;
    assert!((total - expected).abs() <= 1e-12 * expected.abs().max(1.0));
}

#[test]
fn total_loss_recomputes_term_by_term() {
    let models = quick_models();
    let go = biased_gen(1.0, 9).clone_frozen();
    let gf = biased_gen(1.2, 10);
    let (input, pose, e) = random_input(2);
    let z = LatentCode::w(vec![0.1, 0.2, -0.3, 0.4]);
    let setup = tiny_setup();
    let weights = LossWeights::default();
    let masked = MaskedView {
        pose,
        mask: input.mask(),
    };
    for mv in [None, Some(&masked)] {
        let inp = TotalInputs {
            models: &models,
            z_init: &z,
            input: &input,
            pose: &pose,
            expression: e,
            weights: &weights,
            setup: &setup,
            masked: mv,
            symmetric_chamfer: false,
        };
        let tape = Tape::new();
        let (bf, bo) = (gf.bind(&tape, true), go.bind(&tape, false));
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let t = total_loss(&bf, &bo, &inp, &mut rng, &tape).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draw = draw_neighbor(&z, weights.alpha, &mut rng);
        assert_eq!(draw, t.draw);
        let tape = Tape::new();
        let (bf, bo) = (gf.bind(&tape, true), go.bind(&tape, false));
        let zv = bf.latent(&tape, &z).unwrap();
        let img = image_space_loss(&models, &bf, zv, &input, &pose, e, &weights, &setup).unwrap().item();
        let exp = explicit_geom_loss(&bf, &bo, &draw, mv, &setup, false, &tape).unwrap().item();
        let imp = implicit_geom_loss(&models, &bf, &bo, &draw, &weights, mv, &setup, &tape).unwrap().item();
        let expected = img + weights.lambda4 * exp + imp;
        assert!(exp > 0.0);
        assert!((t.total.item() - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }
}

#[test]
fn zero_regularizer_weights_reduce_to_image_loss_bit_exactly() {
    let models = quick_models();
    let go = biased_gen(1.0, 9).clone_frozen();
    let gf = biased_gen(1.3, 11);
    let setup = tiny_setup();
    let weights = LossWeights {
        lambda4: 0.0,
        lambda5: 0.0,
        lambda6: 0.0,
        lambda7: 0.0,
        ..Default::default()
    };
    for seed in 0..10u64 {
        let (input, pose, e) = random_input(100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = LatentCode::w((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let inp = TotalInputs {
            models: &models,
            z_init: &z,
            input: &input,
            pose: &pose,
            expression: e,
            weights: &weights,
            setup: &setup,
            masked: None,
            symmetric_chamfer: false,
        };
        let tape = Tape::new();
        let (bf, bo) = (gf.bind(&tape, true), go.bind(&tape, false));
        let total = total_loss(&bf, &bo, &inp, &mut rng, &tape).unwrap().total.item();
        let tape = Tape::new();
        let bf = gf.bind(&tape, true);
        let zv = bf.latent(&tape, &z).unwrap();
        let img = image_space_loss(&models, &bf, zv, &input, &pose, e, &weights, &setup).unwrap().item();
        assert_eq!(total.to_bits(), img.to_bits(), "seed {seed}");
    }
}

#[test]
fn symmetric_chamfer_adds_reverse_direction() {
    let go = biased_gen(2.0, 9).clone_frozen();
    let gf = biased_gen(2.0, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draw = draw_neighbor(&LatentCode::w(vec![0.0; 4]), 1.0, &mut rng);
    let tape = Tape::new();
    let (bf, bo) = (gf.bind(&tape, true), go.bind(&tape, false));
    let one = explicit_geom_loss(&bf, &bo, &draw, None, &tiny_setup(), false, &tape).unwrap().item();
    let both = explicit_geom_loss(&bf, &bo, &draw, None, &tiny_setup(), true, &tape).unwrap().item();
    assert!(one > 0.0);
    assert!(both > one);
}

/// Exhaustive oracle: for every source point scan all targets, keep the first
/// strict minimum, and average the attribute error.
fn brute_force_chamfer(so: &Cloud, sf: &Cloud) -> f64 {
    let mut total = 0.0;
    for i in 0..so.densities.len() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..sf.densities.len() {
            let d = (0..3).map(|c| (so.points[[i, c]] - sf.points[[j, c]]).powi(2)).sum::<f64>();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        let ds = (sf.densities[best] - so.densities[i]).powi(2);
        let dc: f64 = (0..3).map(|c| (sf.colors[[best, c]] - so.colors[[i, c]]).powi(2)).sum();
        total += ds + dc;
    }
    total / so.densities.len() as f64
}

fn arb_cloud(max: usize) -> impl Strategy<Value = Cloud> {
    (1..max).prop_flat_map(|n| {
        (
            prop::collection::vec(-1.0..1.0f64, n * 3),
            prop::collection::vec(0.0..5.0f64, n),
            prop::collection::vec(0.0..1.0f64, n * 3),
        )
            .prop_map(move |(p, d, c)| Cloud {
                points: Array2::from_shape_vec((n, 3), p).unwrap(),
                densities: d,
                colors: Array2::from_shape_vec((n, 3), c).unwrap(),
            })
    })
}

proptest! {
    #[test]
    fn neighbor_lies_at_distance_alpha(
        z in prop::collection::vec(-3.0..3.0f64, 1..20),
        alpha in 0.0..20.0f64,
        seed in any::<u64>(),
    ) {
        let init = LatentCode::w(z);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = sample_neighbor(&init, alpha, &mut rng);
        prop_assert!((n.distance(&init) - alpha).abs() < 1e-9);
    }

    #[test]
    fn chamfer_matches_exhaustive_oracle(so in arb_cloud(12), sf in arb_cloud(12)) {
        let got = attributed_chamfer(&so, &sf);
        let want = brute_force_chamfer(&so, &sf);
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1.0));
        prop_assert!(got >= 0.0);
        prop_assert_eq!(attributed_chamfer(&so, &so), 0.0);
    }

    #[test]
    fn pixel_loss_is_symmetric_and_nonnegative(
        a in prop::collection::vec(0.0..1.0f64, 48),
        b in prop::collection::vec(0.0..1.0f64, 48),
    ) {
        let tape = Tape::<f64>::new();
        let ta = tape.constant(ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[16, 3]), a).unwrap());
        let tb = tape.constant(ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[16, 3]), b).unwrap());
        let ab = l_pix(ta, tb, None).unwrap().item();
        let ba = l_pix(tb, ta, None).unwrap().item();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= 0.0);
    }
}
