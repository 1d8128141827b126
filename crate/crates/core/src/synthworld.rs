//! Procedural ground-truth world: soft-ellipsoid heads with an angular
//! texture, two eye blobs and an analytic expression warp, plus dataset
//! generation and persistence.

use crate::error::{Error, Result};
use crate::io::{save_depth_png, save_mask_png, save_rgb_png};
use crate::numcore::{Real, Tape, Var};
use crate::renderer::{dot, norm, render, CameraPose, Field, RadianceSample, RenderOptions, RenderedImage, Resolution, SamplingConfig, Vec3};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

pub const SIGMA_MAX: f64 = 50.0;
pub const K_SHARP: f64 = 20.0;
pub const TEXTURE_DIM: usize = 8;

pub const YAW_RANGE: (f64, f64) = (-0.6, 0.6);
pub const PITCH_RANGE: (f64, f64) = (-0.3, 0.3);

const BASE_COLOR: [f64; 3] = [0.9, 0.2, -0.4];
const EYE_COLOR: [f64; 3] = [0.05, 0.08, 0.15];
/// Channel mix of each texture basis function.
const TEXTURE_MIX: [[f64; 3]; TEXTURE_DIM] = [
    [0.8, 0.3, -0.2],
    [-0.3, 0.6, 0.4],
    [0.2, -0.4, 0.9],
    [0.6, 0.6, 0.1],
    [-0.5, 0.2, 0.5],
    [0.4, -0.3, -0.6],
    [0.1, 0.7, -0.3],
    [-0.2, -0.2, 0.8],
];

/// Expression `(e₁, e₂)`: jaw opening and smile shear, each in `[−1, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpressionParams(pub [f64; 2]);

impl ExpressionParams {
    pub const NEUTRAL: ExpressionParams = ExpressionParams([0.0, 0.0]);

    pub fn new(e1: f64, e2: f64) -> Self {
        Self([e1, e2])
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self([rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyeBlob {
    /// Unit direction from the head center in canonical space.
    pub direction: Vec3,
    /// Chordal radius on the unit sphere.
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub axes: Vec3,
    pub center: Vec3,
    pub texture: [f64; TEXTURE_DIM],
    pub eyes: [EyeBlob; 2],
    pub expr_sensitivity: f64,
}

impl IdentityParams {
    /// Deterministic draw from an identity seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let axes = [
            rng.gen_range(0.2..=0.3),
            rng.gen_range(0.25..=0.35),
            rng.gen_range(0.15..=0.35),
        ];
        let center = loop {
            let c: Vec3 = std::array::from_fn(|_| rng.gen_range(-0.05..=0.05));
            if norm(c) <= 0.05 {
                break c;
            }
        };
        let texture = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
        let ex: f64 = rng.gen_range(0.25..=0.45);
        let ey: f64 = rng.gen_range(0.1..=0.3);
        let ez = (1.0 - ex * ex - ey * ey).sqrt();
        let radius = rng.gen_range(0.12..=0.2);
        let eyes = [
            EyeBlob {
                direction: [-ex, ey, ez],
                radius,
            },
            EyeBlob {
                direction: [ex, ey, ez],
                radius,
            },
        ];
        Self {
            axes,
            center,
            texture,
            eyes,
            expr_sensitivity: rng.gen_range(0.5..=1.5),
        }
    }

    /// Normalized radial coordinate `||(x − μ)/a||` of a canonical point.
    pub fn radial(&self, canonical: Vec3) -> f64 {
        let q: Vec3 = std::array::from_fn(|c| (canonical[c] - self.center[c]) / self.axes[c]);
        norm(q)
    }
}

/// Maps an observed point to the neutral (canonical) head. Lower-half
/// vertical stretch by `e₁`, lateral shear by `e₂`; identity at `e = 0`.
pub fn expression_warp(id: &IdentityParams, e: &ExpressionParams, x: Vec3) -> Vec3 {
    let s = id.expr_sensitivity;
    let lower = 1.0 / (1.0 + (20.0 * (x[1] - id.center[1])).exp());
    let gain = 0.25 * s * e.0[0] * lower;
    let y = x[1] - (x[1] - id.center[1]) * gain / (1.0 + gain);
    let shear = 0.15 * s * e.0[1] * (x[1] - id.center[1]);
    [x[0] - shear, y, x[2]]
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn texture_basis(u: Vec3) -> [f64; TEXTURE_DIM] {
    [
        u[0],
        u[1],
        u[2],
        u[0] * u[1],
        u[1] * u[2],
        u[0] * u[2],
        u[0] * u[0] - u[1] * u[1],
        3.0 * u[2] * u[2] - 1.0,
    ]
}

/// Analytic radiance of identity `id` under expression `e`.
pub fn gt_field(id: &IdentityParams, e: &ExpressionParams, x: Vec3) -> RadianceSample {
    let w = expression_warp(id, e, x);
    let q: Vec3 = std::array::from_fn(|c| (w[c] - id.center[c]) / id.axes[c]);
    let r = norm(q);
    let sigma = SIGMA_MAX * sigmoid(K_SHARP * (1.0 - r));
    let u = if r > 1e-12 { [q[0] / r, q[1] / r, q[2] / r] } else { [0.0, 0.0, 1.0] };
    let basis = texture_basis(u);
    let mut color = [0.0; 3];
    for (ch, out) in color.iter_mut().enumerate() {
        let mut v = BASE_COLOR[ch];
        for k in 0..TEXTURE_DIM {
            v += 0.8 * id.texture[k] * basis[k] * TEXTURE_MIX[k][ch];
        }
        *out = sigmoid(v);
    }
    for eye in &id.eyes {
        let chord = norm(std::array::from_fn(|c| u[c] - eye.direction[c]));
        let weight = sigmoid(40.0 * (eye.radius - chord)) * sigmoid(10.0 * dot(u, eye.direction));
        for ch in 0..3 {
            color[ch] += weight * (EYE_COLOR[ch] - color[ch]);
        }
    }
    RadianceSample { color, sigma }
}

/// The analytic field as a batch [`Field`]; outputs are tape constants.
#[derive(Clone, Debug)]
pub struct GtField {
    pub id: IdentityParams,
    pub e: ExpressionParams,
}

impl GtField {
    pub fn new(id: IdentityParams, e: ExpressionParams) -> Self {
        Self { id, e }
    }
}

impl<'t, R: Real> Field<'t, R> for GtField {
    fn eval(&self, tape: &'t Tape<R>, points: Var<'t, R>) -> Result<(Var<'t, R>, Var<'t, R>)> {
        let p = points.value();
        let n = p.shape()[0];
        let mut sigma = ArrayD::<R>::zeros(IxDyn(&[n, 1]));
        let mut color = ArrayD::<R>::zeros(IxDyn(&[n, 3]));
        for i in 0..n {
            let s = gt_field(&self.id, &self.e, [p[[i, 0]].f64(), p[[i, 1]].f64(), p[[i, 2]].f64()]);
            sigma[[i, 0]] = R::lit(s.sigma);
            for c in 0..3 {
                color[[i, c]] = R::lit(s.color[c]);
            }
        }
        Ok((tape.constant(sigma), tape.constant(color)))
    }
}

/// Uniform draw from the dataset pose prior at the default radius.
pub fn sample_pose(rng: &mut impl Rng) -> CameraPose {
    CameraPose::new(rng.gen_range(YAW_RANGE.0..=YAW_RANGE.1), rng.gen_range(PITCH_RANGE.0..=PITCH_RANGE.1))
}

/// Ground-truth render, always at stratum midpoints so it is reproducible.
pub fn render_gt(id: &IdentityParams, e: &ExpressionParams, pose: &CameraPose, res: Resolution, sampling: &SamplingConfig) -> Result<RenderedImage> {
    render::<f64, _>(&GtField::new(id.clone(), *e), pose, res, &RenderOptions::new(sampling.clone()))
}

/// Dataset generation parameters; persisted as `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_ids: usize,
    pub views_per_id: usize,
    pub expr_per_view: usize,
    pub held_out_ids: usize,
    pub resolution: usize,
    pub seed: u64,
    pub sampling: SamplingConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_ids: 20,
            views_per_id: 4,
            expr_per_view: 1,
            held_out_ids: 10,
            resolution: 32,
            seed: 0,
            sampling: SamplingConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: usize,
    pub seed: u64,
    pub expression: ExpressionParams,
    pub pose: CameraPose,
    #[serde(skip)]
    pub image: Option<RenderedImage>,
}

impl Record {
    pub fn image(&self) -> &RenderedImage {
        self.image.as_ref().expect("record rendered")
    }

    pub fn identity(&self) -> IdentityParams {
        IdentityParams::from_seed(self.seed)
    }
}

/// Training records plus the seeds of held-out identities.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub train_seeds: Vec<u64>,
    pub held_out_seeds: Vec<u64>,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn resolution(&self) -> Resolution {
        Resolution::square(self.config.resolution)
    }

    pub fn held_out_identities(&self) -> Vec<IdentityParams> {
        self.held_out_seeds.iter().map(|&s| IdentityParams::from_seed(s)).collect()
    }
}

/// Generates `n_ids` training identities, `views_per_id` poses each and
/// `expr_per_view` expressions per pose, rendered from the analytic field.
pub fn make_dataset(cfg: &WorldConfig) -> Result<Dataset> {
    if cfg.n_ids == 0 {
        return Err(Error::EmptyDataset);
    }
    if cfg.views_per_id == 0 || cfg.expr_per_view == 0 {
        return Err(Error::InvalidArgument("views_per_id and expr_per_view must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = HashSet::new();
    let mut draw = |rng: &mut ChaCha8Rng| loop {
        let s: u64 = rng.gen();
        if seen.insert(s) {
            break s;
        }
    };
    let train_seeds: Vec<u64> = (0..cfg.n_ids).map(|_| draw(&mut rng)).collect();
    let held_out_seeds: Vec<u64> = (0..cfg.held_out_ids).map(|_| draw(&mut rng)).collect();
    let res = Resolution::square(cfg.resolution);
    let mut records = Vec::with_capacity(cfg.n_ids * cfg.views_per_id * cfg.expr_per_view);
    for (id, &seed) in train_seeds.iter().enumerate() {
        let identity = IdentityParams::from_seed(seed);
        for _ in 0..cfg.views_per_id {
            let pose = sample_pose(&mut rng);
            for _ in 0..cfg.expr_per_view {
                let expression = ExpressionParams::sample(&mut rng);
                let image = render_gt(&identity, &expression, &pose, res, &cfg.sampling)?;
                records.push(Record {
                    id,
                    seed,
                    expression,
                    pose,
                    image: Some(image),
                });
            }
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        train_seeds,
        held_out_seeds,
        records,
    })
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: WorldConfig,
    train_seeds: Vec<u64>,
    held_out_seeds: Vec<u64>,
    yaw_range: (f64, f64),
    pitch_range: (f64, f64),
    records: usize,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    id: usize,
    seed: u64,
    e1: f64,
    e2: f64,
    yaw: f64,
    pitch: f64,
}

/// Writes `meta.json`, `records.csv` and per-record image, depth and mask PNGs.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "depth", "masks"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let meta = Meta {
        config: ds.config.clone(),
        train_seeds: ds.train_seeds.clone(),
        held_out_seeds: ds.held_out_seeds.clone(),
        yaw_range: YAW_RANGE,
        pitch_range: PITCH_RANGE,
        records: ds.records.len(),
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    let mut w = csv::Writer::from_path(dir.join("records.csv"))?;
    for (k, r) in ds.records.iter().enumerate() {
        w.serialize(CsvRow {
            id: r.id,
            seed: r.seed,
            e1: r.expression.0[0],
            e2: r.expression.0[1],
            yaw: r.pose.yaw,
            pitch: r.pose.pitch,
        })?;
        let img = r.image();
        save_rgb_png(&img.rgb, &dir.join(format!("images/{k:05}.png")))?;
        save_depth_png(&img.depth, &dir.join(format!("depth/{k:05}.png")))?;
        save_mask_png(&img.mask(), &dir.join(format!("masks/{k:05}.png")))?;
    }
    w.flush()?;
    Ok(())
}

/// Reloads a saved dataset by regenerating it from `meta.json` and checking
/// the result against `records.csv`.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::Missing(meta_path.display().to_string()));
    }
    let meta: Meta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
    let ds = make_dataset(&meta.config)?;
    let mut rdr = csv::Reader::from_path(dir.join("records.csv"))?;
    let rows: Vec<CsvRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    let consistent = rows.len() == ds.records.len()
        && ds.train_seeds == meta.train_seeds
        && ds.held_out_seeds == meta.held_out_seeds
        && rows.iter().zip(&ds.records).all(|(row, r)| {
            row.seed == r.seed && row.yaw == r.pose.yaw && row.pitch == r.pose.pitch && row.e1 == r.expression.0[0] && row.e2 == r.expression.0[1]
        });
    if !consistent {
        return Err(Error::InvalidArgument(format!("{} does not match its meta.json", dir.display())));
    }
    Ok(ds)
}
