//! Latent-conditioned radiance field `G(z, e, x) → (c, σ)`.
//!
//! A coordinate MLP over positionally encoded points. Every hidden layer is
//! modulated by a per-layer FiLM scale and shift computed from the latent
//! code concatenated with the expression. In W mode one latent feeds every
//! layer; in W+ mode each layer reads its own code.

use crate::error::{Error, Result};
use crate::numcore::{ParamSet, Real, Tape, Tensor, Var};
use crate::renderer::{Field, RadianceSample, Vec3};
use crate::synthworld::ExpressionParams;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Architecture; persisted as `generator.json` next to checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub layers: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub octaves: usize,
    #[serde(default = "GeneratorConfig::default_init_seed")]
    pub init_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 32,
            latent_dim: 16,
            octaves: 6,
            init_seed: Self::default_init_seed(),
        }
    }
}

impl GeneratorConfig {
    pub const EXPR_DIM: usize = 2;

    fn default_init_seed() -> u64 {
        17
    }

    pub fn encoded_dim(&self) -> usize {
        3 + 6 * self.octaves
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentMode {
    #[serde(rename = "W")]
    W,
    #[serde(rename = "W+")]
    WPlus,
}

impl std::str::FromStr for LatentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "W" | "w" => Ok(LatentMode::W),
            "W+" | "w+" | "WPlus" => Ok(LatentMode::WPlus),
            other => Err(Error::InvalidArgument(format!("unknown latent mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for LatentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LatentMode::W => "W",
            LatentMode::WPlus => "W+",
        })
    }
}

/// A point in latent space: one row (W) or one row per modulated layer (W+).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub mode: LatentMode,
    pub codes: Vec<Vec<f64>>,
}

impl LatentCode {
    pub fn w(code: Vec<f64>) -> Self {
        Self {
            mode: LatentMode::W,
            codes: vec![code],
        }
    }

    pub fn w_plus(codes: Vec<Vec<f64>>) -> Self {
        Self {
            mode: LatentMode::WPlus,
            codes,
        }
    }

    pub fn dim(&self) -> usize {
        self.codes.first().map_or(0, Vec::len)
    }

    /// Row-per-code matrix.
    pub fn to_tensor<R: Real>(&self) -> Tensor<R> {
        let rows = self.codes.len();
        let dim = self.dim();
        ArrayD::from_shape_fn(IxDyn(&[rows, dim]), |ix| R::lit(self.codes[ix[0]][ix[1]]))
    }

    pub fn from_tensor<R: Real>(mode: LatentMode, t: &Tensor<R>) -> Self {
        let (rows, dim) = (t.shape()[0], t.shape()[1]);
        Self {
            mode,
            codes: (0..rows).map(|r| (0..dim).map(|c| t[[r, c]].f64()).collect()).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.codes.iter().flatten().all(|v| v.is_finite())
    }

    /// Euclidean distance over all entries.
    pub fn distance(&self, other: &LatentCode) -> f64 {
        self.codes
            .iter()
            .flatten()
            .zip(other.codes.iter().flatten())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-layer copies of a W-mode latent.
pub fn broadcast_latent(w: &LatentCode, layers: usize) -> Result<LatentCode> {
    if w.mode != LatentMode::W || w.codes.len() != 1 {
        return Err(Error::InvalidArgument("broadcast_latent expects a W-mode latent".into()));
    }
    Ok(LatentCode::w_plus(vec![w.codes[0].clone(); layers]))
}

/// Network weights plus architecture. Frozen copies refuse mutation.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<R: Real> {
    pub config: GeneratorConfig,
    params: ParamSet<R>,
    trainable: bool,
}

impl<R: Real> Generator<R> {
    /// Random initialization from `config.init_seed`.
    pub fn new(config: GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamSet::new();
        let mut gauss = |rows: usize, cols: usize, std: f64| -> Tensor<R> {
            let n = Normal::new(0.0, std).unwrap();
            Array2::from_shape_fn((rows, cols), |_| R::lit(n.sample(&mut rng))).into_dyn()
        };
        let w = config.width;
        let cond = config.latent_dim + GeneratorConfig::EXPR_DIM;
        let mut fan_in = config.encoded_dim();
        for l in 0..config.layers {
            params.push(format!("mlp{l}.weight"), gauss(fan_in, w, (2.0 / fan_in as f64).sqrt()));
            params.push(format!("mlp{l}.bias"), ArrayD::zeros(IxDyn(&[w])));
            params.push(format!("film{l}.weight"), gauss(cond, 2 * w, 0.25 / (cond as f64).sqrt()));
            params.push(format!("film{l}.bias"), ArrayD::zeros(IxDyn(&[2 * w])));
            fan_in = w;
        }
        params.push("head.weight", gauss(w, 4, (1.0 / w as f64).sqrt()));
        let mut head_bias = ArrayD::zeros(IxDyn(&[4]));
        head_bias[[0]] = R::lit(-1.0);
        params.push("head.bias", head_bias);
        Self {
            config,
            params,
            trainable: true,
        }
    }

    pub fn from_params(config: GeneratorConfig, params: ParamSet<R>) -> Result<Self> {
        let reference = Self::new(config.clone());
        if reference.params.names() != params.names()
            || reference.params.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::InvalidArgument("checkpoint does not match generator architecture".into()));
        }
        Ok(Self {
            config,
            params,
            trainable: true,
        })
    }

    pub fn params(&self) -> &ParamSet<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> Result<&mut ParamSet<R>> {
        if self.trainable {
            Ok(&mut self.params)
        } else {
            Err(Error::Frozen)
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Deep copy with the trainable flag cleared.
    pub fn clone_frozen(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            trainable: false,
        }
    }

    /// Trainable deep copy (the starting point of a fine-tune).
    pub fn clone_trainable(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            trainable: true,
        }
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    /// Places the weights on `tape`, tracked or constant.
    pub fn bind<'t>(&self, tape: &'t Tape<R>, tracked: bool) -> BoundGenerator<'t, R> {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| if tracked { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        BoundGenerator::from_vars(self.config.clone(), vars)
    }

    /// Single-point radiance.
    pub fn radiance(&self, z: &LatentCode, e: &ExpressionParams, x: Vec3) -> Result<RadianceSample> {
        let tape = Tape::<R>::new();
        let g = self.bind(&tape, false);
        let lat = g.latent(&tape, z)?;
        let pts = tape.constant(ArrayD::from_shape_fn(IxDyn(&[1, 3]), |ix| R::lit(x[ix[1]])));
        let (s, c) = g.forward(lat, e, pts)?;
        tape.check()?;
        let (sv, cv) = (s.value(), c.value());
        Ok(RadianceSample {
            sigma: sv[[0, 0]].f64(),
            color: [cv[[0, 0]].f64(), cv[[0, 1]].f64(), cv[[0, 2]].f64()],
        })
    }
}

/// Weights placed on a tape.
pub struct BoundGenerator<'t, R: Real> {
    pub config: GeneratorConfig,
    vars: Vec<Var<'t, R>>,
}

impl<'t, R: Real> BoundGenerator<'t, R> {
    /// `vars` in the generator's parameter order.
    pub fn from_vars(config: GeneratorConfig, vars: Vec<Var<'t, R>>) -> Self {
        assert_eq!(vars.len(), 4 * config.layers + 2, "generator parameter count");
        Self { config, vars }
    }

    pub fn vars(&self) -> &[Var<'t, R>] {
        &self.vars
    }

    /// Constant latent matrix for `z`, checked against the layer count.
    pub fn latent(&self, tape: &'t Tape<R>, z: &LatentCode) -> Result<Var<'t, R>> {
        self.check_latent(z.mode, z.codes.len(), z.dim())?;
        Ok(tape.constant(z.to_tensor()))
    }

    pub fn check_latent(&self, mode: LatentMode, rows: usize, dim: usize) -> Result<()> {
        let expected = match mode {
            LatentMode::W => 1,
            LatentMode::WPlus => self.config.layers,
        };
        if rows != expected {
            return Err(Error::LatentLayers { found: rows, expected });
        }
        if dim != self.config.latent_dim {
            return Err(Error::InvalidArgument(format!(
                "latent dimension {dim}, generator expects {}",
                self.config.latent_dim
            )));
        }
        Ok(())
    }

    /// Densities `N×1` and colors `N×3` at `points` (`N×3`). `latent` has one
    /// row (W) or one row per layer (W+).
    pub fn forward(&self, latent: Var<'t, R>, e: &ExpressionParams, points: Var<'t, R>) -> Result<(Var<'t, R>, Var<'t, R>)> {
        let shape = latent.shape();
        let mode = if shape[0] == 1 { LatentMode::W } else { LatentMode::WPlus };
        self.check_latent(mode, shape[0], shape[1])?;
        let tape = latent.tape();
        let w = self.config.width;
        let expr = tape.constant(ArrayD::from_shape_fn(IxDyn(&[1, 2]), |ix| R::lit(e.0[ix[1]])));
        let mut h = points.posenc(self.config.octaves);
        for l in 0..self.config.layers {
            let row = if shape[0] == 1 { 0 } else { l };
            let code = latent.gather_rows(Rc::new(vec![row]));
            let cond = Var::concat_cols(&[code, expr]);
            let film = cond.matmul(self.vars[4 * l + 2]).add_row(self.vars[4 * l + 3]);
            let gamma = film.slice_cols(0, w).add_scalar(R::one());
            let beta = film.slice_cols(w, w);
            h = h.film_silu(self.vars[4 * l], self.vars[4 * l + 1], gamma, beta);
        }
        let n = self.vars.len();
        let out = h.matmul(self.vars[n - 2]).add_row(self.vars[n - 1]);
        let sigma = out.slice_cols(0, 1).softplus();
        let color = out.slice_cols(1, 3).sigmoid();
        Ok((sigma, color))
    }

    /// This generator as a radiance field for one latent and expression.
    pub fn field<'a>(&'a self, latent: Var<'t, R>, e: ExpressionParams) -> GeneratorField<'a, 't, R> {
        GeneratorField { gen: self, latent, e }
    }
}

/// A bound generator with a fixed latent and expression.
pub struct GeneratorField<'a, 't, R: Real> {
    gen: &'a BoundGenerator<'t, R>,
    latent: Var<'t, R>,
    e: ExpressionParams,
}

impl<'t, R: Real> Field<'t, R> for GeneratorField<'_, 't, R> {
    fn eval(&self, _tape: &'t Tape<R>, points: Var<'t, R>) -> Result<(Var<'t, R>, Var<'t, R>)> {
        self.gen.forward(self.latent, &self.e, points)
    }
}
