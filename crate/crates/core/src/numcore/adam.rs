use super::{NumError, Real, Tensor};
use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

/// Adam hyperparameters other than the step size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R: Real> {
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<R: Real> AdamState<R> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &[&Tensor<R>], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect::<Vec<_>>();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update, in place.
///
/// Nothing is modified when shapes disagree or a gradient is non-finite.
pub fn adam_step<R: Real>(
    params: &mut [&mut Tensor<R>],
    grads: &[Tensor<R>],
    state: &mut AdamState<R>,
    lr: f64,
) -> Result<(), NumError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NumError::ShapeMismatch {
            context: "adam parameter count",
            left: vec![params.len()],
            right: vec![grads.len(), state.m.len()],
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(NumError::ShapeMismatch {
                context: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.iter().all(|v| v.is_finite()) {
            return Err(NumError::NonFinite { op: "adam_step" });
        }
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (R::lit(cfg.beta1), R::lit(cfg.beta2));
    let (ob1, ob2) = (R::lit(1.0 - cfg.beta1), R::lit(1.0 - cfg.beta2));
    let (inv_bc1, inv_bc2) = (R::lit(1.0 / bc1), R::lit(1.0 / bc2));
    let (lr, eps) = (R::lit(lr), R::lit(cfg.eps));
    for (i, p) in params.iter_mut().enumerate() {
        Zip::from(&mut **p)
            .and(&grads[i])
            .and(&mut state.m[i])
            .and(&mut state.v[i])
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let m_hat = *m * inv_bc1;
                let v_hat = *v * inv_bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}
