use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightDecayMode {
    /// `θ ← θ − lr·wd·θ`, applied before the Adam update.
    #[default]
    Decoupled,
    /// `g ← g + wd·θ`, i.e. L2 regularization folded into the gradient.
    Coupled,
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters whose gradient is `None` are
/// left untouched, moments included; the step counter advances once.
pub fn adam_step(
    names: &[String],
    params: &mut [Tensor<f32>],
    grads: &[Option<Tensor<f32>>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    mode: WeightDecayMode,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params[i].shape() {
                return Err(Error::shape(
                    names[i].clone(),
                    format!("gradient {:?} vs parameter {:?}", g.shape(), params[i].shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {}", names[i])));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let (b1, b2, eps) = (BETA1 as f32, BETA2 as f32, EPSILON as f32);
    let (lr32, wd32) = (lr as f32, weight_decay as f32);
    let (bc1, bc2) = (bc1 as f32, bc2 as f32);

    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = params[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for k in 0..p.len() {
            let mut gk = g.data()[k];
            match mode {
                WeightDecayMode::Coupled => gk += wd32 * p[k],
                WeightDecayMode::Decoupled => p[k] -= lr32 * wd32 * p[k],
            }
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr32 * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
