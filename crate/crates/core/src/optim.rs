//! AdamW with configurable state precision: pure low-precision states, a
//! high-precision master copy, or stochastic rounding of the stored weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientSet, Model};
use crate::numerics::{quantize, RoundingMode};
use crate::precision::PrecisionPolicy;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr_peak: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    pub rounding: RoundingMode,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_peak: 4e-5,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
            eps: 1e-8,
            rounding: RoundingMode::NearestEven,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::InvalidConfig(format!(
                "betas must lie in [0, 1), got ({b1}, {b2})"
            )));
        }
        Ok(())
    }
}

/// First/second moments per parameter, stored in `optimizer_state_fmt`, plus
/// the optional high-precision master weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub master: Option<Vec<Matrix>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &Model, policy: &PrecisionPolicy) -> Self {
        let m = model
            .params
            .iter()
            .map(|p| Matrix::zeros(p.values.rows, p.values.cols))
            .collect();
        let v = model
            .params
            .iter()
            .map(|p| Matrix::zeros(p.values.rows, p.values.cols))
            .collect();
        let master = policy.master_weights.then(|| {
            model
                .params
                .iter()
                .map(|p| {
                    let mut w = p.values.clone();
                    w.quantize_in_place(policy.optimizer_state_fmt, RoundingMode::NearestEven);
                    w
                })
                .collect()
        });
        OptimizerState {
            m,
            v,
            master,
            step: 0,
        }
    }
}

/// One AdamW step over every parameter.
pub fn adamw_step(
    model: &mut Model,
    grads: &GradientSet,
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
    policy: &PrecisionPolicy,
    lr: f64,
) -> Result<()> {
    adamw_step_masked(model, grads, state, cfg, policy, lr, None)
}

/// One AdamW step updating only the parameters whose mask entry is true
/// (all parameters when `mask` is `None`). Masked-out parameters keep their
/// weights and moments bit-identical.
pub fn adamw_step_masked(
    model: &mut Model,
    grads: &GradientSet,
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
    policy: &PrecisionPolicy,
    lr: f64,
    mask: Option<&[bool]>,
) -> Result<()> {
    cfg.validate()?;
    policy.validate()?;
    if grads.grads.len() != model.params.len() {
        return Err(Error::ShapeMismatch(
            "gradient set does not match parameter set".into(),
        ));
    }
    if let Some(mask) = mask {
        if mask.len() != model.params.len() {
            return Err(Error::ShapeMismatch(
                "trainable mask does not match parameter set".into(),
            ));
        }
    }
    for (i, param) in model.params.iter().enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        for &g in &grads.grads[i].data {
            if g.is_nan() {
                return Err(Error::NumericalAbort(format!(
                    "gradient of {}",
                    param.name
                )));
            }
        }
    }

    let (b1, b2) = cfg.betas;
    let t = state.step + 1;
    let bias1 = 1.0 - b1.powi(t as i32);
    let bias2 = 1.0 - b2.powi(t as i32);
    let state_fmt = policy.optimizer_state_fmt;

    for (i, param) in model.params.iter_mut().enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let g = &grads.grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for k in 0..param.values.data.len() {
            let gk = g.data[k];
            // Moments update wide, then stored back in the state format.
            let mk = quantize(b1 * m.data[k] + (1.0 - b1) * gk, state_fmt, cfg.rounding);
            let vk = quantize(b2 * v.data[k] + (1.0 - b2) * gk * gk, state_fmt, cfg.rounding);
            m.data[k] = mk;
            v.data[k] = vk;
            let m_hat = mk / bias1;
            let v_hat = vk / bias2;
            match &mut state.master {
                Some(master) => {
                    let w = master[i].data[k];
                    let delta = lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * w);
                    let w_new = quantize(w - delta, state_fmt, RoundingMode::NearestEven);
                    master[i].data[k] = w_new;
                    param.values.data[k] =
                        quantize(w_new, policy.weights_fmt, RoundingMode::NearestEven);
                }
                None => {
                    let w = param.values.data[k];
                    let delta = lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * w);
                    param.values.data[k] = quantize(w - delta, policy.weights_fmt, cfg.rounding);
                }
            }
        }
    }
    state.step = t;
    Ok(())
}
