use super::ModelParams;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS_ADAM: f64 = 1e-8;

/// First/second moment accumulators shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. A gradient containing a non-finite value
/// is rejected and leaves both `params` and `state` untouched.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(Error::invalid("adam_step: parameter, gradient and moment shapes differ"));
    }
    if !grads.all_finite() {
        log::warn!("adam_step: non-finite gradient at step {}, update skipped", state.t + 1);
        return Err(Error::NonFinite("gradient".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let correction1 = 1.0 - BETA1.powi(t);
    let correction2 = 1.0 - BETA2.powi(t);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for (((p, g), m), v) in tensors {
        for i in 0..p.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + EPS_ADAM);
        }
    }
    Ok(())
}
