use serde::{Deserialize, Serialize};

use crate::diff::ParamVector;
use crate::error::{invalid, Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Moment buffers for one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamVector) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

/// Bias-corrected Adam update with a single learning rate.
pub fn adam_step(params: &mut ParamVector, grads: &ParamVector, state: &mut AdamState, lr: f64) -> Result<()> {
    adam_step_with(params, grads, state, |_| lr)
}

/// Adam update with a learning rate chosen per slot name.
pub fn adam_step_with(params: &mut ParamVector, grads: &ParamVector, state: &mut AdamState, lr: impl Fn(&str) -> f64) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(invalid("adam_step: parameter, gradient and state layouts differ"));
    }
    if let Some(i) = grads.data().iter().position(|g| !g.is_finite()) {
        return Err(Error::Diverged(format!("non-finite gradient in slot {}", grads.slot_of(i).name)));
    }
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    let slots = params.slots().to_vec();
    let (g, m, v) = (grads.data(), state.m.data_mut(), state.v.data_mut());
    let p = params.data_mut();
    for slot in &slots {
        let rate = lr(&slot.name);
        for i in slot.offset..slot.offset + slot.len {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= rate * mh / (vh.sqrt() + EPS);
        }
    }
    Ok(())
}
