use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Adam moments for every parameter buffer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn for_shapes(lens: &[usize]) -> Self {
        OptimizerState {
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut OptimizerState,
    lr: f64,
    hp: AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameter buffers, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() || p.len() != state.v[i].len() {
            return Err(Error::Shape(format!("buffer {i} sizes differ")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            let gj = g[j].wide();
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * gj;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * gj * gj;
            let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + hp.eps);
            p[j] = T::of(p[j].wide() - update);
        }
    }
    Ok(())
}
