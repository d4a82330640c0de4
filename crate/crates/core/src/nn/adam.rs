//! Adam optimizer over a [`ParamSet`].

use std::collections::BTreeMap;

use ndarray::Array2;

use super::params::{GradientBundle, ParamSet};
use crate::error::{Error, Result};

/// First/second moment accumulators plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. The L2 term is added to the raw
/// gradient as `l2 * param` before the moment updates (coupled weight decay).
/// Parameters without a gradient entry are treated as having zero gradient.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &GradientBundle,
    state: &mut AdamState,
    lr: f64,
    l2: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let keys: Vec<String> = params.keys().map(str::to_string).collect();
    for key in keys {
        if let Some(g) = grads.get(&key) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Optimizer {
                    key,
                    msg: "non-finite gradient".into(),
                });
            }
        }
        let param = params.get_mut(&key)?;
        let m = state
            .m
            .entry(key.clone())
            .or_insert_with(|| Array2::zeros(param.raw_dim()));
        let v = state
            .v
            .entry(key.clone())
            .or_insert_with(|| Array2::zeros(param.raw_dim()));
        if m.raw_dim() != param.raw_dim() {
            return Err(Error::Optimizer {
                key,
                msg: format!(
                    "moment shape {:?} does not match parameter {:?}",
                    m.dim(),
                    param.dim()
                ),
            });
        }
        let zero = Array2::zeros(param.raw_dim());
        let g_raw = grads.get(&key).unwrap_or(&zero);
        if g_raw.raw_dim() != param.raw_dim() {
            return Err(Error::Optimizer {
                key,
                msg: format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g_raw.dim(),
                    param.dim()
                ),
            });
        }
        let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
        ndarray::Zip::from(&mut *param)
            .and(&mut *m)
            .and(&mut *v)
            .and(g_raw)
            .for_each(|p, m, v, &gr| {
                let g = gr + l2 * *p;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    params.bump_version();
    Ok(())
}
