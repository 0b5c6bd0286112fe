use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store
            .params
            .iter()
            .map(|p| vec![T::zero(); p.value.len()])
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        Self {
            config,
            state: AdamState::new(store),
        }
    }

    /// One bias-corrected update. Parameters without a gradient are left
    /// untouched. A non-finite gradient aborts the whole step (nothing is
    /// modified) and is reported as an error.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        adam_step(store, grads, &mut self.state, &self.config)
    }
}

pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::SizeMismatch {
            expected: store.len(),
            found: grads.len().min(state.m.len()),
        });
    }
    for (p, g) in store.params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape != p.value.shape {
                return Err(Error::dims(
                    format!("{:?}", p.value.shape),
                    format!("{:?}", g.shape),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    for (i, p) in store.params.iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value.data.iter_mut().enumerate() {
            let gj = g.data[j];
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w = *w - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
