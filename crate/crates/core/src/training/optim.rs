//! Global-norm gradient clipping and AdamW with decoupled weight decay.

use ndarray::Zip;

use super::{lr_at, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::real::Real;

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// Scales every gradient by `max_norm / total` when the global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut ParamStore<T>, max_norm: f64) -> Result<f64> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(Error::domain("max_norm must be positive"));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Divergence {
            step: 0,
            what: format!("non-finite gradient in '{name}'"),
        });
    }
    let total = grads.global_norm();
    if total > max_norm {
        grads.scale(T::of(max_norm / total));
    }
    Ok(total)
}

/// One AdamW update at `step` (0-based) with the scheduled learning rate.
/// Returns the learning rate used.
pub fn apply_update<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    let lr = lr_at(step, cfg)?;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let t = (step + 1) as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let tensors = params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()));
    for (((name, p), (gname, g)), ((_, m), (_, v))) in tensors {
        debug_assert_eq!(name, gname);
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            let g = g.as_f64();
            let m_new = b1 * m.as_f64() + (1.0 - b1) * g;
            let v_new = b2 * v.as_f64() + (1.0 - b2) * g * g;
            *m = T::of(m_new);
            *v = T::of(v_new);
            let m_hat = m_new / c1;
            let v_hat = v_new / c2;
            let pv = p.as_f64();
            *p = T::of(pv - lr * (m_hat / (v_hat.sqrt() + cfg.adam_eps) + cfg.weight_decay * pv));
        });
    }
    Ok(lr)
}
