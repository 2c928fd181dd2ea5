//! Masked velocity loss, its gradients over a batch, and one optimizer step.

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{apply_update, clip_grad_norm, AdamState, Batch, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{backward, forward_trace, ModelConfig, ModelInput, ParamStore};
use crate::real::Real;

/// Seed for the generator of `item` at `step`, independent of how items are
/// spread over threads.
pub fn item_seed(seed: u64, step: u64, item: u64) -> u64 {
    // splitmix64 finaliser over a simple combination
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(step.wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
        .wrapping_add(item.wrapping_mul(0x1656_67B1_9E37_79F9))
        .wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const DROPOUT_STREAM: u64 = 0xD809;

/// Masked mean squared velocity error over the batch and its gradients.
///
/// With `dropout_seed` set the network runs in train mode, each item drawing
/// its masks from its own generator.
pub fn batch_loss_and_grads<T: Real>(
    batch: &Batch,
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    dropout_seed: Option<u64>,
) -> Result<(f64, ParamStore<T>)> {
    let cells = batch.valid_cells();
    if cells == 0 {
        return Err(Error::domain("batch has no valid frames"));
    }
    let scale = 2.0 / cells as f64;
    let per_item: Vec<Result<(f64, ParamStore<T>)>> = batch
        .items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let m_t = item.m_t.mapv(|v| T::of(v as f64));
            let m_y = item.m_y.mapv(|v| T::of(v as f64));
            let input = ModelInput {
                valid_frames: item.valid_frames,
                ..ModelInput::new(m_t.view(), m_y.view(), item.t, &item.text)
            };
            let (pred, trace) = match dropout_seed {
                Some(seed) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, DROPOUT_STREAM, i as u64));
                    forward_trace(params, cfg, &input, Some(&mut rng))?
                }
                None => forward_trace::<T, ChaCha8Rng>(params, cfg, &input, None)?,
            };
            let mut d_out = Array2::zeros(pred.raw_dim());
            let mut sq = 0.0;
            let v = item.valid_frames;
            let target = item.u_target.slice(s![.., ..v]);
            ndarray::Zip::from(d_out.slice_mut(s![.., ..v]))
                .and(pred.slice(s![.., ..v]))
                .and(target)
                .for_each(|d, &p, &u| {
                    let diff = p.as_f64() - u as f64;
                    sq += diff * diff;
                    *d = T::of(scale * diff);
                });
            let grads = backward(params, cfg, &trace, d_out.view())?;
            Ok((sq, grads))
        })
        .collect();
    // reduce in item order so the sum does not depend on the thread count
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for r in per_item {
        let (sq, g) = r?;
        total += sq;
        grads.add_assign(&g);
    }
    Ok((total / cells as f64, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

/// Loss, exact gradients, clipping and an AdamW update for optimizer step
/// `step` (0-based).
pub fn train_step(
    batch: &Batch,
    params: &mut ParamStore<f32>,
    opt: &mut AdamState<f32>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepOutcome> {
    if step >= cfg.total_steps {
        return Err(Error::domain(format!(
            "step {step} is not below total_steps {}",
            cfg.total_steps
        )));
    }
    let dropout_seed = item_seed(cfg.seed, step as u64, DROPOUT_STREAM);
    let train_mode = model_cfg.dropout > 0.0;
    let (loss, mut grads) = batch_loss_and_grads(batch, params, model_cfg, train_mode.then_some(dropout_seed))?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step,
            what: format!("loss is {loss}"),
        });
    }
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip_norm).map_err(|e| match e {
        Error::Divergence { what, .. } => Error::Divergence { step, what },
        other => other,
    })?;
    let lr = apply_update(params, &grads, opt, cfg, step)?;
    if let Some(name) = params.first_non_finite() {
        return Err(Error::Divergence {
            step,
            what: format!("parameter '{name}' became non-finite"),
        });
    }
    Ok(StepOutcome { loss, grad_norm, lr })
}
