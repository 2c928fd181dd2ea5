//! Held-out evaluation: velocity loss on fixed path samples and mel-domain
//! L1 of full ODE reconstructions.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::step::item_seed;
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::flow::{cfm_loss, gaussian_noise, mean_abs_diff, sample_time, PathSample};
use crate::model::{forward, ModelConfig, ParamStore, TextCondition};
use crate::sampler::{sample_mel, SolverConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct HeldOutItem {
    pub clean: Waveform,
    pub noisy: Waveform,
    pub transcript: String,
    pub clean_mel: Array2<f32>,
    pub noisy_mel: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    /// Velocity loss on fixed path samples; absent for non-model estimators.
    pub cfm_loss: Option<f64>,
    /// Mean mel L1 between estimate and clean.
    pub mel_l1: f64,
    /// Mean mel L1 between noisy input and clean.
    pub mel_l1_noisy: f64,
    /// Fraction of items whose estimate is strictly closer to clean than the input.
    pub improvement_rate: f64,
    pub items: usize,
}

/// Scores any mel estimator against the held-out set.
pub fn validate_with<F>(held_out: &[HeldOutItem], mut estimate: F) -> Result<ValidationReport>
where
    F: FnMut(usize, &HeldOutItem) -> Result<Array2<f32>>,
{
    if held_out.is_empty() {
        return Err(Error::domain("held-out set is empty"));
    }
    let (mut est_sum, mut noisy_sum, mut better) = (0.0, 0.0, 0usize);
    for (i, item) in held_out.iter().enumerate() {
        let m_hat = estimate(i, item)?;
        let e = mean_abs_diff(m_hat.view(), item.clean_mel.view())?;
        let n = mean_abs_diff(item.noisy_mel.view(), item.clean_mel.view())?;
        est_sum += e;
        noisy_sum += n;
        if e < n {
            better += 1;
        }
    }
    let k = held_out.len() as f64;
    Ok(ValidationReport {
        cfm_loss: None,
        mel_l1: est_sum / k,
        mel_l1_noisy: noisy_sum / k,
        improvement_rate: better as f64 / k,
        items: held_out.len(),
    })
}

const VALID_STREAM: u64 = 0x7A11D;

/// Full ODE reconstruction of every held-out item, conditioned on its
/// transcript, plus the velocity loss at one fixed `(t, M_0)` per item.
pub fn validate(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    held_out: &[HeldOutItem],
    solver: &SolverConfig,
) -> Result<ValidationReport> {
    if held_out.is_empty() {
        return Err(Error::domain("held-out set is empty"));
    }
    solver.validate()?;
    let results: Vec<Result<(Array2<f32>, f64, usize)>> = held_out
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let text = TextCondition::from_text(&item.transcript);
            let s = SolverConfig {
                seed: item_seed(solver.seed, VALID_STREAM, i as u64),
                ..*solver
            };
            let m_hat = sample_mel(item.noisy_mel.view(), &text, params, cfg, &s)?;
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(solver.seed, VALID_STREAM + 1, i as u64));
            let t = sample_time(&mut rng);
            let (rows, cols) = item.clean_mel.dim();
            let m0 = gaussian_noise::<f32, _>(rows, cols, &mut rng);
            let path = PathSample::new(m0.view(), item.clean_mel.view(), t)?;
            let pred = forward(
                path.m_t.view(),
                item.noisy_mel.view(),
                t,
                &text,
                params,
                cfg,
                false,
                &mut rng,
            )?;
            let loss = cfm_loss(pred.view(), path.u_target.view())?;
            Ok((m_hat, loss, rows * cols))
        })
        .collect();
    let mut estimates = Vec::with_capacity(held_out.len());
    let (mut loss_sum, mut cells) = (0.0, 0usize);
    for r in results {
        let (m_hat, loss, n) = r?;
        estimates.push(m_hat);
        loss_sum += loss * n as f64;
        cells += n;
    }
    let mut report = validate_with(held_out, |i, _| Ok(estimates[i].clone()))?;
    report.cfm_loss = Some(loss_sum / cells as f64);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn item(offset: f32) -> HeldOutItem {
        let clean = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f32);
        HeldOutItem {
            clean: Waveform::zeros(1, 24_000),
            noisy: Waveform::zeros(1, 24_000),
            transcript: "a".into(),
            noisy_mel: clean.mapv(|v| v + offset),
            clean_mel: clean,
        }
    }

    #[test]
    fn perfect_and_identity_estimators() {
        let set = vec![item(1.0), item(-0.5), item(2.0)];
        let perfect = validate_with(&set, |_, it| Ok(it.clean_mel.clone())).unwrap();
        assert_eq!(perfect.mel_l1, 0.0);
        assert_eq!(perfect.improvement_rate, 1.0);
        assert!((perfect.mel_l1_noisy - 3.5 / 3.0).abs() < 1e-12);
        let identity = validate_with(&set, |_, it| Ok(it.noisy_mel.clone())).unwrap();
        assert_eq!(identity.improvement_rate, 0.0);
        assert_eq!(identity.mel_l1, identity.mel_l1_noisy);
        assert!(validate_with(&[], |_, it| Ok(it.clean_mel.clone())).is_err());
    }
}
