//! Toy data synthesis, batching, the optimizer loop and checkpoints.

mod checkpoint;
mod data;
mod optim;
mod step;
mod trainer;
mod validate;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use data::{
    make_batch, random_rir, synthesize_pair, toy_corpus, toy_noise, Batch, BatchItem, ToyItem, TrainingPair, VOWELS,
};
pub use optim::{apply_update, clip_grad_norm, AdamState};
pub use step::{batch_loss_and_grads, item_seed, train_step, StepOutcome};
pub use trainer::{held_out_set, latest_checkpoint, training_pairs, RunDir, StepLog, Trainer};
pub use validate::{validate, validate_with, HeldOutItem, ValidationReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub grad_clip_norm: f64,
    pub text_drop_prob: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub snr_range_db: [f64; 2],
    pub segment_seconds: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Probability that a training mixture is reverberated first.
    pub reverb_prob: f64,
    /// Clean toy items available for training.
    pub corpus_size: usize,
    /// Toy items held out for validation.
    pub heldout_size: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl TrainConfig {
    /// Desk-scale schedule for the toy task.
    pub fn tiny() -> Self {
        TrainConfig {
            peak_lr: 1e-3,
            warmup_steps: 200,
            total_steps: 2000,
            grad_clip_norm: 1.0,
            text_drop_prob: 0.2,
            batch_size: 8,
            seed: 0,
            snr_range_db: [-5.0, 10.0],
            segment_seconds: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            reverb_prob: 0.0,
            corpus_size: 200,
            heldout_size: 50,
            checkpoint_every: 500,
            log_every: 1,
        }
    }

    /// Learning-rate schedule of the full-size run; the remaining fields
    /// follow the tiny preset.
    pub fn paper() -> Self {
        TrainConfig {
            peak_lr: 7.5e-5,
            warmup_steps: 20_000,
            total_steps: 1_200_000,
            checkpoint_every: 10_000,
            log_every: 100,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::config(format!(
                "unknown train preset '{other}' (expected 'tiny' or 'paper')"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::config(format!("train.{msg}")));
        if !(self.warmup_steps > 0 && self.warmup_steps < self.total_steps) {
            return fail("warmup_steps must satisfy 0 < warmup_steps < total_steps");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return fail("peak_lr must be positive");
        }
        if !(self.grad_clip_norm > 0.0 && self.grad_clip_norm.is_finite()) {
            return fail("grad_clip_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.text_drop_prob) {
            return fail("text_drop_prob must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.reverb_prob) {
            return fail("reverb_prob must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        let [lo, hi] = self.snr_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return fail("snr_range_db must be a finite [low, high] pair");
        }
        if !(self.segment_seconds > 0.0 && self.segment_seconds.is_finite()) {
            return fail("segment_seconds must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("beta1 and beta2 must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail("adam_eps must be positive and weight_decay non-negative");
        }
        if self.corpus_size == 0 || self.heldout_size == 0 {
            return fail("corpus_size and heldout_size must be at least 1");
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return fail("checkpoint_every and log_every must be at least 1");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay back to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::domain(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    let (w, n) = (cfg.warmup_steps as f64, cfg.total_steps as f64);
    let s = step as f64;
    Ok(if s <= w {
        cfg.peak_lr * s / w
    } else {
        cfg.peak_lr * (n - s) / (n - w)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn presets_validate() {
        TrainConfig::tiny().validate().unwrap();
        TrainConfig::paper().validate().unwrap();
        let bad = TrainConfig {
            warmup_steps: 2000,
            ..TrainConfig::tiny()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            text_drop_prob: 1.5,
            ..TrainConfig::tiny()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn schedule_landmarks() {
        let paper = TrainConfig::paper();
        assert_eq!(lr_at(0, &paper).unwrap(), 0.0);
        assert_eq!(lr_at(20_000, &paper).unwrap(), 7.5e-5);
        assert_eq!(lr_at(paper.total_steps, &paper).unwrap(), 0.0);
        let tiny = TrainConfig::tiny();
        let mid = tiny.warmup_steps + (tiny.total_steps - tiny.warmup_steps) / 2;
        assert!((lr_at(mid, &tiny).unwrap() - tiny.peak_lr / 2.0).abs() < 1e-15);
        assert!((lr_at(100, &tiny).unwrap() - 5e-4).abs() < 1e-15);
        assert!(matches!(lr_at(2001, &tiny), Err(Error::Domain(_))));
    }

    #[test]
    fn schedule_peaks_once() {
        let cfg = TrainConfig::tiny();
        let lrs: Vec<f64> = (0..=cfg.total_steps).map(|s| lr_at(s, &cfg).unwrap()).collect();
        let max = lrs.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(lrs.iter().filter(|&&v| v == max).count(), 1);
        let peak = lrs.iter().position(|&v| v == max).unwrap();
        assert_eq!(peak, cfg.warmup_steps);
        assert!(lrs[..=peak].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[peak..].windows(2).all(|w| w[0] > w[1]));
    }

    proptest! {
        #[test]
        fn schedule_is_continuous(warmup in 1usize..500, extra in 1usize..5000, frac in 0.0f64..1.0) {
            let cfg = TrainConfig { warmup_steps: warmup, total_steps: warmup + extra, ..TrainConfig::tiny() };
            let step = ((cfg.total_steps - 1) as f64 * frac) as usize;
            let a = lr_at(step, &cfg).unwrap();
            let b = lr_at(step + 1, &cfg).unwrap();
            let max_slope = cfg.peak_lr / warmup.min(extra) as f64;
            prop_assert!((a - b).abs() <= max_slope * (1.0 + 1e-12));
            prop_assert!((0.0..=cfg.peak_lr).contains(&a));
        }
    }
}
