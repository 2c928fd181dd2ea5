//! The training loop over the toy task, with periodic checkpoints, a CSV
//! metrics log and resumption from the latest checkpoint in a run directory.
//!
//! All randomness for step `k` is derived from `(seed, k, item)`, so a
//! resumed run repeats exactly what an uninterrupted run would have done,
//! whatever the number of worker threads.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::step::item_seed as mix;
use super::{
    load_checkpoint_expecting, make_batch, random_rir, save_checkpoint, synthesize_pair, toy_corpus, toy_noise,
    train_step, AdamState, Batch, Checkpoint, HeldOutItem, ToyItem, TrainConfig, TrainingPair,
};
use crate::dsp::{wav_to_mel, MelConfig, Waveform};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig};
use crate::sampler::SolverConfig;

const CORPUS_STREAM: u64 = 0xC0;
const HELDOUT_STREAM: u64 = 0x4E1D;
const BATCH_STREAM: u64 = u64::MAX;
const MAX_ATTEMPTS: usize = 16;

fn crop<R: Rng + ?Sized>(w: &Waveform, len: usize, rng: &mut R) -> Waveform {
    if w.len() <= len {
        return w.clone();
    }
    let off = rng.gen_range(0..=w.len() - len);
    Waveform {
        samples: w.samples[off..off + len].to_vec(),
        sample_rate: w.sample_rate,
    }
}

fn mix_item<R: Rng + ?Sized>(
    item: &ToyItem,
    segment: Option<usize>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainingPair> {
    let sr = item.clean.sample_rate;
    for _ in 0..MAX_ATTEMPTS {
        let clean = match segment {
            Some(len) => crop(&item.clean, len, rng),
            None => item.clean.clone(),
        };
        let noise = toy_noise(clean.len(), sr, rng)?;
        let [lo, hi] = cfg.snr_range_db;
        let snr = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let rir = if rng.gen_bool(cfg.reverb_prob) {
            Some(random_rir(sr, rng)?)
        } else {
            None
        };
        match synthesize_pair(&clean, &noise, snr, rir.as_ref(), rng) {
            Ok(mut pair) => {
                pair.transcript = item.transcript.clone();
                return Ok(pair);
            }
            Err(Error::Rejected(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Rejected(format!(
        "no usable segment after {MAX_ATTEMPTS} attempts"
    )))
}

/// Noisy/clean pairs for optimizer step `step`.
pub fn training_pairs(
    corpus: &[ToyItem],
    cfg: &TrainConfig,
    mel: &MelConfig,
    step: usize,
) -> Result<Vec<TrainingPair>> {
    let seg = (cfg.segment_seconds * mel.sample_rate as f64).round() as usize;
    (0..cfg.batch_size)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, step as u64, i as u64));
            let item = &corpus[rng.gen_range(0..corpus.len())];
            mix_item(item, Some(seg.max(1)), cfg, &mut rng)
        })
        .collect()
}

/// The fixed validation set: fresh toy utterances mixed at random SNRs,
/// never reverberated.
pub fn held_out_set(cfg: &TrainConfig, mel: &MelConfig) -> Result<Vec<HeldOutItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, HELDOUT_STREAM, 0));
    let items = toy_corpus(cfg.heldout_size, &mut rng, mel)?;
    let dry = TrainConfig {
        reverb_prob: 0.0,
        ..*cfg
    };
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, HELDOUT_STREAM, 1 + i as u64));
            let pair = mix_item(item, None, &dry, &mut rng)?;
            Ok(HeldOutItem {
                clean_mel: wav_to_mel(&pair.clean, mel)?.data,
                noisy_mel: wav_to_mel(&pair.noisy, mel)?.data,
                clean: pair.clean,
                noisy: pair.noisy,
                transcript: pair.transcript,
            })
        })
        .collect()
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// Optimizer steps completed.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

/// Layout of a training run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(RunDir { root })
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.root.join(format!("ckpt_{step:08}.fse"))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
}

/// Highest-step `ckpt_*.fse` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(step) = name
            .strip_prefix("ckpt_")
            .and_then(|s| s.strip_suffix(".fse"))
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, path));
        }
    }
    Ok(best)
}

pub struct Trainer {
    pub model: ModelConfig,
    pub mel: MelConfig,
    pub train: TrainConfig,
    pub solver: SolverConfig,
    corpus: Vec<ToyItem>,
}

impl Trainer {
    pub fn new(model: ModelConfig, mel: MelConfig, train: TrainConfig, solver: SolverConfig) -> Result<Self> {
        model.validate()?;
        mel.validate()?;
        train.validate()?;
        solver.validate()?;
        if model.n_mels != mel.n_mels {
            return Err(Error::config(format!(
                "model.n_mels {} differs from mel.n_mels {}",
                model.n_mels, mel.n_mels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(train.seed, CORPUS_STREAM, 0));
        let corpus = toy_corpus(train.corpus_size, &mut rng, &mel)?;
        Ok(Trainer {
            model,
            mel,
            train,
            solver,
            corpus,
        })
    }

    pub fn corpus(&self) -> &[ToyItem] {
        &self.corpus
    }

    pub fn held_out(&self) -> Result<Vec<HeldOutItem>> {
        held_out_set(&self.train, &self.mel)
    }

    pub fn initial_checkpoint(&self) -> Result<Checkpoint> {
        let params = init_params::<f32>(&self.model, self.train.seed)?;
        Ok(Checkpoint {
            model: self.model,
            mel: self.mel,
            train: self.train,
            solver: self.solver,
            step: 0,
            opt: AdamState::new(&params),
            params,
        })
    }

    pub fn batch_for_step(&self, step: usize) -> Result<Batch> {
        let pairs = training_pairs(&self.corpus, &self.train, &self.mel, step)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.train.seed, step as u64, BATCH_STREAM));
        make_batch(&pairs, &self.mel, self.train.text_drop_prob, &mut rng)
    }

    /// Continues from `ckpt` up to `total_steps`, or until `stop_after` steps
    /// are complete. Checkpoints are only written when `dir` is set.
    pub fn run_from(
        &self,
        mut ckpt: Checkpoint,
        dir: Option<&RunDir>,
        stop_after: Option<usize>,
        mut on_step: impl FnMut(&StepLog),
    ) -> Result<Checkpoint> {
        let end = stop_after.unwrap_or(usize::MAX).min(self.train.total_steps);
        let mut metrics = match dir {
            Some(d) => Some(MetricsLog::open(&d.metrics_path(), ckpt.step)?),
            None => None,
        };
        while ckpt.step < end {
            let clock = Instant::now();
            let step = ckpt.step;
            let batch = self.batch_for_step(step)?;
            let out = train_step(&batch, &mut ckpt.params, &mut ckpt.opt, &self.model, &self.train, step)?;
            ckpt.step += 1;
            let log = StepLog {
                step: ckpt.step,
                loss: out.loss,
                lr: out.lr,
                grad_norm: out.grad_norm,
                seconds: clock.elapsed().as_secs_f64(),
            };
            on_step(&log);
            if let Some(m) = metrics.as_mut() {
                if ckpt.step.is_multiple_of(self.train.log_every) || ckpt.step == self.train.total_steps {
                    m.push(&log)?;
                }
            }
            if let Some(d) = dir {
                if ckpt.step.is_multiple_of(self.train.checkpoint_every) || ckpt.step == self.train.total_steps {
                    save_checkpoint(d.checkpoint_path(ckpt.step), &ckpt)?;
                }
            }
        }
        Ok(ckpt)
    }

    /// Trains in `dir`, resuming from its latest checkpoint when present.
    pub fn run(&self, dir: &RunDir, stop_after: Option<usize>, on_step: impl FnMut(&StepLog)) -> Result<Checkpoint> {
        let start = match latest_checkpoint(&dir.root)? {
            Some((_, path)) => {
                let ckpt = load_checkpoint_expecting(&path, &self.model)?;
                if ckpt.model != self.model || ckpt.mel != self.mel || ckpt.train != self.train {
                    return Err(Error::config(format!(
                        "{} was written with a different configuration",
                        path.display()
                    )));
                }
                log::info!("resuming from {} at step {}", path.display(), ckpt.step);
                Checkpoint {
                    solver: self.solver,
                    ..ckpt
                }
            }
            None => self.initial_checkpoint()?,
        };
        self.run_from(start, Some(dir), stop_after, on_step)
    }
}

/// Append-only metrics CSV that drops rows beyond the resume point.
struct MetricsLog {
    writer: csv::Writer<fs::File>,
}

impl MetricsLog {
    fn open(path: &Path, resume_step: usize) -> Result<Self> {
        let mut kept = Vec::new();
        if resume_step > 0 && path.exists() {
            let mut reader = csv::Reader::from_path(path)?;
            for row in reader.deserialize::<StepLog>() {
                let row = row?;
                if row.step <= resume_step {
                    kept.push(row);
                }
            }
        }
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        writer.write_record(["step", "loss", "lr", "grad_norm", "seconds"])?;
        for row in &kept {
            writer.serialize(row)?;
        }
        writer.flush()?;
        Ok(MetricsLog { writer })
    }

    fn push(&mut self, log: &StepLog) -> Result<()> {
        self.writer.serialize(log)?;
        self.writer.flush()?;
        Ok(())
    }
}
