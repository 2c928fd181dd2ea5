//! Toy speech-like corpus, noise, mixing and batch assembly.

use std::f64::consts::PI;

use ndarray::{s, Array2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::dsp::{wav_to_mel, MelConfig, Waveform};
use crate::error::{Error, Result};
use crate::flow::{gaussian_noise, sample_time, FlowTime, PathSample};
use crate::model::TextCondition;

/// Symbols of the toy language, one per voiced segment.
pub const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

/// First two formant frequencies (Hz) for each symbol in [`VOWELS`].
const FORMANTS: [(f64, f64); 5] = [
    (730.0, 1090.0),
    (530.0, 1840.0),
    (270.0, 2290.0),
    (570.0, 840.0),
    (300.0, 870.0),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyItem {
    pub clean: Waveform,
    pub transcript: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub clean: Waveform,
    pub noisy: Waveform,
    pub transcript: String,
    pub snr_db: f64,
}

fn formant_gain(freq: f64, (f1, f2): (f64, f64)) -> f64 {
    let peak = |f: f64, bw: f64| (-0.5 * ((freq - f) / bw).powi(2)).exp();
    0.05 + peak(f1, 120.0) + 0.7 * peak(f2, 180.0)
}

fn segment_envelope(i: usize, len: usize, ramp: usize) -> f64 {
    let ramp = ramp.min(len / 2).max(1);
    if i < ramp {
        0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
    } else if i >= len - ramp {
        0.5 - 0.5 * (PI * (len - i) as f64 / ramp as f64).cos()
    } else {
        1.0
    }
}

/// One toy utterance: 2 to 5 vowel segments on a common fundamental.
fn toy_item<R: Rng + ?Sized>(rng: &mut R, sample_rate: u32) -> Result<ToyItem> {
    let sr = sample_rate as f64;
    let seconds = rng.gen_range(1.0..=2.0);
    let len = (seconds * sr).round() as usize;
    let f0 = rng.gen_range(80.0..=400.0);
    let n_seg = rng.gen_range(2..=5usize);
    let symbols: Vec<usize> = (0..n_seg).map(|_| rng.gen_range(0..VOWELS.len())).collect();
    let vibrato = rng.gen_range(3.0..6.0);
    let f_max = (sr / 2.0).min(5000.0);
    let n_harm = ((f_max / f0).floor() as usize).max(1);
    let gap = (0.03 * sr) as usize;
    let seg_len = len / n_seg;
    let ramp = (0.02 * sr) as usize;

    let mut samples = vec![0.0f64; len];
    let mut phase = vec![0.0f64; n_harm];
    for (k, &sym) in symbols.iter().enumerate() {
        let start = k * seg_len;
        let end = if k + 1 == n_seg { len } else { start + seg_len };
        let voiced = end - start - gap.min((end - start) / 4);
        let gains: Vec<f64> = (1..=n_harm)
            .map(|h| formant_gain(h as f64 * f0, FORMANTS[sym]))
            .collect();
        let loud = rng.gen_range(0.6..=1.0);
        for i in 0..voiced {
            let n = start + i;
            let f = f0 * (1.0 + 0.01 * (2.0 * PI * vibrato * n as f64 / sr).sin());
            let env = loud * segment_envelope(i, voiced, ramp);
            let mut acc = 0.0;
            for (h, (ph, g)) in phase.iter_mut().zip(&gains).enumerate() {
                *ph += 2.0 * PI * f * (h + 1) as f64 / sr;
                acc += g * ph.sin();
            }
            samples[n] = env * acc;
        }
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { 0.5 / peak } else { 0.0 };
    let clean = Waveform::new(samples.iter().map(|v| (v * scale) as f32).collect(), sample_rate)?;
    Ok(ToyItem {
        clean,
        transcript: symbols.iter().map(|&s| VOWELS[s]).collect(),
    })
}

/// Deterministic toy corpus; the transcript spells the vowel sequence.
pub fn toy_corpus<R: Rng + ?Sized>(n_items: usize, rng: &mut R, mel_cfg: &MelConfig) -> Result<Vec<ToyItem>> {
    if n_items == 0 {
        return Err(Error::domain("toy corpus needs at least one item"));
    }
    mel_cfg.validate()?;
    (0..n_items).map(|_| toy_item(rng, mel_cfg.sample_rate)).collect()
}

/// Unit-power background noise of one of four kinds: white, low-passed,
/// mains hum with hiss, or slowly amplitude-modulated white.
pub fn toy_noise<R: Rng + ?Sized>(len: usize, sample_rate: u32, rng: &mut R) -> Result<Waveform> {
    if len == 0 {
        return Err(Error::domain("noise length must be positive"));
    }
    let sr = sample_rate as f64;
    let mut x: Vec<f64> = match rng.gen_range(0..4) {
        0 => (0..len).map(|_| white(rng)).collect(),
        1 => {
            let a = rng.gen_range(0.8..0.98);
            let mut y = 0.0;
            (0..len)
                .map(|_| {
                    y = a * y + white(rng);
                    y
                })
                .collect()
        }
        2 => {
            let mains = if rng.gen_bool(0.5) { 50.0 } else { 60.0 };
            (0..len)
                .map(|n| {
                    let t = n as f64 / sr;
                    let hum: f64 = (1..=6)
                        .map(|h| (2.0 * PI * mains * h as f64 * t).sin() / h as f64)
                        .sum();
                    hum + 0.3 * white(rng)
                })
                .collect()
        }
        _ => {
            let rate = rng.gen_range(1.0..6.0);
            (0..len)
                .map(|n| (0.55 + 0.45 * (2.0 * PI * rate * n as f64 / sr).sin()) * white(rng))
                .collect()
        }
    };
    let p = x.iter().map(|v| v * v).sum::<f64>() / len as f64;
    let g = if p > 0.0 { 1.0 / p.sqrt() } else { 0.0 };
    x.iter_mut().for_each(|v| *v *= g);
    Waveform::new(x.into_iter().map(|v| v as f32).collect(), sample_rate)
}

fn white<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Exponentially decaying noise tail after a unit direct path.
pub fn random_rir<R: Rng + ?Sized>(sample_rate: u32, rng: &mut R) -> Result<Waveform> {
    let sr = sample_rate as f64;
    let rt60 = rng.gen_range(0.15..0.6);
    let len = (rt60 * sr) as usize;
    let decay = 6.9 / (rt60 * sr);
    let mut h: Vec<f32> = (0..len.max(1))
        .map(|n| (0.3 * rng.sample::<f64, _>(StandardNormal) * (-decay * n as f64).exp()) as f32)
        .collect();
    h[0] = 1.0;
    Waveform::new(h, sample_rate)
}

/// Linear convolution truncated to `x.len()` samples, via FFT.
fn convolve_truncated(x: &[f32], h: &[f32]) -> Vec<f32> {
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let load = |v: &[f32]| {
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (b, &s) in buf.iter_mut().zip(v) {
            b.re = s as f64;
        }
        buf
    };
    let mut a = load(x);
    let mut b = load(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a[..x.len()].iter().map(|c| (c.re / n as f64) as f32).collect()
}

/// Mixes `noise` into `clean` (optionally reverberated by `rir`) at
/// `snr_db`, measured against the signal actually present in the mix.
///
/// Noise longer than the clean signal is randomly cropped; shorter noise is
/// tiled. The returned transcript is empty; the caller fills it in.
pub fn synthesize_pair<R: Rng + ?Sized>(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rir: Option<&Waveform>,
    rng: &mut R,
) -> Result<TrainingPair> {
    clean.validate()?;
    noise.validate()?;
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::domain("clean and noise sample rates differ"));
    }
    if !snr_db.is_finite() {
        return Err(Error::domain("snr_db must be finite"));
    }
    let signal = match rir {
        Some(h) => {
            h.validate()?;
            let wet = convolve_truncated(&clean.samples, &h.samples);
            let peak = wet.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let target = clean.peak();
            let g = if peak > 0.0 { target / peak } else { 0.0 };
            Waveform {
                samples: wet.into_iter().map(|v| v * g).collect(),
                sample_rate: clean.sample_rate,
            }
        }
        None => clean.clone(),
    };
    let p_clean = signal.power();
    if p_clean == 0.0 {
        return Err(Error::Rejected("silent clean segment".into()));
    }
    let n = clean.len();
    let segment: Vec<f32> = if noise.len() >= n {
        let off = rng.gen_range(0..=noise.len() - n);
        noise.samples[off..off + n].to_vec()
    } else {
        noise.samples.iter().cycle().take(n).copied().collect()
    };
    let p_noise = segment.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n as f64;
    if p_noise == 0.0 {
        return Err(Error::Rejected("silent noise segment".into()));
    }
    let g = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let noisy = signal
        .samples
        .iter()
        .zip(&segment)
        .map(|(&s, &v)| (s as f64 + g * v as f64) as f32)
        .collect();
    Ok(TrainingPair {
        clean: clean.clone(),
        noisy: Waveform::new(noisy, clean.sample_rate)?,
        transcript: String::new(),
        snr_db,
    })
}

/// One training example, padded to the batch's frame count.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub m0: Array2<f32>,
    pub m_t: Array2<f32>,
    pub t: FlowTime,
    pub m_y: Array2<f32>,
    pub m_x: Array2<f32>,
    pub text: TextCondition,
    pub u_target: Array2<f32>,
    /// Frames before this index are real; the rest is padding.
    pub valid_frames: usize,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    pub frames: usize,
}

impl Batch {
    /// Number of unpadded `(mel, frame)` cells.
    pub fn valid_cells(&self) -> usize {
        self.items.iter().map(|i| i.valid_frames * i.m_x.nrows()).sum()
    }
}

fn pad_frames(m: &Array2<f32>, frames: usize, fill: f32) -> Array2<f32> {
    let mut out = Array2::from_elem((m.nrows(), frames), fill);
    out.slice_mut(s![.., ..m.ncols()]).assign(m);
    out
}

/// Per item, in a fixed draw order: text dropout, flow time, source noise.
pub fn make_batch<R: Rng + ?Sized>(
    pairs: &[TrainingPair],
    mel_cfg: &MelConfig,
    text_drop_prob: f64,
    rng: &mut R,
) -> Result<Batch> {
    if pairs.is_empty() {
        return Err(Error::domain("cannot build an empty batch"));
    }
    if !(0.0..=1.0).contains(&text_drop_prob) {
        return Err(Error::domain("text_drop_prob must lie in [0, 1]"));
    }
    let mels = pairs
        .iter()
        .map(|p| Ok((wav_to_mel(&p.noisy, mel_cfg)?.data, wav_to_mel(&p.clean, mel_cfg)?.data)))
        .collect::<Result<Vec<_>>>()?;
    let frames = mels.iter().map(|(y, _)| y.ncols()).max().unwrap_or(0);
    let floor = mel_cfg.log_floor_value();
    let mut items = Vec::with_capacity(pairs.len());
    for (pair, (m_y, m_x)) in pairs.iter().zip(mels) {
        let drop = rng.gen_bool(text_drop_prob);
        let t = sample_time(rng);
        let valid = m_x.ncols();
        let m0 = pad_frames(&gaussian_noise::<f32, _>(m_x.nrows(), valid, rng), frames, 0.0);
        let m_x = pad_frames(&m_x, frames, floor);
        let m_y = pad_frames(&m_y, frames, floor);
        let path = PathSample::new(m0.view(), m_x.view(), t)?;
        let text = TextCondition {
            present: !drop,
            ..TextCondition::from_text(&pair.transcript)
        };
        items.push(BatchItem {
            m0,
            m_t: path.m_t,
            t,
            m_y,
            m_x,
            text,
            u_target: path.u_target,
            valid_frames: valid,
        });
    }
    Ok(Batch { items, frames })
}
