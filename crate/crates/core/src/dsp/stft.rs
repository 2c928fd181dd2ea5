use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

use super::{ComplexSpectrogram, MelConfig, Waveform, WindowKind};
use crate::error::{Error, Result};

/// Analysis window of `cfg.win_length`, zero-padded and centered in `n_fft`.
pub fn window(cfg: &MelConfig) -> Vec<f64> {
    let mut w = vec![0.0; cfg.n_fft];
    let offset = (cfg.n_fft - cfg.win_length) / 2;
    for i in 0..cfg.win_length {
        w[offset + i] = match cfg.window {
            // periodic Hann
            WindowKind::Hann => 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.win_length as f64).cos(),
            WindowKind::Rectangular => 1.0,
        };
    }
    w
}

// Mirror an out-of-range index back into [0, n) without repeating the edge sample.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Centered short-time Fourier transform with reflect padding.
///
/// Produces `ceil(len / hop_length)` frames; frame `j` is centered on sample
/// `j * hop_length`.
pub fn stft(w: &Waveform, cfg: &MelConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::config(format!(
            "waveform sample rate {} does not match config {}",
            w.sample_rate, cfg.sample_rate
        )));
    }
    if w.samples.is_empty() {
        return Err(Error::domain("cannot analyse an empty signal"));
    }

    let n = cfg.n_fft;
    let pad = (n / 2) as isize;
    let len = w.samples.len();
    let frames = cfg.n_frames(len);
    let win = window(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);

    let mut out = Array2::<Complex64>::zeros((cfg.n_bins(), frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for j in 0..frames {
        let start = (j * cfg.hop_length) as isize - pad;
        for (k, slot) in buf.iter_mut().enumerate() {
            let idx = reflect_index(start + k as isize, len);
            *slot = Complex64::new(w.samples[idx] as f64 * win[k], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (b, v) in buf.iter().take(cfg.n_bins()).enumerate() {
            out[[b, j]] = *v;
        }
    }
    Ok(ComplexSpectrogram {
        data: out,
        config: *cfg,
    })
}

/// Inverse of [`stft`]: windowed overlap-add normalized by the summed squared
/// window.
pub fn istft(s: &ComplexSpectrogram, cfg: &MelConfig, out_len: usize) -> Result<Waveform> {
    cfg.validate()?;
    let n = cfg.n_fft;
    let bins = cfg.n_bins();
    let frames = s.data.ncols();
    if s.data.nrows() != bins {
        return Err(Error::domain(format!(
            "spectrogram has {} bins, expected {bins}",
            s.data.nrows()
        )));
    }
    if frames == 0 || cfg.n_frames(out_len) != frames {
        return Err(Error::domain(format!(
            "{frames} frames are inconsistent with an output of {out_len} samples"
        )));
    }

    let win = window(cfg);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let total = n + cfg.hop_length * (frames - 1);
    let mut acc = vec![0.0f64; total];
    let mut wsum = vec![0.0f64; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let scale = 1.0 / n as f64;

    for j in 0..frames {
        for (b, slot) in buf.iter_mut().take(bins).enumerate() {
            *slot = s.data[[b, j]];
        }
        // DC and Nyquist must be real for a real signal.
        buf[0].im = 0.0;
        if n.is_multiple_of(2) {
            buf[n / 2].im = 0.0;
        }
        for b in 1..(n - bins + 1) {
            buf[n - b] = buf[b].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = j * cfg.hop_length;
        for k in 0..n {
            acc[start + k] += buf[k].re * scale * win[k];
            wsum[start + k] += win[k] * win[k];
        }
    }

    let pad = n / 2;
    let samples = (0..out_len)
        .map(|i| {
            let p = i + pad;
            if p < total && wsum[p] > 1e-11 {
                (acc[p] / wsum[p]) as f32
            } else {
                0.0
            }
        })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: cfg.sample_rate,
    })
}
