use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{istft, mel_filterbank, stft, ComplexSpectrogram, MelConfig, MelSpectrogram, Waveform};
use crate::error::{Error, Result};

/// Momentum used by [`GriffinLim::new`].
pub const DEFAULT_GL_MOMENTUM: f64 = 0.99;

/// Mel-to-waveform inversion: a clamped pseudo-inverse of the mel filterbank
/// followed by (fast) Griffin-Lim phase retrieval.
#[derive(Debug, Clone)]
pub struct GriffinLim {
    cfg: MelConfig,
    inverse: Array2<f64>,
    /// Momentum of the fast Griffin-Lim update; 0 gives the classic algorithm.
    pub momentum: f64,
}

impl GriffinLim {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        let fb = mel_filterbank(cfg)?;
        let (rows, cols) = fb.dim();
        let m = DMatrix::from_fn(rows, cols, |i, j| fb[[i, j]]);
        let pinv = m
            .pseudo_inverse(1e-10)
            .map_err(|e| Error::config(format!("mel filterbank pseudo-inverse failed: {e}")))?;
        let inverse = Array2::from_shape_fn((cols, rows), |(i, j)| pinv[(i, j)]);
        Ok(GriffinLim {
            cfg: *cfg,
            inverse,
            momentum: DEFAULT_GL_MOMENTUM,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Linear STFT magnitude estimate from a log-mel spectrogram, negative
    /// values clamped to zero.
    pub fn magnitude(&self, m: &MelSpectrogram) -> Result<Array2<f64>> {
        if m.config != self.cfg {
            return Err(Error::config("mel spectrogram was made with a different config"));
        }
        let lin = m.data.mapv(|v| (v as f64).exp());
        Ok(self.inverse.dot(&lin).mapv(|v| v.max(0.0)))
    }

    /// Reconstructs `frames * hop_length` samples.
    ///
    /// With `iters == 0` the result is the zero-phase inverse of the magnitude
    /// estimate; otherwise phases start from a uniform draw seeded by `seed`.
    pub fn run(&self, m: &MelSpectrogram, iters: usize, seed: u64) -> Result<Waveform> {
        let frames = m.n_frames();
        if frames == 0 {
            return Err(Error::domain("mel spectrogram has no frames"));
        }
        let target = self.magnitude(m)?;
        let out_len = frames * self.cfg.hop_length;
        let mut spec = ComplexSpectrogram {
            data: target.mapv(|a| Complex64::new(a, 0.0)),
            config: self.cfg,
        };
        if iters == 0 {
            return istft(&spec, &self.cfg, out_len);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (c, &a) in spec.data.iter_mut().zip(target.iter()) {
            let phase = rng.gen_range(0.0..2.0 * PI);
            *c = Complex64::from_polar(a, phase);
        }
        let mut previous = Array2::<Complex64>::zeros(target.dim());
        for _ in 0..iters {
            let wave = istft(&spec, &self.cfg, out_len)?;
            let projected = stft(&wave, &self.cfg)?.data;
            for (((c, &a), p), prev) in spec
                .data
                .iter_mut()
                .zip(target.iter())
                .zip(projected.iter())
                .zip(previous.iter())
            {
                let accelerated = p + (p - prev) * self.momentum;
                let norm = accelerated.norm();
                *c = if norm > 0.0 {
                    accelerated * (a / norm)
                } else {
                    Complex64::new(a, 0.0)
                };
            }
            previous = projected;
        }
        istft(&spec, &self.cfg, out_len)
    }
}

/// One-shot convenience wrapper around [`GriffinLim`].
pub fn griffin_lim(m: &MelSpectrogram, iters: usize, seed: u64) -> Result<Waveform> {
    GriffinLim::new(&m.config)?.run(m, iters, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::wav_to_mel;

    fn tone(freq: f64, seconds: f64, sr: u32) -> Waveform {
        let n = (seconds * sr as f64) as usize;
        let s = (0..n)
            .map(|t| (0.5 * (2.0 * PI * freq * t as f64 / sr as f64).sin()) as f32)
            .collect();
        Waveform::new(s, sr).unwrap()
    }

    fn reanalysis_l1(gl: &GriffinLim, m: &MelSpectrogram, iters: usize) -> f64 {
        let w = gl.run(m, iters, 1).unwrap();
        let again = wav_to_mel(&w, gl.config()).unwrap();
        again
            .data
            .iter()
            .zip(m.data.iter())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / m.data.len() as f64
    }

    #[test]
    fn iterations_reduce_reanalysis_error_on_a_tone() {
        let cfg = MelConfig::paper();
        let gl = GriffinLim::new(&cfg).unwrap();
        let m = wav_to_mel(&tone(440.0, 0.5, 24_000), &cfg).unwrap();
        let e0 = reanalysis_l1(&gl, &m, 0);
        let e32 = reanalysis_l1(&gl, &m, 32);
        assert!(e32 < e0, "iters=32 {e32} vs iters=0 {e0}");
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = MelConfig::paper();
        let m = wav_to_mel(&tone(220.0, 0.3, 24_000), &cfg).unwrap();
        for iters in [0, 4] {
            let a = griffin_lim(&m, iters, 9).unwrap();
            let b = griffin_lim(&m, iters, 9).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), m.n_frames() * cfg.hop_length);
        }
    }

    #[test]
    fn floor_mel_is_near_silent() {
        let cfg = MelConfig::paper();
        let m = MelSpectrogram::new(Array2::from_elem((cfg.n_mels, 20), cfg.log_floor_value()), cfg).unwrap();
        for iters in [0, 8] {
            let w = griffin_lim(&m, iters, 2).unwrap();
            assert!(w.peak() < 1e-3, "peak {}", w.peak());
        }
    }

    #[test]
    fn magnitude_estimate_is_nonnegative() {
        let cfg = MelConfig::paper();
        let gl = GriffinLim::new(&cfg).unwrap();
        let m = wav_to_mel(&tone(1000.0, 0.2, 24_000), &cfg).unwrap();
        let mag = gl.magnitude(&m).unwrap();
        assert_eq!(mag.dim(), (cfg.n_bins(), m.n_frames()));
        assert!(mag.iter().all(|&v| v >= 0.0));
    }
}
