//! Signal processing between waveforms, complex spectrograms and log-mel
//! spectrograms.
//!
//! Everything here is a pure function of its inputs. Analysis runs in `f64`;
//! waveforms and mel spectrograms are stored as `f32`, which is what the WAV
//! files and the velocity model consume.

mod griffin_lim;
mod mel;
mod stft;
mod wav;

pub use griffin_lim::{griffin_lim, GriffinLim, DEFAULT_GL_MOMENTUM};
pub use mel::{hz_to_mel, mel_filterbank, mel_from_spectrogram, mel_to_hz, wav_to_mel};
pub use stft::{istft, stft, window};
pub use wav::{read_wav, resample_linear, write_wav, WavFormat};

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        let w = Waveform { samples, sample_rate };
        w.validate()?;
        Ok(w)
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Waveform {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if self.samples.is_empty() {
            return Err(Error::domain("waveform is empty"));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::domain(format!("non-finite sample at index {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean power of the samples.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / self.samples.len() as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Trims or zero-pads to exactly `len` samples.
    pub fn fit_to_len(&mut self, len: usize) {
        self.samples.resize(len, 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
    Rectangular,
}

/// Analysis parameters shared by the STFT, the mel filterbank and the
/// inversion back end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    pub window: WindowKind,
}

impl MelConfig {
    /// 24 kHz, 100 mel bands, hop 256 with a 1024-point Hann window.
    pub fn paper() -> Self {
        MelConfig {
            sample_rate: 24_000,
            n_fft: 1024,
            win_length: 1024,
            hop_length: 256,
            n_mels: 100,
            f_min: 0.0,
            f_max: 12_000.0,
            log_floor: 1e-5,
            window: WindowKind::Hann,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("mel.sample_rate must be positive"));
        }
        if self.hop_length == 0 {
            return Err(Error::config("mel.hop_length must be positive"));
        }
        if !(self.hop_length <= self.win_length && self.win_length <= self.n_fft) {
            return Err(Error::config(format!(
                "need hop_length <= win_length <= n_fft, got {} / {} / {}",
                self.hop_length, self.win_length, self.n_fft
            )));
        }
        if self.n_fft < 2 {
            return Err(Error::config("mel.n_fft must be at least 2"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::config(format!(
                "need 0 <= f_min < f_max <= {nyquist}, got f_min={} f_max={}",
                self.f_min, self.f_max
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::config("mel.n_mels must be at least 1"));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return Err(Error::config("mel.log_floor must be positive"));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of centered frames for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop_length)
    }

    pub fn log_floor_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }
}

/// Log-mel magnitudes, `n_mels` rows by frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub data: Array2<f32>,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn new(data: Array2<f32>, config: MelConfig) -> Result<Self> {
        if data.nrows() != config.n_mels {
            return Err(Error::domain(format!(
                "mel spectrogram has {} rows, config expects {}",
                data.nrows(),
                config.n_mels
            )));
        }
        Ok(MelSpectrogram { data, config })
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }
}

/// One-sided STFT, `n_fft / 2 + 1` bins by frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub data: Array2<Complex64>,
    pub config: MelConfig,
}

impl ComplexSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_is_valid() {
        let cfg = MelConfig::paper();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_mels, 100);
        assert_eq!(cfg.sample_rate, 24_000);
        assert_eq!(cfg.hop_length, 256);
    }

    #[test]
    fn config_rejects_bad_ranges() {
        let mut cfg = MelConfig::paper();
        cfg.f_max = cfg.f_min;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = MelConfig::paper();
        cfg.hop_length = 2048;
        assert!(cfg.validate().is_err());
        let mut cfg = MelConfig::paper();
        cfg.log_floor = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = MelConfig::paper();
        cfg.f_max = 13_000.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn waveform_rejects_nan_and_empty() {
        assert!(Waveform::new(vec![], 16_000).is_err());
        assert!(Waveform::new(vec![0.0, f32::NAN], 16_000).is_err());
        assert!(Waveform::new(vec![0.0, 0.5], 16_000).is_ok());
    }
}
