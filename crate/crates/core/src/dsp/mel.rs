use ndarray::Array2;

use super::{stft, ComplexSpectrogram, MelConfig, MelSpectrogram, Waveform};
use crate::error::{Error, Result};

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the mel scale, `n_mels` by
/// `n_fft / 2 + 1`. Filters are not area-normalized.
pub fn mel_filterbank(cfg: &MelConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let n_bins = cfg.n_bins();
    let m_lo = hz_to_mel(cfg.f_min);
    let m_hi = hz_to_mel(cfg.f_max);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;

    let mut fb = Array2::<f64>::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = bin_hz(k);
            let up = (f - lo) / (center - lo);
            let down = (hi - f) / (hi - center);
            fb[[m, k]] = up.min(down).max(0.0);
        }
        if fb.row(m).iter().all(|&v| v == 0.0) {
            return Err(Error::config(format!(
                "mel filter {m} ({lo:.1}-{hi:.1} Hz) covers no FFT bin; \
                 reduce n_mels or increase n_fft"
            )));
        }
    }
    Ok(fb)
}

/// Log-mel magnitudes of an already computed STFT.
pub fn mel_from_spectrogram(spec: &ComplexSpectrogram, fb: &Array2<f64>, cfg: &MelConfig) -> Result<MelSpectrogram> {
    if fb.ncols() != spec.data.nrows() {
        return Err(Error::domain("filterbank and spectrogram bin counts differ"));
    }
    let mag = spec.data.mapv(|c| c.norm());
    let mel = fb.dot(&mag);
    let data = mel.mapv(|v| v.max(cfg.log_floor).ln() as f32);
    MelSpectrogram::new(data, *cfg)
}

/// `log(max(filterbank · |stft(w)|, log_floor))`.
pub fn wav_to_mel(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    let spec = stft(w, cfg)?;
    let fb = mel_filterbank(cfg)?;
    mel_from_spectrogram(&spec, &fb, cfg)
}
