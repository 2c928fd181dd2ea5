use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Reads a PCM16/PCM24/float32 WAV file as mono at `target_rate`.
///
/// Multi-channel files are averaged to mono. Other sample rates are converted
/// by linear interpolation, which is adequate for tests and toy data but
/// aliases on real material.
pub fn read_wav(path: impl AsRef<Path>, target_rate: u32) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    let interleaved: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>()?,
        SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<Result<_, _>>()?
        }
    };
    let channels = spec.channels.max(1) as usize;
    if channels > 1 {
        log::warn!("{}: {} channels averaged to mono", path.display(), channels);
    }
    let mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    let w = Waveform::new(mono, spec.sample_rate)?;
    if spec.sample_rate != target_rate {
        log::warn!(
            "{}: resampling {} Hz -> {} Hz by linear interpolation",
            path.display(),
            spec.sample_rate,
            target_rate
        );
        return resample_linear(&w, target_rate);
    }
    Ok(w)
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, format: WavFormat) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => SampleFormat::Int,
            WavFormat::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec)?;
    match format {
        WavFormat::Pcm16 => {
            for &s in &w.samples {
                let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
                writer.write_sample(v)?;
            }
        }
        WavFormat::Float32 => {
            for &s in &w.samples {
                writer.write_sample(s)?;
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

pub fn resample_linear(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::config("target sample rate must be positive"));
    }
    if w.sample_rate == target_rate {
        return Ok(w.clone());
    }
    let ratio = w.sample_rate as f64 / target_rate as f64;
    let out_len = ((w.len() as f64) / ratio).round().max(1.0) as usize;
    let last = w.len() - 1;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = (pos - i0 as f64) as f32;
            w.samples[i0] * (1.0 - frac) + w.samples[i1] * frac
        })
        .collect();
    Waveform::new(samples, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.1, -0.25, 0.999, 0.0], 24_000).unwrap();
        write_wav(&p, &w, WavFormat::Float32).unwrap();
        assert_eq!(read_wav(&p, 24_000).unwrap(), w);
    }

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.1, -0.25, 0.5, 0.0], 16_000).unwrap();
        write_wav(&p, &w, WavFormat::Pcm16).unwrap();
        let r = read_wav(&p, 16_000).unwrap();
        for (a, b) in w.samples.iter().zip(&r.samples) {
            assert!((a - b).abs() < 1.0 / 16_000.0);
        }
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut wr = WavWriter::create(&p, spec).unwrap();
        for s in [0.2f32, 0.4, -0.2, 0.0] {
            wr.write_sample(s).unwrap();
        }
        wr.finalize().unwrap();
        let r = read_wav(&p, 8000).unwrap();
        assert_eq!(r.samples.len(), 2);
        assert!((r.samples[0] - 0.3).abs() < 1e-7);
        assert!((r.samples[1] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn resampling_changes_length_and_keeps_dc() {
        let w = Waveform::new(vec![0.5; 1000], 16_000).unwrap();
        let r = resample_linear(&w, 24_000).unwrap();
        assert_eq!(r.len(), 1500);
        assert!(r.samples.iter().all(|&s| (s - 0.5).abs() < 1e-7));
    }
}
