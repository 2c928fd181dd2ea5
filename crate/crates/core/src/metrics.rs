//! Toy-task metrics, the evaluation report and the real-time-factor harness.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{wav_to_mel, MelConfig, Waveform};
use crate::error::{ensure_same_shape, Error, Result};
use crate::flow::mean_abs_diff;
use crate::sampler::{Enhancer, StageTimings};
use crate::training::HeldOutItem;

/// Reported instead of `+inf` for an exact match.
pub const SNR_CAP_DB: f64 = 99.0;

/// `10·log10(P_ref / P_err)` with `err = estimate - reference`.
pub fn snr_db(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    ensure_same_shape(&[reference.len()], &[estimate.len()], "snr_db")?;
    let p_ref = reference.power();
    if p_ref == 0.0 {
        return Err(Error::domain("reference has zero power"));
    }
    let p_err = reference
        .samples
        .iter()
        .zip(&estimate.samples)
        .map(|(&r, &e)| (e as f64 - r as f64).powi(2))
        .sum::<f64>()
        / reference.len() as f64;
    if p_err == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (p_ref / p_err).log10()).min(SNR_CAP_DB))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Median processing seconds per second of audio.
    pub rtf: f64,
    pub wall_seconds: f64,
    pub audio_seconds: f64,
    pub solver: String,
    pub preset: String,
    pub repetitions: usize,
    pub threads: usize,
    pub mel_seconds: f64,
    pub ode_seconds: f64,
    pub inversion_seconds: f64,
    /// ODE stage alone, per second of audio.
    pub ode_rtf: f64,
}

impl BenchReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `run` once for warmup and then `reps` times, reporting medians.
pub fn measure_rtf_with<F>(
    audio_seconds: f64,
    reps: usize,
    solver: &str,
    preset: &str,
    mut run: F,
) -> Result<BenchReport>
where
    F: FnMut() -> Result<StageTimings>,
{
    if reps == 0 {
        return Err(Error::domain("need at least one timed repetition"));
    }
    if audio_seconds.is_nan() || audio_seconds <= 0.0 {
        return Err(Error::domain("audio duration must be positive"));
    }
    run()?;
    let (mut wall, mut mel, mut ode, mut inv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..reps {
        let clock = Instant::now();
        let st = run()?;
        wall.push(clock.elapsed().as_secs_f64());
        mel.push(st.mel_seconds);
        ode.push(st.ode_seconds);
        inv.push(st.inversion_seconds);
    }
    let wall_seconds = median(&mut wall);
    let ode_seconds = median(&mut ode);
    Ok(BenchReport {
        rtf: wall_seconds / audio_seconds,
        wall_seconds,
        audio_seconds,
        solver: solver.to_string(),
        preset: preset.to_string(),
        repetitions: reps,
        threads: rayon::current_num_threads(),
        mel_seconds: median(&mut mel),
        ode_seconds,
        inversion_seconds: median(&mut inv),
        ode_rtf: ode_seconds / audio_seconds,
    })
}

/// A harmonic tone in white noise, `seconds` long.
pub fn synthetic_input(seconds: f64, sample_rate: u32, seed: u64) -> Result<Waveform> {
    let n = (seconds * sample_rate as f64).round() as usize;
    if n == 0 {
        return Err(Error::domain("benchmark input would be empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = rng.gen_range(100.0..250.0);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            let tone: f64 = (1..=8)
                .map(|h| (2.0 * std::f64::consts::PI * f0 * h as f64 * t).sin() / h as f64)
                .sum();
            (0.2 * tone + 0.05 * rng.gen_range(-1.0..1.0)) as f32
        })
        .collect();
    Waveform::new(samples, sample_rate)
}

/// Runs the full enhancement pipeline on synthetic audio.
pub fn measure_rtf(enhancer: &Enhancer<'_>, preset: &str, audio_seconds: f64, reps: usize) -> Result<BenchReport> {
    let input = synthetic_input(audio_seconds, enhancer.mel_cfg.sample_rate, 0)?;
    let audio = input.duration_seconds();
    measure_rtf_with(audio, reps, &enhancer.solver.describe(), preset, || {
        Ok(enhancer.enhance_timed(&input, None)?.1)
    })
}

/// Columns filled from an external CSV when available.
pub const EXTERNAL_COLUMNS: [&str; 3] = ["dnsmos", "spk_sim", "wer"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub snr_in: f64,
    pub snr_out: f64,
    pub mel_l1_in: f64,
    pub mel_l1_out: f64,
    pub improved: bool,
    pub dnsmos: Option<f64>,
    pub spk_sim: Option<f64>,
    pub wer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub items: usize,
    pub snr_in: f64,
    pub snr_out: f64,
    pub mel_l1_in: f64,
    pub mel_l1_out: f64,
    pub improvement_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

/// Item used by [`eval_report`]; the held-out items already carry both
/// waveforms and mels.
pub type EvalItem = HeldOutItem;

/// Per-item metrics of `enhance` applied to every noisy input.
pub fn eval_report<F>(items: &[EvalItem], mel_cfg: &MelConfig, mut enhance: F) -> Result<EvalReport>
where
    F: FnMut(usize, &EvalItem) -> Result<Waveform>,
{
    if items.is_empty() {
        return Err(Error::domain("evaluation set is empty"));
    }
    let mut rows = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let mut out = enhance(i, item)?;
        out.fit_to_len(item.clean.len());
        let out_mel = wav_to_mel(&out, mel_cfg)?.data;
        let mel_l1_in = mean_abs_diff(item.noisy_mel.view(), item.clean_mel.view())?;
        let mel_l1_out = mean_abs_diff(out_mel.view(), item.clean_mel.view())?;
        rows.push(EvalRow {
            id: format!("{i:04}"),
            snr_in: snr_db(&item.clean, &item.noisy)?,
            snr_out: snr_db(&item.clean, &out)?,
            mel_l1_in,
            mel_l1_out,
            improved: mel_l1_out < mel_l1_in,
            dnsmos: None,
            spk_sim: None,
            wer: None,
        });
    }
    Ok(EvalReport { rows })
}

impl EvalReport {
    pub fn summary(&self) -> EvalSummary {
        let n = self.rows.len() as f64;
        let mean = |f: fn(&EvalRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        EvalSummary {
            items: self.rows.len(),
            snr_in: mean(|r| r.snr_in),
            snr_out: mean(|r| r.snr_out),
            mel_l1_in: mean(|r| r.mel_l1_in),
            mel_l1_out: mean(|r| r.mel_l1_out),
            improvement_rate: self.rows.iter().filter(|r| r.improved).count() as f64 / n,
        }
    }

    /// One row per item.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Fills the reserved columns from a CSV with an `id` column and any of
    /// `dnsmos`, `spk_sim`, `wer`. Unknown ids are an error.
    pub fn merge_external(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let id_col = headers
            .iter()
            .position(|h| h == "id")
            .ok_or_else(|| Error::config("external scores need an 'id' column"))?;
        let cols: Vec<(usize, &str)> = EXTERNAL_COLUMNS
            .iter()
            .filter_map(|c| headers.iter().position(|h| h == *c).map(|i| (i, *c)))
            .collect();
        let index: HashMap<String, usize> = self.rows.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        for record in reader.records() {
            let record = record?;
            let id = &record[id_col];
            let &row = index
                .get(id)
                .ok_or_else(|| Error::config(format!("external scores name unknown item '{id}'")))?;
            for &(col, name) in &cols {
                let raw = record[col].trim();
                if raw.is_empty() {
                    continue;
                }
                let v: f64 = raw
                    .parse()
                    .map_err(|_| Error::config(format!("bad {name} value '{raw}' for item '{id}'")))?;
                let r = &mut self.rows[row];
                match name {
                    "dnsmos" => r.dnsmos = Some(v),
                    "spk_sim" => r.spk_sim = Some(v),
                    _ => r.wer = Some(v),
                }
            }
        }
        Ok(())
    }

    /// Human-readable table with a mean row.
    pub fn pretty(&self) -> String {
        let mut s = String::new();
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        writeln!(
            s,
            "{:<6} {:>8} {:>8} {:>10} {:>10} {:>8} {:>7} {:>7} {:>7}",
            "id", "snr_in", "snr_out", "mel_l1_in", "mel_l1_out", "improved", "dnsmos", "spk_sim", "wer"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{:<6} {:>8.2} {:>8.2} {:>10.4} {:>10.4} {:>8} {:>7} {:>7} {:>7}",
                r.id,
                r.snr_in,
                r.snr_out,
                r.mel_l1_in,
                r.mel_l1_out,
                if r.improved { "yes" } else { "no" },
                fmt_opt(r.dnsmos),
                fmt_opt(r.spk_sim),
                fmt_opt(r.wer)
            )
            .unwrap();
        }
        let m = self.summary();
        writeln!(
            s,
            "{:<6} {:>8.2} {:>8.2} {:>10.4} {:>10.4} {:>8.2}",
            "mean", m.snr_in, m.snr_out, m.mel_l1_in, m.mel_l1_out, m.improvement_rate
        )
        .unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::held_out_set;
    use crate::training::TrainConfig;
    use std::f64::consts::PI;

    fn sine(n: usize) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| (2.0 * PI * 5.0 * i as f64 / n as f64).sin() as f32)
                .collect(),
            1000,
        )
        .unwrap()
    }

    #[test]
    fn snr_cases() {
        let r = sine(1000);
        assert_eq!(snr_db(&r, &r).unwrap(), SNR_CAP_DB);
        let doubled = Waveform::new(r.samples.iter().map(|v| 2.0 * v).collect(), 1000).unwrap();
        assert!(snr_db(&r, &doubled).unwrap().abs() < 1e-9);
        // orthogonal (cosine at the same frequency) noise of power 0.01·P_ref
        let n = r.len();
        let est = Waveform::new(
            (0..n)
                .map(|i| r.samples[i] + (0.1 * (2.0 * PI * 5.0 * i as f64 / n as f64).cos()) as f32)
                .collect(),
            1000,
        )
        .unwrap();
        assert!((snr_db(&r, &est).unwrap() - 20.0).abs() < 1e-4);
        assert!(snr_db(&Waveform::zeros(10, 1000), &Waveform::zeros(10, 1000)).is_err());
        assert!(snr_db(&r, &sine(999)).is_err());
    }

    #[test]
    fn sleeping_stub_reports_half_real_time() {
        let report = measure_rtf_with(1.0, 3, "stub", "none", || {
            std::thread::sleep(std::time::Duration::from_millis(500));
            Ok(StageTimings {
                ode_seconds: 0.5,
                ..Default::default()
            })
        })
        .unwrap();
        assert!((report.rtf - 0.5).abs() < 0.05, "{}", report.rtf);
        assert!((report.rtf * report.audio_seconds - report.wall_seconds).abs() < 1e-9);
        assert_eq!(report.repetitions, 3);
        assert!(report.to_json_line().starts_with('{'));
        assert!(measure_rtf_with(1.0, 0, "stub", "none", || Ok(StageTimings::default())).is_err());
    }

    #[test]
    fn warmup_is_excluded() {
        let mut calls = 0;
        let report = measure_rtf_with(2.0, 1, "stub", "none", || {
            calls += 1;
            if calls == 1 {
                std::thread::sleep(std::time::Duration::from_millis(200));
            }
            Ok(StageTimings::default())
        })
        .unwrap();
        assert_eq!(calls, 2);
        assert!(report.wall_seconds < 0.1);
    }

    fn small_set() -> Vec<EvalItem> {
        let cfg = TrainConfig {
            heldout_size: 3,
            ..TrainConfig::tiny()
        };
        held_out_set(&cfg, &MelConfig::paper()).unwrap()
    }

    #[test]
    fn oracle_and_identity_reports() {
        let set = small_set();
        let mel = MelConfig::paper();
        let oracle = eval_report(&set, &mel, |_, it| Ok(it.clean.clone())).unwrap();
        let s = oracle.summary();
        assert_eq!(s.mel_l1_out, 0.0);
        assert_eq!(s.improvement_rate, 1.0);
        assert_eq!(s.snr_out, SNR_CAP_DB);
        let identity = eval_report(&set, &mel, |_, it| Ok(it.noisy.clone())).unwrap();
        for r in &identity.rows {
            assert_eq!(r.mel_l1_in, r.mel_l1_out);
            assert_eq!(r.snr_in, r.snr_out);
            assert!(!r.improved);
        }
        assert!(identity.pretty().contains("mean"));
    }

    #[test]
    fn csv_output_and_external_merge() {
        let set = small_set();
        let mut rep = eval_report(&set, &MelConfig::paper(), |_, it| Ok(it.noisy.clone())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ext = dir.path().join("ext.csv");
        std::fs::write(&ext, "id,wer,dnsmos\n0001,0.25,\n0002,0.5,3.1\n").unwrap();
        rep.merge_external(&ext).unwrap();
        assert_eq!(rep.rows[1].wer, Some(0.25));
        assert_eq!(rep.rows[1].dnsmos, None);
        assert_eq!(rep.rows[2].dnsmos, Some(3.1));
        let out = dir.path().join("r.csv");
        rep.write_csv(&out).unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.starts_with("id,snr_in,snr_out,mel_l1_in,mel_l1_out,improved,dnsmos,spk_sim,wer"));
        assert_eq!(text.lines().count(), 4);
        std::fs::write(&ext, "id,wer\n9999,0.1\n").unwrap();
        assert!(rep.merge_external(&ext).is_err());
    }
}
