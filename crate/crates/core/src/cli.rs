//! Command-line front end: `train`, `enhance`, `bench`, `eval`, `make-corpus`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dsp::{read_wav, wav_to_mel, write_wav, MelConfig, WavFormat};
use crate::error::{Error, Result};
use crate::metrics::{eval_report, measure_rtf, EvalItem};
use crate::model::{init_params, ParamStore};
use crate::sampler::{Enhancer, Scheme, SolverConfig};
use crate::training::{
    held_out_set, item_seed, load_checkpoint, synthesize_pair, toy_corpus, toy_noise, validate, Checkpoint, RunDir,
    Trainer,
};

/// Reported next to bench results for context only.
const REFERENCE_RTF: f64 = 0.31;

#[derive(Debug, Parser)]
#[command(
    name = "flowse",
    version,
    about = "Flow-matching speech enhancement on log-mel spectrograms"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the synthetic toy task, resuming from the latest checkpoint.
    Train(TrainArgs),
    /// Enhance a WAV file with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Measure the real-time factor of the enhancement pipeline.
    Bench(BenchArgs),
    /// Score an enhancer on noisy/clean pairs.
    Eval(EvalArgs),
    /// Write a toy corpus as WAV and transcript files.
    MakeCorpus(MakeCorpusArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML file with [model], [mel], [train], [solver] and [vocoder] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base preset the file and overrides apply to.
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    /// Override a config value, e.g. `--set train.total_steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(&self.preset, self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory for checkpoints, metrics.csv and the effective config.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Stop once this many optimizer steps are complete.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Skip the held-out validation after the last step.
    #[arg(long)]
    pub no_validate: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeArg {
    Euler,
    Midpoint,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Euler => Scheme::Euler,
            SchemeArg::Midpoint => Scheme::Midpoint,
        }
    }
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Seed for the initial noise.
    #[arg(long)]
    pub seed: Option<u64>,
    /// ODE steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Griffin-Lim iterations (0 = zero-phase inverse).
    #[arg(long)]
    pub gl_iters: Option<usize>,
}

impl SolverArgs {
    fn apply(&self, base: &SolverConfig) -> SolverConfig {
        SolverConfig {
            scheme: self.scheme.map(Scheme::from).unwrap_or(base.scheme),
            n_steps: self.steps.unwrap_or(base.n_steps),
            seed: self.seed.unwrap_or(base.seed),
        }
    }
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Transcript; omit for text-free enhancement.
    #[arg(long)]
    pub text: Option<String>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Trained checkpoint; without one, freshly initialised weights of the
    /// preset are timed.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 1.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Also write the report line to this file.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EnhancerKind {
    /// The trained network.
    Model,
    /// Returns the clean reference; an upper bound.
    Oracle,
    /// Returns the noisy input unchanged.
    Identity,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint; required for `--enhancer model`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "model")]
    pub enhancer: EnhancerKind,
    /// Directory written by `make-corpus --noisy`; defaults to the synthetic
    /// held-out set of the configuration.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Per-item CSV output.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV with `id` and any of `dnsmos`, `spk_sim`, `wer` to merge.
    #[arg(long)]
    pub external: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct MakeCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write a noisy mixture `NNNN.noisy.wav` per item.
    #[arg(long)]
    pub noisy: bool,
    /// SNR range for `--noisy`, in dB.
    #[arg(long, num_args = 2, allow_negative_numbers = true, default_values_t = [-5.0, 10.0])]
    pub snr_range: Vec<f64>,
}

/// Sizes the global thread pool from `FLOWSE_NUM_WORKERS` (default 1).
pub fn init_workers() -> Result<usize> {
    let n = match std::env::var("FLOWSE_NUM_WORKERS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::config(format!("FLOWSE_NUM_WORKERS must be a positive integer, got '{v}'")))?,
        Err(_) => 1,
    };
    // a second initialisation (tests calling in-process) keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(n)
}

pub fn run(cli: Cli) -> Result<()> {
    init_workers()?;
    match cli.command {
        Command::Train(a) => run_train(a),
        Command::Enhance(a) => run_enhance(a),
        Command::Bench(a) => run_bench(a),
        Command::Eval(a) => run_eval(a),
        Command::MakeCorpus(a) => run_make_corpus(a),
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let dir = RunDir::new(&a.run_dir)?;
    fs::write(dir.root.join("config.toml"), cfg.to_toml())?;
    let trainer = Trainer::new(cfg.model, cfg.mel, cfg.train, cfg.solver)?;
    let total = cfg.train.total_steps;
    let log_every = cfg.train.log_every;
    let ckpt = trainer.run(&dir, a.stop_after, |s| {
        if s.step % log_every == 0 || s.step == total {
            log::info!(
                "step {}/{} loss {:.5} lr {:.3e} grad_norm {:.3}",
                s.step,
                total,
                s.loss,
                s.lr,
                s.grad_norm
            );
        }
    })?;
    println!("trained to step {} in {}", ckpt.step, dir.root.display());
    if ckpt.step == total && !a.no_validate {
        let report = validate(&ckpt.params, &cfg.model, &trainer.held_out()?, &cfg.solver)?;
        let line = serde_json::to_string(&report).expect("report serializes");
        fs::write(dir.root.join("validation.json"), &line)?;
        println!("validation {line}");
    }
    Ok(())
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::config(format!("checkpoint {} does not exist", path.display())));
    }
    load_checkpoint(path)
}

fn read_input(path: &Path, mel: &MelConfig) -> Result<crate::dsp::Waveform> {
    read_wav(path, mel.sample_rate).map_err(|e| match e {
        Error::Io(err) => Error::config(format!("cannot read {}: {err}", path.display())),
        Error::Wav(err) => Error::config(format!("cannot decode {}: {err}", path.display())),
        other => other,
    })
}

fn run_enhance(a: EnhanceArgs) -> Result<()> {
    let ckpt = load_ckpt(&a.checkpoint)?;
    let noisy = read_input(&a.input, &ckpt.mel)?;
    let enhancer = Enhancer {
        params: &ckpt.params,
        cfg: &ckpt.model,
        mel_cfg: &ckpt.mel,
        solver: a.solver.apply(&ckpt.solver),
        gl_iters: a
            .solver
            .gl_iters
            .unwrap_or_else(|| crate::config::VocoderConfig::default().gl_iters),
        gl_momentum: crate::dsp::DEFAULT_GL_MOMENTUM,
    };
    let (out, t) = enhancer.enhance_timed(&noisy, a.text.as_deref())?;
    write_wav(&a.output, &out, WavFormat::Float32)?;
    println!(
        "mel {:.4}s ode {:.4}s inversion {:.4}s total {:.4}s ({} text)",
        t.mel_seconds,
        t.ode_seconds,
        t.inversion_seconds,
        t.total(),
        if a.text.is_some() { "with" } else { "without" }
    );
    Ok(())
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let (params, model, mel, solver, vocoder, preset): (ParamStore<f32>, _, _, _, _, String) = match &a.checkpoint {
        Some(path) => {
            let c = load_ckpt(path)?;
            let preset = format!("checkpoint:{}", path.display());
            (
                c.params,
                c.model,
                c.mel,
                c.solver,
                crate::config::VocoderConfig::default(),
                preset,
            )
        }
        None => {
            let cfg = a.config.load()?;
            (
                init_params(&cfg.model, cfg.train.seed)?,
                cfg.model,
                cfg.mel,
                cfg.solver,
                cfg.vocoder,
                a.config.preset.clone(),
            )
        }
    };
    let enhancer = Enhancer {
        params: &params,
        cfg: &model,
        mel_cfg: &mel,
        solver: a.solver.apply(&solver),
        gl_iters: a.solver.gl_iters.unwrap_or(vocoder.gl_iters),
        gl_momentum: vocoder.gl_momentum,
    };
    let report = measure_rtf(&enhancer, &preset, a.seconds, a.reps)?;
    let line = report.to_json_line();
    println!("{line}");
    println!("(reference RTF {REFERENCE_RTF} on a datacenter GPU, for context only)");
    if let Some(path) = &a.json {
        fs::write(path, format!("{line}\n"))?;
    }
    Ok(())
}

fn corpus_item_paths(dir: &Path, i: usize) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{i:04}.wav")),
        dir.join(format!("{i:04}.noisy.wav")),
        dir.join(format!("{i:04}.txt")),
    )
}

fn load_eval_dir(dir: &Path, mel: &MelConfig) -> Result<Vec<EvalItem>> {
    let mut items = Vec::new();
    for i in 0.. {
        let (clean, noisy, text) = corpus_item_paths(dir, i);
        if !clean.exists() {
            break;
        }
        if !noisy.exists() {
            return Err(Error::config(format!(
                "{} has no noisy mixture; write the corpus with --noisy",
                clean.display()
            )));
        }
        let clean = read_input(&clean, mel)?;
        let noisy = read_input(&noisy, mel)?;
        let transcript = fs::read_to_string(&text).unwrap_or_default().trim().to_string();
        items.push(EvalItem {
            clean_mel: wav_to_mel(&clean, mel)?.data,
            noisy_mel: wav_to_mel(&noisy, mel)?.data,
            clean,
            noisy,
            transcript,
        });
    }
    if items.is_empty() {
        return Err(Error::config(format!(
            "no corpus items (0000.wav, ...) in {}",
            dir.display()
        )));
    }
    Ok(items)
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let ckpt = match (&a.checkpoint, a.enhancer) {
        (Some(p), _) => Some(load_ckpt(p)?),
        (None, EnhancerKind::Model) => return Err(Error::config("--enhancer model needs --checkpoint")),
        (None, _) => None,
    };
    let cfg = a.config.load()?;
    let (mel, train, solver) = match &ckpt {
        Some(c) => (c.mel, c.train, c.solver),
        None => (cfg.mel, cfg.train, cfg.solver),
    };
    let items = match &a.data {
        Some(dir) => load_eval_dir(dir, &mel)?,
        None => held_out_set(&train, &mel)?,
    };
    let mut report = match (a.enhancer, &ckpt) {
        (EnhancerKind::Oracle, _) => eval_report(&items, &mel, |_, it| Ok(it.clean.clone()))?,
        (EnhancerKind::Identity, _) => eval_report(&items, &mel, |_, it| Ok(it.noisy.clone()))?,
        (EnhancerKind::Model, Some(c)) => {
            let base = a.solver.apply(&solver);
            let gl_iters = a.solver.gl_iters.unwrap_or(cfg.vocoder.gl_iters);
            eval_report(&items, &mel, |i, it| {
                let enhancer = Enhancer {
                    params: &c.params,
                    cfg: &c.model,
                    mel_cfg: &c.mel,
                    solver: SolverConfig {
                        seed: item_seed(base.seed, 0, i as u64),
                        ..base
                    },
                    gl_iters,
                    gl_momentum: cfg.vocoder.gl_momentum,
                };
                let text = (!it.transcript.is_empty()).then_some(it.transcript.as_str());
                enhancer.enhance(&it.noisy, text)
            })?
        }
        (EnhancerKind::Model, None) => unreachable!("checked above"),
    };
    if let Some(ext) = &a.external {
        report.merge_external(ext)?;
    }
    report.write_csv(&a.out)?;
    print!("{}", report.pretty());
    println!(
        "summary {}",
        serde_json::to_string(&report.summary()).expect("summary serializes")
    );
    Ok(())
}

fn run_make_corpus(a: MakeCorpusArgs) -> Result<()> {
    let mel = MelConfig::paper();
    let [lo, hi] =
        <[f64; 2]>::try_from(a.snr_range.as_slice()).map_err(|_| Error::config("--snr-range takes two values"))?;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::config("--snr-range must be a finite low/high pair"));
    }
    fs::create_dir_all(&a.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let corpus = toy_corpus(a.n, &mut rng, &mel)?;
    for (i, item) in corpus.iter().enumerate() {
        let (clean, noisy, text) = corpus_item_paths(&a.out, i);
        write_wav(&clean, &item.clean, WavFormat::Float32)?;
        fs::write(&text, format!("{}\n", item.transcript))?;
        if a.noisy {
            let mut r = ChaCha8Rng::seed_from_u64(item_seed(a.seed, 1, i as u64));
            let noise = toy_noise(item.clean.len(), item.clean.sample_rate, &mut r)?;
            let snr = if hi > lo {
                rand::Rng::gen_range(&mut r, lo..=hi)
            } else {
                lo
            };
            let pair = synthesize_pair(&item.clean, &noise, snr, None, &mut r)?;
            write_wav(&noisy, &pair.noisy, WavFormat::Float32)?;
        }
    }
    println!("wrote {} items to {}", corpus.len(), a.out.display());
    Ok(())
}
