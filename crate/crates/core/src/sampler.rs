//! Fixed-step ODE integration of the learned velocity field, and the
//! waveform-to-waveform enhancement pipeline built on it.

use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{wav_to_mel, GriffinLim, MelConfig, MelSpectrogram, Waveform};
use crate::error::{ensure_same_shape, Error, Result};
use crate::flow::{gaussian_noise, FlowTime};
use crate::model::{forward, ModelConfig, ParamStore, TextCondition};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Midpoint,
}

impl Scheme {
    /// Velocity evaluations per step.
    pub fn evaluations(self) -> usize {
        match self {
            Scheme::Euler => 1,
            Scheme::Midpoint => 2,
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Euler => "euler",
            Scheme::Midpoint => "midpoint",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub scheme: Scheme,
    pub n_steps: usize,
    /// Seed for the initial noise `M_0`.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            scheme: Scheme::Euler,
            n_steps: 16,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::config("solver.n_steps must be at least 1"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.n_steps as f64
    }

    pub fn describe(&self) -> String {
        format!("{}x{}", self.scheme, self.n_steps)
    }
}

/// Anything that can produce `dz/dt` at a state and time.
pub trait VelocityField<T> {
    fn velocity(&self, z: ArrayView2<T>, t: f64) -> Result<Array2<T>>;
}

impl<T, F> VelocityField<T> for F
where
    F: Fn(ArrayView2<T>, f64) -> Result<Array2<T>>,
{
    fn velocity(&self, z: ArrayView2<T>, t: f64) -> Result<Array2<T>> {
        self(z, t)
    }
}

/// The trained network as a velocity field, conditioned on a noisy mel and
/// an optional transcript. Always runs in eval mode.
pub struct ModelField<'a, T> {
    pub params: &'a ParamStore<T>,
    pub cfg: &'a ModelConfig,
    pub m_y: ArrayView2<'a, T>,
    pub text: &'a TextCondition,
}

impl<T: Real> VelocityField<T> for ModelField<'_, T> {
    fn velocity(&self, z: ArrayView2<T>, t: f64) -> Result<Array2<T>> {
        let t = FlowTime::new(t.min(1.0))?;
        // eval mode never touches the generator
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        forward(z, self.m_y, t, self.text, self.params, self.cfg, false, &mut unused)
    }
}

fn check_step(t: f64, dt: f64) -> Result<()> {
    if !(t >= 0.0 && dt >= 0.0 && t + dt <= 1.0 + 1e-9) {
        return Err(Error::domain(format!("step from t={t} by dt={dt} leaves [0, 1]")));
    }
    Ok(())
}

fn checked_velocity<T: Real, V: VelocityField<T> + ?Sized>(field: &V, z: ArrayView2<T>, t: f64) -> Result<Array2<T>> {
    let v = field.velocity(z, t)?;
    ensure_same_shape(v.shape(), z.shape(), "velocity field output")?;
    Ok(v)
}

/// `z + v(z, t)·dt` with one field evaluation.
pub fn euler_step<T: Real, V: VelocityField<T> + ?Sized>(
    field: &V,
    z: ArrayView2<T>,
    t: f64,
    dt: f64,
) -> Result<Array2<T>> {
    check_step(t, dt)?;
    let v = checked_velocity(field, z, t)?;
    Ok(&z + &(v * T::of(dt)))
}

/// Explicit midpoint: two field evaluations.
pub fn midpoint_step<T: Real, V: VelocityField<T> + ?Sized>(
    field: &V,
    z: ArrayView2<T>,
    t: f64,
    dt: f64,
) -> Result<Array2<T>> {
    check_step(t, dt)?;
    let half = T::of(dt / 2.0);
    let v0 = checked_velocity(field, z, t)?;
    let mid = &z + &(v0 * half);
    let v1 = checked_velocity(field, mid.view(), t + dt / 2.0)?;
    Ok(&z + &(v1 * T::of(dt)))
}

/// Integrates from `t = 0` to `t = 1` in `n_steps` uniform steps.
pub fn integrate<T: Real, V: VelocityField<T> + ?Sized>(
    field: &V,
    z0: ArrayView2<T>,
    solver: &SolverConfig,
) -> Result<Array2<T>> {
    solver.validate()?;
    let dt = solver.dt();
    let mut z = z0.to_owned();
    for step in 0..solver.n_steps {
        let t = step as f64 * dt;
        z = match solver.scheme {
            Scheme::Euler => euler_step(field, z.view(), t, dt)?,
            Scheme::Midpoint => midpoint_step(field, z.view(), t, dt)?,
        };
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step,
                what: "ODE state became non-finite".into(),
            });
        }
    }
    Ok(z)
}

/// Draws `M_0` from the solver seed and integrates the model field.
pub fn sample_mel<T: Real>(
    m_y: ArrayView2<T>,
    text: &TextCondition,
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    solver: &SolverConfig,
) -> Result<Array2<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(solver.seed);
    let m0 = gaussian_noise::<T, _>(m_y.nrows(), m_y.ncols(), &mut rng);
    let field = ModelField {
        params,
        cfg,
        m_y: m_y.reborrow(),
        text,
    };
    integrate(&field, m0.view(), solver)
}

/// Wall-clock time spent in each pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub mel_seconds: f64,
    pub ode_seconds: f64,
    pub inversion_seconds: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.mel_seconds + self.ode_seconds + self.inversion_seconds
    }
}

/// Everything `enhance` needs besides the audio.
pub struct Enhancer<'a> {
    pub params: &'a ParamStore<f32>,
    pub cfg: &'a ModelConfig,
    pub mel_cfg: &'a MelConfig,
    pub solver: SolverConfig,
    pub gl_iters: usize,
    pub gl_momentum: f64,
}

impl Enhancer<'_> {
    /// Enhanced mel spectrogram of a waveform.
    pub fn enhance_mel(&self, noisy: &MelSpectrogram, transcript: Option<&str>) -> Result<MelSpectrogram> {
        let text = TextCondition::from_optional(transcript);
        let data = sample_mel(noisy.data.view(), &text, self.params, self.cfg, &self.solver)?;
        MelSpectrogram::new(data, *self.mel_cfg)
    }

    pub fn enhance_timed(&self, noisy: &Waveform, transcript: Option<&str>) -> Result<(Waveform, StageTimings)> {
        noisy.validate()?;
        if noisy.is_empty() {
            return Err(Error::domain("cannot enhance empty audio"));
        }
        if noisy.sample_rate != self.mel_cfg.sample_rate {
            return Err(Error::domain(format!(
                "input is {} Hz, model expects {} Hz",
                noisy.sample_rate, self.mel_cfg.sample_rate
            )));
        }
        self.solver.validate()?;
        let mut timings = StageTimings::default();
        let clock = Instant::now();
        let m_y = wav_to_mel(noisy, self.mel_cfg)?;
        timings.mel_seconds = secs(clock.elapsed());

        let clock = Instant::now();
        let m_hat = self.enhance_mel(&m_y, transcript)?;
        timings.ode_seconds = secs(clock.elapsed());

        let clock = Instant::now();
        let mut gl = GriffinLim::new(self.mel_cfg)?;
        gl.momentum = self.gl_momentum;
        let mut out = gl.run(&m_hat, self.gl_iters, self.solver.seed)?;
        out.fit_to_len(noisy.len());
        timings.inversion_seconds = secs(clock.elapsed());
        Ok((out, timings))
    }

    pub fn enhance(&self, noisy: &Waveform, transcript: Option<&str>) -> Result<Waveform> {
        Ok(self.enhance_timed(noisy, transcript)?.0)
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Noisy waveform in, enhanced waveform of the same length out.
#[allow(clippy::too_many_arguments)]
pub fn enhance(
    noisy: &Waveform,
    transcript: Option<&str>,
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    mel_cfg: &MelConfig,
    solver: &SolverConfig,
    gl_iters: usize,
) -> Result<Waveform> {
    Enhancer {
        params,
        cfg,
        mel_cfg,
        solver: *solver,
        gl_iters,
        gl_momentum: crate::dsp::DEFAULT_GL_MOMENTUM,
    }
    .enhance(noisy, transcript)
}
