//! Rectified-flow probability path, its target velocity, and the two losses.
//!
//! The path runs from Gaussian noise at `t = 0` to the clean log-mel
//! spectrogram at `t = 1` along straight lines, so the target velocity is the
//! constant `m1 - m0`.

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dsp::MelSpectrogram;
use crate::error::{ensure_same_shape, Error, Result};
use crate::real::Real;

/// A time on the unit interval.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct FlowTime(f64);

impl FlowTime {
    pub const START: FlowTime = FlowTime(0.0);
    pub const END: FlowTime = FlowTime(1.0);

    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("flow time {t} outside [0, 1]")));
        }
        Ok(FlowTime(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// State on the path together with the velocity the network should predict.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample<T> {
    pub m_t: Array2<T>,
    pub u_target: Array2<T>,
    pub t: FlowTime,
}

impl<T: Real> PathSample<T> {
    pub fn new(m0: ArrayView2<T>, m1: ArrayView2<T>, t: FlowTime) -> Result<Self> {
        Ok(PathSample {
            m_t: interpolate(m0, m1, t)?,
            u_target: target_velocity(m0, m1)?,
            t,
        })
    }
}

/// Training time, uniform on `[0, 1]`.
pub fn sample_time<R: Rng + ?Sized>(rng: &mut R) -> FlowTime {
    FlowTime(rng.gen_range(0.0..=1.0))
}

/// I.i.d. standard normal noise, the source of the flow.
pub fn gaussian_noise<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || T::of(rng.sample::<f64, _>(StandardNormal)))
}

/// `(1 - t) * m0 + t * m1`, returning the endpoints exactly at `t = 0` and `t = 1`.
pub fn interpolate<T: Real>(m0: ArrayView2<T>, m1: ArrayView2<T>, t: FlowTime) -> Result<Array2<T>> {
    ensure_same_shape(m0.shape(), m1.shape(), "interpolate")?;
    if t.0 == 0.0 {
        return Ok(m0.to_owned());
    }
    if t.0 == 1.0 {
        return Ok(m1.to_owned());
    }
    let tt = T::of(t.0);
    let one_minus = T::of(1.0 - t.0);
    Ok(Zip::from(&m0).and(&m1).map_collect(|&a, &b| one_minus * a + tt * b))
}

/// `m1 - m0`; constant along the straight path.
pub fn target_velocity<T: Real>(m0: ArrayView2<T>, m1: ArrayView2<T>) -> Result<Array2<T>> {
    ensure_same_shape(m0.shape(), m1.shape(), "target_velocity")?;
    Ok(&m1 - &m0)
}

/// Mean squared error over all cells.
pub fn cfm_loss<T: Real>(pred: ArrayView2<T>, target: ArrayView2<T>) -> Result<f64> {
    ensure_same_shape(pred.shape(), target.shape(), "cfm_loss")?;
    if pred.is_empty() {
        return Err(Error::domain("cfm_loss of an empty matrix"));
    }
    let sum: f64 = Zip::from(&pred)
        .and(&target)
        .fold(0.0, |acc, &p, &q| acc + (p - q).as_f64().powi(2));
    Ok(sum / pred.len() as f64)
}

/// Mean absolute difference between two mel spectrograms.
pub fn mel_l1(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    mean_abs_diff(a.data.view(), b.data.view())
}

pub fn mean_abs_diff<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>) -> Result<f64> {
    ensure_same_shape(a.shape(), b.shape(), "mel_l1")?;
    if a.is_empty() {
        return Err(Error::domain("mel_l1 of an empty matrix"));
    }
    let sum: f64 = Zip::from(&a)
        .and(&b)
        .fold(0.0, |acc, &x, &y| acc + (x - y).as_f64().abs());
    Ok(sum / a.len() as f64)
}
