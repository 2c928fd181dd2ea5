//! Forward and backward kernels for the layers of the velocity network.
//!
//! Activations are `[frames × channels]`, one row per frame.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::real::Real;

const LN_EPS: f64 = 1e-6;

pub(crate) fn linear<T: Real>(x: ArrayView2<T>, w: ArrayView2<T>, b: ArrayView1<T>) -> Array2<T> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Returns `(dx, dw, db)`.
pub(crate) fn linear_backward<T: Real>(
    x: ArrayView2<T>,
    w: ArrayView2<T>,
    dy: ArrayView2<T>,
) -> (Array2<T>, Array2<T>, Array1<T>) {
    (dy.dot(&w.t()), x.t().dot(&dy), dy.sum_axis(Axis(0)))
}

/// Normalized rows and the per-row reciprocal standard deviation.
pub(crate) struct NormCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

/// Row-wise layer normalization without affine parameters.
pub(crate) fn layer_norm<T: Real>(x: ArrayView2<T>) -> NormCache<T> {
    let d = T::of(x.ncols() as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *r = T::one() / (var + eps).sqrt();
        row *= *r;
    }
    NormCache { xhat, rstd }
}

pub(crate) fn layer_norm_backward<T: Real>(cache: &NormCache<T>, dxhat: ArrayView2<T>) -> Array2<T> {
    let d = T::of(dxhat.ncols() as f64);
    let mut dx = Array2::zeros(dxhat.raw_dim());
    for (((mut out, g), xh), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_g = g.sum() / d;
        let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = r * (gi - mean_g - xi * mean_gx));
    }
    dx
}

/// `xhat * (1 + scale) + shift`, broadcast over rows.
pub(crate) fn modulate<T: Real>(xhat: ArrayView2<T>, shift: ArrayView1<T>, scale: ArrayView1<T>) -> Array2<T> {
    let mut y = xhat.to_owned();
    for mut row in y.rows_mut() {
        Zip::from(&mut row)
            .and(&shift)
            .and(&scale)
            .for_each(|v, &sh, &sc| *v = *v * (T::one() + sc) + sh);
    }
    y
}

/// Returns `(dxhat, dshift, dscale)`.
pub(crate) fn modulate_backward<T: Real>(
    xhat: ArrayView2<T>,
    scale: ArrayView1<T>,
    dy: ArrayView2<T>,
) -> (Array2<T>, Array1<T>, Array1<T>) {
    let dshift = dy.sum_axis(Axis(0));
    let dscale = (&dy * &xhat).sum_axis(Axis(0));
    let factor = scale.mapv(|s| T::one() + s);
    let dxhat = &dy * &factor;
    (dxhat, dshift, dscale)
}

fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * x * x)
}

/// Tanh-approximated GELU.
pub(crate) fn gelu<T: Real>(x: ArrayView2<T>) -> Array2<T> {
    x.mapv(gelu_scalar)
}

pub(crate) fn gelu_backward<T: Real>(x: ArrayView2<T>, dy: ArrayView2<T>) -> Array2<T> {
    Zip::from(&x).and(&dy).map_collect(|&v, &g| g * gelu_grad_scalar(v))
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

pub(crate) fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Row-wise softmax over the first `valid` columns; masked columns get zero.
pub(crate) fn masked_softmax<T: Real>(scores: &mut Array2<T>, valid: usize) {
    for mut row in scores.rows_mut() {
        let live = row.slice(s![..valid]);
        let max = live.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.slice_mut(s![..valid]).iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.slice_mut(s![..valid]).mapv_inplace(|v| v / sum);
        row.slice_mut(s![valid..]).fill(T::zero());
    }
}

/// `dS = P ⊙ (dP − rowsum(dP ⊙ P))`.
pub(crate) fn softmax_backward<T: Real>(p: ArrayView2<T>, dp: ArrayView2<T>) -> Array2<T> {
    let mut ds = Array2::zeros(p.raw_dim());
    for ((mut out, pr), dr) in ds.rows_mut().into_iter().zip(p.rows()).zip(dp.rows()) {
        let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
        Zip::from(&mut out)
            .and(&pr)
            .and(&dr)
            .for_each(|o, &pi, &di| *o = pi * (di - dot));
    }
    ds
}

/// Rotary position tables for `frames` positions and pairs within one head.
pub(crate) struct Rope<T> {
    cos: Array2<T>,
    sin: Array2<T>,
}

impl<T: Real> Rope<T> {
    pub fn new(frames: usize, head_dim: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Array2::zeros((frames, half));
        let mut sin = Array2::zeros((frames, half));
        for p in 0..frames {
            for i in 0..half {
                let freq = 10_000f64.powf(-(2.0 * i as f64) / head_dim as f64);
                let ang = p as f64 * freq;
                cos[[p, i]] = T::of(ang.cos());
                sin[[p, i]] = T::of(ang.sin());
            }
        }
        Rope { cos, sin }
    }

    /// Rotates consecutive channel pairs of every head in place.
    /// `inverse` applies the transpose rotation, which is the backward pass.
    pub fn apply(&self, x: &mut Array2<T>, n_heads: usize, inverse: bool) {
        let head_dim = x.ncols() / n_heads;
        let half = head_dim / 2;
        for (p, mut row) in x.rows_mut().into_iter().enumerate() {
            for h in 0..n_heads {
                for i in 0..half {
                    let a = h * head_dim + 2 * i;
                    let (c, s) = (self.cos[[p, i]], self.sin[[p, i]]);
                    let s = if inverse { -s } else { s };
                    let (x0, x1) = (row[a], row[a + 1]);
                    row[a] = x0 * c - x1 * s;
                    row[a + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

/// Inverted-dropout mask: zeros with probability `p`, `1 / (1 - p)` otherwise.
pub(crate) fn dropout_mask<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Array2<T> {
    let keep = T::of(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn((rows, cols), || if rng.gen::<f64>() < p { T::zero() } else { keep })
}

/// Depthwise 1-D convolution along frames with zero padding; `w` is
/// `[channels × kernel]`.
pub(crate) fn depthwise_conv<T: Real>(x: ArrayView2<T>, w: ArrayView2<T>, b: ArrayView1<T>) -> Array2<T> {
    let (frames, channels) = x.dim();
    let kernel = w.ncols();
    let half = (kernel / 2) as isize;
    let mut y = Array2::zeros((frames, channels));
    for p in 0..frames {
        for k in 0..kernel {
            let src = p as isize + k as isize - half;
            if src < 0 || src >= frames as isize {
                continue;
            }
            let xs = x.row(src as usize);
            let mut yr = y.row_mut(p);
            Zip::from(&mut yr)
                .and(&xs)
                .and(w.column(k))
                .for_each(|o, &xi, &wi| *o += wi * xi);
        }
        let mut yr = y.row_mut(p);
        yr += &b;
    }
    y
}

/// Returns `(dx, dw, db)`.
pub(crate) fn depthwise_conv_backward<T: Real>(
    x: ArrayView2<T>,
    w: ArrayView2<T>,
    dy: ArrayView2<T>,
) -> (Array2<T>, Array2<T>, Array1<T>) {
    let (frames, _) = x.dim();
    let kernel = w.ncols();
    let half = (kernel / 2) as isize;
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dw = Array2::zeros(w.raw_dim());
    for p in 0..frames {
        let g = dy.row(p);
        for k in 0..kernel {
            let src = p as isize + k as isize - half;
            if src < 0 || src >= frames as isize {
                continue;
            }
            let src = src as usize;
            Zip::from(dx.row_mut(src))
                .and(&g)
                .and(w.column(k))
                .for_each(|o, &gi, &wi| *o += wi * gi);
            Zip::from(dw.column_mut(k))
                .and(&g)
                .and(x.row(src))
                .for_each(|o, &gi, &xi| *o += gi * xi);
        }
    }
    (dx, dw, dy.sum_axis(Axis(0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    // Finite-difference check of a scalar function of a matrix against an
    // analytic gradient.
    fn check(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64, grad: &Array2<f64>) {
        let eps = 1e-6;
        for idx in [(0, 0), (1, 2), (x.nrows() - 1, x.ncols() - 1)] {
            let mut p = x.clone();
            p[idx] += eps;
            let mut m = x.clone();
            m[idx] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            assert!((fd - grad[idx]).abs() < 1e-6, "{idx:?}: fd {fd} vs {}", grad[idx]);
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let x = random(4, 6, 1);
        let g = random(4, 6, 2);
        let f = |x: &Array2<f64>| (layer_norm(x.view()).xhat * &g).sum();
        let dx = layer_norm_backward(&layer_norm(x.view()), g.view());
        check(&x, f, &dx);
    }

    #[test]
    fn gelu_and_silu_gradients() {
        let x = random(3, 5, 3);
        let g = random(3, 5, 4);
        let f = |x: &Array2<f64>| (gelu(x.view()) * &g).sum();
        check(&x, f, &gelu_backward(x.view(), g.view()));
        for v in [-2.0f64, -0.3, 0.0, 0.7, 3.0] {
            let fd = (silu(v + 1e-6) - silu(v - 1e-6)) / 2e-6;
            assert!((fd - silu_grad(v)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_mask() {
        let mut s = random(3, 5, 5);
        masked_softmax(&mut s, 3);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert_eq!(row[3], 0.0);
            assert_eq!(row[4], 0.0);
        }
    }

    #[test]
    fn softmax_gradient() {
        let x = random(3, 4, 6);
        let g = random(3, 4, 7);
        let f = |x: &Array2<f64>| {
            let mut p = x.clone();
            masked_softmax(&mut p, 4);
            (p * &g).sum()
        };
        let mut p = x.clone();
        masked_softmax(&mut p, 4);
        check(&x, f, &softmax_backward(p.view(), g.view()));
    }

    #[test]
    fn rope_inverse_undoes_rotation_and_preserves_norm() {
        let rope = Rope::<f64>::new(5, 4);
        let x = random(5, 8, 8);
        let mut y = x.clone();
        rope.apply(&mut y, 2, false);
        for (a, b) in x.rows().into_iter().zip(y.rows()) {
            let na: f64 = a.iter().map(|v| v * v).sum();
            let nb: f64 = b.iter().map(|v| v * v).sum();
            assert!((na - nb).abs() < 1e-12);
        }
        assert_eq!(y.row(0), x.row(0));
        rope.apply(&mut y, 2, true);
        assert!(y.iter().zip(x.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn depthwise_conv_matches_hand_case_and_gradient() {
        // one channel, kernel [1, 2, 3] centered
        let x = array![[1.0], [0.0], [2.0]];
        let w = array![[1.0, 2.0, 3.0]];
        let b = array![0.5];
        let y = depthwise_conv(x.view(), w.view(), b.view());
        // y[0] = 2*1 + 3*0, y[1] = 1*1 + 2*0 + 3*2, y[2] = 1*0 + 2*2
        assert_eq!(y, array![[2.5], [7.5], [4.5]]);

        let x = random(6, 3, 9);
        let w = random(3, 5, 10);
        let b = Array1::zeros(3);
        let g = random(6, 3, 11);
        let (dx, dw, _) = depthwise_conv_backward(x.view(), w.view(), g.view());
        check(&x, |x| (depthwise_conv(x.view(), w.view(), b.view()) * &g).sum(), &dx);
        check(&w, |w| (depthwise_conv(x.view(), w.view(), b.view()) * &g).sum(), &dw);
    }

    #[test]
    fn dropout_mask_scales_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m: Array2<f64> = dropout_mask(100, 100, 0.1, &mut rng);
        let kept = m.iter().filter(|&&v| v > 0.0).count();
        assert!((8800..=9200).contains(&kept));
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));
    }
}
