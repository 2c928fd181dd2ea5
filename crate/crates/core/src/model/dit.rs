//! Transformer over mel frames with adaLN-zero timestep conditioning.
//!
//! Per frame the input is `[m_t ; m_y ; text]` projected to `hidden_dim`.
//! Each block is
//!
//! ```text
//! h  = LN(x) * (1 + scale1) + shift1
//! x += gate1 * Dropout(Attn(h))          (rotary positions, key padding mask)
//! h  = LN(x) * (1 + scale2) + shift2
//! x += gate2 * W2 Dropout(GELU(W1 h))
//! ```
//!
//! where the six modulation vectors are a linear function of
//! `SiLU(time_mlp(sinusoid(t)))`. A final modulated norm and linear layer
//! map back to `n_mels` channels.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use super::ops::{self, NormCache, Rope};
use super::text::{text_backward, text_forward, TextTrace};
use super::{ModelConfig, ParamStore, TextCondition};
use crate::error::{ensure_same_shape, Error, Result};
use crate::flow::FlowTime;
use crate::real::Real;

/// One network evaluation's inputs. Mel matrices are `[n_mels × frames]`;
/// frames from `valid_frames` on are padding and are masked out of attention.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a, T> {
    pub m_t: ArrayView2<'a, T>,
    pub m_y: ArrayView2<'a, T>,
    pub t: FlowTime,
    pub text: &'a TextCondition,
    pub valid_frames: usize,
}

impl<'a, T: Real> ModelInput<'a, T> {
    pub fn new(m_t: ArrayView2<'a, T>, m_y: ArrayView2<'a, T>, t: FlowTime, text: &'a TextCondition) -> Self {
        ModelInput {
            m_t,
            m_y,
            t,
            text,
            valid_frames: m_t.ncols(),
        }
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        ensure_same_shape(self.m_t.shape(), self.m_y.shape(), "model input")?;
        if self.m_t.nrows() != cfg.n_mels {
            return Err(Error::domain(format!(
                "input has {} mel channels, model expects {}",
                self.m_t.nrows(),
                cfg.n_mels
            )));
        }
        if self.m_t.ncols() == 0 {
            return Err(Error::domain("input has no frames"));
        }
        if self.valid_frames == 0 || self.valid_frames > self.m_t.ncols() {
            return Err(Error::domain(format!(
                "valid_frames {} outside 1..={}",
                self.valid_frames,
                self.m_t.ncols()
            )));
        }
        if self.m_t.iter().chain(self.m_y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite model input"));
        }
        Ok(())
    }
}

struct TimeTrace<T> {
    features: Array2<T>,
    pre1: Array2<T>,
    act1: Array2<T>,
    emb: Array2<T>,
    /// `SiLU(emb)`, the vector every modulation reads.
    cond: Array2<T>,
}

struct BlockTrace<T> {
    modulation: Array1<T>,
    norm1: NormCache<T>,
    h1: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    attn_concat: Array2<T>,
    attn_mask: Option<Array2<T>>,
    attn_dropped: Array2<T>,
    norm2: NormCache<T>,
    h2: Array2<T>,
    ffn_pre: Array2<T>,
    ffn_dropped: Array2<T>,
    ffn_mask: Option<Array2<T>>,
    ffn_out: Array2<T>,
}

/// Intermediate activations kept for the backward pass.
pub struct Trace<T> {
    frames: usize,
    valid: usize,
    text: TextTrace<T>,
    time: TimeTrace<T>,
    input: Array2<T>,
    blocks: Vec<BlockTrace<T>>,
    final_mod: Array1<T>,
    final_norm: NormCache<T>,
    final_h: Array2<T>,
    rope: Rope<T>,
}

impl<T: Real> Trace<T> {
    /// Softmax attention weights per layer and head, `[frames × frames]`.
    pub fn attention_weights(&self) -> impl Iterator<Item = &Array2<T>> {
        self.blocks.iter().flat_map(|b| b.probs.iter())
    }
}

fn sinusoid<T: Real>(t: f64, dim: usize) -> Array2<T> {
    let half = dim / 2;
    let scaled = 1000.0 * t;
    let mut f = Array2::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        f[[0, i]] = T::of((scaled * freq).cos());
        f[[0, half + i]] = T::of((scaled * freq).sin());
    }
    f
}

fn time_forward<T: Real>(params: &ParamStore<T>, cfg: &ModelConfig, t: FlowTime) -> TimeTrace<T> {
    let features = sinusoid::<T>(t.value(), cfg.hidden_dim);
    let pre1 = ops::linear(
        features.view(),
        params.mat("time.fc1.weight"),
        params.vector("time.fc1.bias"),
    );
    let act1 = pre1.mapv(ops::silu);
    let emb = ops::linear(
        act1.view(),
        params.mat("time.fc2.weight"),
        params.vector("time.fc2.bias"),
    );
    let cond = emb.mapv(ops::silu);
    TimeTrace {
        features,
        pre1,
        act1,
        emb,
        cond,
    }
}

/// Sinusoidal features of `t` passed through the two-layer time MLP.
pub fn timestep_embedding<T: Real>(t: FlowTime, params: &ParamStore<T>, cfg: &ModelConfig) -> Result<Array1<T>> {
    params.check_layout(cfg)?;
    Ok(time_forward(params, cfg, t).emb.row(0).to_owned())
}

fn chunk<T: Real>(v: &Array1<T>, i: usize, h: usize) -> ArrayView1<'_, T> {
    v.slice(s![i * h..(i + 1) * h])
}

fn rows_times<T: Real>(x: ArrayView2<T>, v: ArrayView1<T>) -> Array2<T> {
    &x * &v
}

/// Runs the network and records activations for [`backward`].
///
/// With `dropout` set, masks are drawn from the given generator in a fixed
/// order, so a seeded generator reproduces the same masks.
pub fn forward_trace<T: Real, R: Rng + ?Sized>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    input: &ModelInput<'_, T>,
    mut dropout: Option<&mut R>,
) -> Result<(Array2<T>, Trace<T>)> {
    input.check(cfg)?;
    let frames = input.m_t.ncols();
    let valid = input.valid_frames;
    let h = cfg.hidden_dim;
    let n_heads = cfg.n_heads;
    let head_dim = cfg.head_dim();
    let inv_sqrt = T::of(1.0 / (head_dim as f64).sqrt());
    let p_drop = cfg.dropout;

    let (text_feat, text_trace) = text_forward(params, cfg, input.text, frames, valid)?;
    let time = time_forward(params, cfg, input.t);
    let input_cat =
        concatenate(Axis(1), &[input.m_t.t(), input.m_y.t(), text_feat.view()]).expect("frame counts agree");
    let mut x = ops::linear(
        input_cat.view(),
        params.mat("input.weight"),
        params.vector("input.bias"),
    );
    let rope = Rope::<T>::new(frames, head_dim);

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = format!("blocks.{l}");
        let modulation = ops::linear(
            time.cond.view(),
            params.mat(&format!("{p}.mod.weight")),
            params.vector(&format!("{p}.mod.bias")),
        )
        .row(0)
        .to_owned();
        let (shift1, scale1, gate1) = (
            chunk(&modulation, 0, h),
            chunk(&modulation, 1, h),
            chunk(&modulation, 2, h),
        );
        let (shift2, scale2, gate2) = (
            chunk(&modulation, 3, h),
            chunk(&modulation, 4, h),
            chunk(&modulation, 5, h),
        );

        let norm1 = ops::layer_norm(x.view());
        let h1 = ops::modulate(norm1.xhat.view(), shift1, scale1);
        let qkv = ops::linear(
            h1.view(),
            params.mat(&format!("{p}.attn.qkv.weight")),
            params.vector(&format!("{p}.attn.qkv.bias")),
        );
        let mut q = qkv.slice(s![.., 0..h]).to_owned();
        let mut k = qkv.slice(s![.., h..2 * h]).to_owned();
        let v = qkv.slice(s![.., 2 * h..3 * h]).to_owned();
        rope.apply(&mut q, n_heads, false);
        rope.apply(&mut k, n_heads, false);

        let mut attn_concat = Array2::zeros((frames, h));
        let mut probs = Vec::with_capacity(n_heads);
        for hd in 0..n_heads {
            let cols = s![.., hd * head_dim..(hd + 1) * head_dim];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores *= inv_sqrt;
            ops::masked_softmax(&mut scores, valid);
            attn_concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let attn_out = ops::linear(
            attn_concat.view(),
            params.mat(&format!("{p}.attn.out.weight")),
            params.vector(&format!("{p}.attn.out.bias")),
        );
        let attn_mask = match dropout.as_deref_mut() {
            Some(rng) if p_drop > 0.0 => Some(ops::dropout_mask::<T, R>(frames, h, p_drop, rng)),
            _ => None,
        };
        let attn_dropped = match &attn_mask {
            Some(m) => &attn_out * m,
            None => attn_out,
        };
        x += &rows_times(attn_dropped.view(), gate1);

        let norm2 = ops::layer_norm(x.view());
        let h2 = ops::modulate(norm2.xhat.view(), shift2, scale2);
        let ffn_pre = ops::linear(
            h2.view(),
            params.mat(&format!("{p}.ffn.fc1.weight")),
            params.vector(&format!("{p}.ffn.fc1.bias")),
        );
        let ffn_act = ops::gelu(ffn_pre.view());
        let ffn_mask = match dropout.as_deref_mut() {
            Some(rng) if p_drop > 0.0 => Some(ops::dropout_mask::<T, R>(frames, cfg.ffn_dim, p_drop, rng)),
            _ => None,
        };
        let ffn_dropped = match &ffn_mask {
            Some(m) => &ffn_act * m,
            None => ffn_act,
        };
        let ffn_out = ops::linear(
            ffn_dropped.view(),
            params.mat(&format!("{p}.ffn.fc2.weight")),
            params.vector(&format!("{p}.ffn.fc2.bias")),
        );
        x += &rows_times(ffn_out.view(), gate2);

        blocks.push(BlockTrace {
            modulation,
            norm1,
            h1,
            q,
            k,
            v,
            probs,
            attn_concat,
            attn_mask,
            attn_dropped,
            norm2,
            h2,
            ffn_pre,
            ffn_dropped,
            ffn_mask,
            ffn_out,
        });
    }

    let final_mod = ops::linear(
        time.cond.view(),
        params.mat("final.mod.weight"),
        params.vector("final.mod.bias"),
    )
    .row(0)
    .to_owned();
    let final_norm = ops::layer_norm(x.view());
    let final_h = ops::modulate(final_norm.xhat.view(), chunk(&final_mod, 0, h), chunk(&final_mod, 1, h));
    let out = ops::linear(
        final_h.view(),
        params.mat("final.out.weight"),
        params.vector("final.out.bias"),
    );

    let trace = Trace {
        frames,
        valid,
        text: text_trace,
        time,
        input: input_cat,
        blocks,
        final_mod,
        final_norm,
        final_h,
        rope,
    };
    Ok((out.reversed_axes().as_standard_layout().to_owned(), trace))
}

/// Predicted velocity, `[n_mels × frames]`.
///
/// `train_mode` enables dropout with masks drawn from `rng`; in eval mode the
/// generator is untouched and the result is deterministic.
#[allow(clippy::too_many_arguments)]
pub fn forward<T: Real, R: Rng + ?Sized>(
    m_t: ArrayView2<'_, T>,
    m_y: ArrayView2<'_, T>,
    t: FlowTime,
    text: &TextCondition,
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    train_mode: bool,
    rng: &mut R,
) -> Result<Array2<T>> {
    let input = ModelInput::new(m_t.reborrow(), m_y.reborrow(), t, text);
    let dropout = if train_mode { Some(rng) } else { None };
    Ok(forward_trace(params, cfg, &input, dropout)?.0)
}

/// Gradients of a scalar loss with respect to every parameter, given
/// `d_out = dL/d(output)` in `[n_mels × frames]` layout.
pub fn backward<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    trace: &Trace<T>,
    d_out: ArrayView2<T>,
) -> Result<ParamStore<T>> {
    if d_out.dim() != (cfg.n_mels, trace.frames) {
        return Err(Error::domain(format!(
            "output gradient has shape {:?}, expected ({}, {})",
            d_out.dim(),
            cfg.n_mels,
            trace.frames
        )));
    }
    let h = cfg.hidden_dim;
    let n_heads = cfg.n_heads;
    let head_dim = cfg.head_dim();
    let inv_sqrt = T::of(1.0 / (head_dim as f64).sqrt());
    let mut grads = params.zeros_like();
    let d_out = d_out.t();

    // final layer
    let (d_final_h, dw, db) = ops::linear_backward(trace.final_h.view(), params.mat("final.out.weight"), d_out);
    grads.accumulate("final.out.weight", &dw);
    grads.accumulate("final.out.bias", &db);
    let (d_xhat, d_shift, d_scale) = ops::modulate_backward(
        trace.final_norm.xhat.view(),
        chunk(&trace.final_mod, 1, h),
        d_final_h.view(),
    );
    let mut dx = ops::layer_norm_backward(&trace.final_norm, d_xhat.view());
    let d_final_mod = concatenate(Axis(0), &[d_shift.view(), d_scale.view()]).expect("same length");
    let mut d_cond = accumulate_modulation(params, &mut grads, "final.mod", &trace.time.cond, &d_final_mod);

    for l in (0..cfg.n_layers).rev() {
        let p = format!("blocks.{l}");
        let bt = &trace.blocks[l];
        let m = &bt.modulation;
        let (scale1, gate1) = (chunk(m, 1, h), chunk(m, 2, h));
        let (scale2, gate2) = (chunk(m, 4, h), chunk(m, 5, h));

        // feed-forward branch
        let d_gate2 = (&dx * &bt.ffn_out).sum_axis(Axis(0));
        let d_ffn_out = rows_times(dx.view(), gate2);
        let (d_ffn_dropped, dw2, db2) = ops::linear_backward(
            bt.ffn_dropped.view(),
            params.mat(&format!("{p}.ffn.fc2.weight")),
            d_ffn_out.view(),
        );
        let d_ffn_act = match &bt.ffn_mask {
            Some(mask) => &d_ffn_dropped * mask,
            None => d_ffn_dropped,
        };
        let d_ffn_pre = ops::gelu_backward(bt.ffn_pre.view(), d_ffn_act.view());
        let (d_h2, dw1, db1) = ops::linear_backward(
            bt.h2.view(),
            params.mat(&format!("{p}.ffn.fc1.weight")),
            d_ffn_pre.view(),
        );
        grads.accumulate(&format!("{p}.ffn.fc2.weight"), &dw2);
        grads.accumulate(&format!("{p}.ffn.fc2.bias"), &db2);
        grads.accumulate(&format!("{p}.ffn.fc1.weight"), &dw1);
        grads.accumulate(&format!("{p}.ffn.fc1.bias"), &db1);
        let (d_xhat2, d_shift2, d_scale2) = ops::modulate_backward(bt.norm2.xhat.view(), scale2, d_h2.view());
        dx += &ops::layer_norm_backward(&bt.norm2, d_xhat2.view());

        // attention branch
        let d_gate1 = (&dx * &bt.attn_dropped).sum_axis(Axis(0));
        let d_attn_dropped = rows_times(dx.view(), gate1);
        let d_attn_out = match &bt.attn_mask {
            Some(mask) => &d_attn_dropped * mask,
            None => d_attn_dropped,
        };
        let (d_concat, dwo, dbo) = ops::linear_backward(
            bt.attn_concat.view(),
            params.mat(&format!("{p}.attn.out.weight")),
            d_attn_out.view(),
        );
        grads.accumulate(&format!("{p}.attn.out.weight"), &dwo);
        grads.accumulate(&format!("{p}.attn.out.bias"), &dbo);

        let mut dq = Array2::zeros((trace.frames, h));
        let mut dk = Array2::zeros((trace.frames, h));
        let mut dv = Array2::zeros((trace.frames, h));
        for hd in 0..n_heads {
            let cols = s![.., hd * head_dim..(hd + 1) * head_dim];
            let probs = &bt.probs[hd];
            let d_o = d_concat.slice(cols);
            dv.slice_mut(cols).assign(&probs.t().dot(&d_o));
            let d_probs = d_o.dot(&bt.v.slice(cols).t());
            let mut d_scores = ops::softmax_backward(probs.view(), d_probs.view());
            d_scores *= inv_sqrt;
            dq.slice_mut(cols).assign(&d_scores.dot(&bt.k.slice(cols)));
            dk.slice_mut(cols).assign(&d_scores.t().dot(&bt.q.slice(cols)));
        }
        trace.rope.apply(&mut dq, n_heads, true);
        trace.rope.apply(&mut dk, n_heads, true);
        let d_qkv = concatenate(Axis(1), &[dq.view(), dk.view(), dv.view()]).expect("same rows");
        let (d_h1, dw_qkv, db_qkv) =
            ops::linear_backward(bt.h1.view(), params.mat(&format!("{p}.attn.qkv.weight")), d_qkv.view());
        grads.accumulate(&format!("{p}.attn.qkv.weight"), &dw_qkv);
        grads.accumulate(&format!("{p}.attn.qkv.bias"), &db_qkv);
        let (d_xhat1, d_shift1, d_scale1) = ops::modulate_backward(bt.norm1.xhat.view(), scale1, d_h1.view());
        dx += &ops::layer_norm_backward(&bt.norm1, d_xhat1.view());

        let d_mod = concatenate(
            Axis(0),
            &[
                d_shift1.view(),
                d_scale1.view(),
                d_gate1.view(),
                d_shift2.view(),
                d_scale2.view(),
                d_gate2.view(),
            ],
        )
        .expect("same length");
        d_cond += &accumulate_modulation(params, &mut grads, &format!("{p}.mod"), &trace.time.cond, &d_mod);
    }

    // input projection; only the text slice of the input needs a gradient
    let (d_input, dw_in, db_in) = ops::linear_backward(trace.input.view(), params.mat("input.weight"), dx.view());
    grads.accumulate("input.weight", &dw_in);
    grads.accumulate("input.bias", &db_in);
    let d_text = d_input.slice(s![.., 2 * cfg.n_mels..]).to_owned();
    text_backward(params, cfg, &trace.text, d_text, trace.valid, &mut grads);

    // time MLP
    let tt = &trace.time;
    let d_emb = &d_cond * &tt.emb.mapv(ops::silu_grad);
    let (d_act1, dw2, db2) = ops::linear_backward(tt.act1.view(), params.mat("time.fc2.weight"), d_emb.view());
    let d_pre1 = &d_act1 * &tt.pre1.mapv(ops::silu_grad);
    let (_, dw1, db1) = ops::linear_backward(tt.features.view(), params.mat("time.fc1.weight"), d_pre1.view());
    grads.accumulate("time.fc2.weight", &dw2);
    grads.accumulate("time.fc2.bias", &db2);
    grads.accumulate("time.fc1.weight", &dw1);
    grads.accumulate("time.fc1.bias", &db1);

    Ok(grads)
}

/// Gradient of a modulation linear layer `cond · W + b`; returns `d cond`.
fn accumulate_modulation<T: Real>(
    params: &ParamStore<T>,
    grads: &mut ParamStore<T>,
    prefix: &str,
    cond: &Array2<T>,
    d_mod: &Array1<T>,
) -> Array2<T> {
    let d_mod = d_mod.view().insert_axis(Axis(0));
    let (d_cond, dw, db) = ops::linear_backward(cond.view(), params.mat(&format!("{prefix}.weight")), d_mod);
    grads.accumulate(&format!("{prefix}.weight"), &dw);
    grads.accumulate(&format!("{prefix}.bias"), &db);
    d_cond
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tiny(n_mels: usize) -> ModelConfig {
        ModelConfig {
            n_mels,
            ..ModelConfig::tiny()
        }
    }

    fn randn(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
    }

    /// Fresh parameters with every tensor (including the zero-initialized
    /// ones) perturbed so that all gradients are generically nonzero.
    fn perturbed(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
        let mut p = init_params::<f64>(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for (_, t) in p.iter_mut() {
            t.mapv_inplace(|v| v + 0.2 * rng.sample::<f64, _>(StandardNormal));
        }
        p
    }

    #[test]
    fn output_shape_and_zero_at_init() {
        let cfg = tiny(20);
        let p = init_params::<f64>(&cfg, 0).unwrap();
        let m_t = randn(20, 16, 1);
        let m_y = randn(20, 16, 2);
        let text = TextCondition::from_text("hello");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward(
            m_t.view(),
            m_y.view(),
            FlowTime::new(0.3).unwrap(),
            &text,
            &p,
            &cfg,
            true,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.dim(), (20, 16));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic_and_text_free_matches_filler() {
        let cfg = tiny(8);
        let p = perturbed(&cfg, 3);
        let m_t = randn(8, 6, 1);
        let m_y = randn(8, 6, 2);
        let t = FlowTime::new(0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let absent = TextCondition::absent();
        let filler = TextCondition {
            char_ids: vec![0; 6],
            present: true,
        };
        let a = forward(m_t.view(), m_y.view(), t, &absent, &p, &cfg, false, &mut rng).unwrap();
        let b = forward(m_t.view(), m_y.view(), t, &absent, &p, &cfg, false, &mut rng).unwrap();
        let c = forward(m_t.view(), m_y.view(), t, &filler, &p, &cfg, false, &mut rng).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.iter().zip(c.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let d = forward(m_t.view(), (&m_y + 0.5).view(), t, &absent, &p, &cfg, false, &mut rng).unwrap();
        assert!((&a - &d).mapv(|v| v * v).sum() > 0.0);
    }

    #[test]
    fn timestep_embedding_properties() {
        let cfg = tiny(8);
        let p = perturbed(&cfg, 4);
        let e0 = timestep_embedding(FlowTime::START, &p, &cfg).unwrap();
        let e1 = timestep_embedding(FlowTime::END, &p, &cfg).unwrap();
        assert_eq!(e0.len(), cfg.hidden_dim);
        assert_ne!(e0, e1);
        assert_eq!(e0, timestep_embedding(FlowTime::START, &p, &cfg).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let t = FlowTime::new(rng.gen_range(0.0..=1.0)).unwrap();
            assert!(timestep_embedding(t, &p, &cfg).unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = tiny(8);
        let p = perturbed(&cfg, 5);
        let m_t = randn(8, 9, 1);
        let m_y = randn(8, 9, 2);
        let text = TextCondition::from_text("xy");
        let mut input = ModelInput::new(m_t.view(), m_y.view(), FlowTime::new(0.2).unwrap(), &text);
        input.valid_frames = 7;
        let (_, trace) = forward_trace::<f64, ChaCha8Rng>(&p, &cfg, &input, None).unwrap();
        let mut n = 0;
        for probs in trace.attention_weights() {
            for row in probs.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert_eq!(row[7], 0.0);
                assert_eq!(row[8], 0.0);
            }
            n += 1;
        }
        assert_eq!(n, cfg.n_layers * cfg.n_heads);
    }

    #[test]
    fn padding_does_not_change_valid_frames() {
        let cfg = tiny(8);
        let p = perturbed(&cfg, 6);
        let m_t = randn(8, 10, 1);
        let m_y = randn(8, 10, 2);
        let text = TextCondition::from_text("abc");
        let t = FlowTime::new(0.4).unwrap();
        let short = ModelInput::new(m_t.slice(s![.., ..7]), m_y.slice(s![.., ..7]), t, &text);
        let mut padded = ModelInput::new(m_t.view(), m_y.view(), t, &text);
        padded.valid_frames = 7;
        let (a, _) = forward_trace::<f64, ChaCha8Rng>(&p, &cfg, &short, None).unwrap();
        let (b, _) = forward_trace::<f64, ChaCha8Rng>(&p, &cfg, &padded, None).unwrap();
        let b = b.slice(s![.., ..7]);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn input_errors() {
        let cfg = tiny(8);
        let p = init_params::<f64>(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = FlowTime::START;
        let text = TextCondition::absent();
        let a = randn(8, 4, 1);
        let b = randn(8, 5, 1);
        assert!(forward(a.view(), b.view(), t, &text, &p, &cfg, false, &mut rng).is_err());
        let c = randn(7, 4, 1);
        assert!(forward(c.view(), c.view(), t, &text, &p, &cfg, false, &mut rng).is_err());
        let mut d = a.clone();
        d[[0, 0]] = f64::NAN;
        assert!(matches!(
            forward(d.view(), a.view(), t, &text, &p, &cfg, false, &mut rng),
            Err(Error::Domain(_))
        ));
    }

    /// Analytic gradients against central differences for a loss of the form
    /// `sum(w ⊙ out)` restricted to valid frames, with and without dropout.
    fn gradient_check(train_mode: bool, valid: usize) {
        let cfg = tiny(8);
        let p = perturbed(&cfg, 7);
        let frames = 6;
        let m_t = randn(8, frames, 1);
        let m_y = randn(8, frames, 2);
        let mut weights = randn(8, frames, 3);
        weights.slice_mut(s![.., valid..]).fill(0.0);
        let text = TextCondition::from_text("ab");
        let t = FlowTime::new(0.35).unwrap();
        let loss = |params: &ParamStore<f64>| {
            let mut input = ModelInput::new(m_t.view(), m_y.view(), t, &text);
            input.valid_frames = valid;
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let drop = if train_mode { Some(&mut rng) } else { None };
            let (out, trace) = forward_trace(params, &cfg, &input, drop).unwrap();
            ((&out * &weights).sum(), trace)
        };
        let (_, trace) = loss(&p);
        let grads = backward(&p, &cfg, &trace, weights.view()).unwrap();
        let eps = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let names: Vec<String> = p.names().map(String::from).collect();
        for name in names {
            let n = p.get(&name).unwrap().len();
            for _ in 0..3 {
                let i = rng.gen_range(0..n);
                let mut plus = p.clone();
                plus.get_mut(&name).unwrap().as_slice_mut().unwrap()[i] += eps;
                let mut minus = p.clone();
                minus.get_mut(&name).unwrap().as_slice_mut().unwrap()[i] -= eps;
                let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * eps);
                let an = grads.get(&name).unwrap().as_slice().unwrap()[i];
                let scale = fd.abs().max(an.abs());
                // below ~1e-5 the O(eps^2) truncation error dominates
                let ok = if scale > 1e-5 {
                    (fd - an).abs() / scale < 1e-4
                } else {
                    (fd - an).abs() < 1e-9
                };
                assert!(ok, "{name}[{i}]: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_eval() {
        gradient_check(false, 6);
    }

    #[test]
    fn gradients_match_finite_differences_with_dropout_and_padding() {
        gradient_check(true, 4);
    }
}
