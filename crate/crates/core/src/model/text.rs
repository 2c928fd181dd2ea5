//! Character encoder: byte embeddings refined by ConvNeXt blocks
//! (depthwise conv → layer norm → pointwise FFN, residual).

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};

use super::ops::{self, NormCache};
use super::{ModelConfig, ParamStore, TextCondition};
use crate::error::Result;
use crate::real::Real;

pub(crate) struct BlockTrace<T> {
    input: Array2<T>,
    norm: NormCache<T>,
    normed: Array2<T>,
    pre_act: Array2<T>,
    act: Array2<T>,
}

pub(crate) struct TextTrace<T> {
    ids: Vec<usize>,
    blocks: Vec<BlockTrace<T>>,
}

fn zero_padding_rows<T: Real>(x: &mut Array2<T>, valid: usize) {
    x.slice_mut(s![valid.., ..]).fill(T::zero());
}

/// Frame-aligned text features, `[frames × text_embed_dim]`. Rows from
/// `valid` on are zeroed before every convolution so padded frames never
/// leak into real ones.
pub(crate) fn text_forward<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    cond: &TextCondition,
    frames: usize,
    valid: usize,
) -> Result<(Array2<T>, TextTrace<T>)> {
    cond.validate(cfg.text_vocab)?;
    let ids = cond.frame_ids(frames);
    let table = params.mat("text.embed");
    let mut x = table.select(Axis(0), &ids);
    let mut blocks = Vec::with_capacity(cfg.text_blocks);
    for b in 0..cfg.text_blocks {
        let p = format!("text.blocks.{b}");
        zero_padding_rows(&mut x, valid);
        let conv = ops::depthwise_conv(
            x.view(),
            params.mat(&format!("{p}.dw.weight")),
            params.vector(&format!("{p}.dw.bias")),
        );
        let norm = ops::layer_norm(conv.view());
        let gamma = params.vector(&format!("{p}.norm.weight"));
        let beta = params.vector(&format!("{p}.norm.bias"));
        let normed = affine(norm.xhat.view(), gamma, beta);
        let pre_act = ops::linear(
            normed.view(),
            params.mat(&format!("{p}.pw1.weight")),
            params.vector(&format!("{p}.pw1.bias")),
        );
        let act = ops::gelu(pre_act.view());
        let out = ops::linear(
            act.view(),
            params.mat(&format!("{p}.pw2.weight")),
            params.vector(&format!("{p}.pw2.bias")),
        );
        let next = &x + &out;
        blocks.push(BlockTrace {
            input: x,
            norm,
            normed,
            pre_act,
            act,
        });
        x = next;
    }
    zero_padding_rows(&mut x, valid);
    Ok((x, TextTrace { ids, blocks }))
}

fn affine<T: Real>(xhat: ArrayView2<T>, gamma: ArrayView1<T>, beta: ArrayView1<T>) -> Array2<T> {
    let mut y = &xhat * &gamma;
    y += &beta;
    y
}

/// Accumulates parameter gradients given `d_out = dL/d(text features)`.
pub(crate) fn text_backward<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    trace: &TextTrace<T>,
    d_out: Array2<T>,
    valid: usize,
    grads: &mut ParamStore<T>,
) {
    let mut dx = d_out;
    zero_padding_rows(&mut dx, valid);
    for b in (0..cfg.text_blocks).rev() {
        let p = format!("text.blocks.{b}");
        let bt = &trace.blocks[b];
        // residual: dx flows to the block input unchanged, plus the branch
        let (d_act, dw2, db2) = ops::linear_backward(bt.act.view(), params.mat(&format!("{p}.pw2.weight")), dx.view());
        let d_pre = ops::gelu_backward(bt.pre_act.view(), d_act.view());
        let (d_normed, dw1, db1) =
            ops::linear_backward(bt.normed.view(), params.mat(&format!("{p}.pw1.weight")), d_pre.view());
        let gamma = params.vector(&format!("{p}.norm.weight"));
        let d_gamma = (&d_normed * &bt.norm.xhat).sum_axis(Axis(0));
        let d_beta = d_normed.sum_axis(Axis(0));
        let d_xhat = &d_normed * &gamma;
        let d_conv = ops::layer_norm_backward(&bt.norm, d_xhat.view());
        let (d_in, d_dw, d_db) =
            ops::depthwise_conv_backward(bt.input.view(), params.mat(&format!("{p}.dw.weight")), d_conv.view());
        grads.accumulate(&format!("{p}.pw2.weight"), &dw2);
        grads.accumulate(&format!("{p}.pw2.bias"), &db2);
        grads.accumulate(&format!("{p}.pw1.weight"), &dw1);
        grads.accumulate(&format!("{p}.pw1.bias"), &db1);
        grads.accumulate(&format!("{p}.norm.weight"), &d_gamma);
        grads.accumulate(&format!("{p}.norm.bias"), &d_beta);
        grads.accumulate(&format!("{p}.dw.weight"), &d_dw);
        grads.accumulate(&format!("{p}.dw.bias"), &d_db);
        dx += &d_in;
        zero_padding_rows(&mut dx, valid);
    }
    let mut table = grads.mat_mut("text.embed");
    for (row, &id) in dx.rows().into_iter().zip(&trace.ids) {
        let mut target = table.row_mut(id);
        target += &row;
    }
}

/// Text features in `[text_embed_dim × frames]` layout.
pub fn encode_text<T: Real>(
    cond: &TextCondition,
    frames: usize,
    params: &ParamStore<T>,
    cfg: &ModelConfig,
) -> Result<Array2<T>> {
    if frames == 0 {
        return Err(crate::Error::domain("encode_text needs at least one frame"));
    }
    params.check_layout(cfg)?;
    let (x, _) = text_forward(params, cfg, cond, frames, frames)?;
    Ok(x.reversed_axes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn absent_text_equals_all_filler() {
        let cfg = ModelConfig::tiny();
        let p = init_params::<f64>(&cfg, 1).unwrap();
        let a = encode_text(&TextCondition::absent(), 10, &p, &cfg).unwrap();
        let filler = TextCondition {
            char_ids: vec![0; 10],
            present: true,
        };
        let b = encode_text(&filler, 10, &p, &cfg).unwrap();
        assert_eq!(a, b);
        let hidden = TextCondition {
            present: false,
            ..TextCondition::from_text("hello")
        };
        assert_eq!(encode_text(&hidden, 10, &p, &cfg).unwrap(), a);
    }

    #[test]
    fn shape_and_sensitivity() {
        let cfg = ModelConfig::tiny();
        let p = init_params::<f64>(&cfg, 2).unwrap();
        for (text, frames) in [("abc", 1), ("abc", 12), ("a much longer transcript", 5)] {
            let e = encode_text(&TextCondition::from_text(text), frames, &p, &cfg).unwrap();
            assert_eq!(e.dim(), (cfg.text_embed_dim, frames));
        }
        let a = encode_text(&TextCondition::from_text("abcd"), 8, &p, &cfg).unwrap();
        let b = encode_text(&TextCondition::from_text("abce"), 8, &p, &cfg).unwrap();
        assert!((&a - &b).mapv(|v| v * v).sum() > 0.0);
        assert!(encode_text(&TextCondition::absent(), 0, &p, &cfg).is_err());
    }

    #[test]
    fn out_of_vocab_id_is_domain_error() {
        let cfg = ModelConfig::tiny();
        let p = init_params::<f64>(&cfg, 2).unwrap();
        let c = TextCondition {
            char_ids: vec![999],
            present: true,
        };
        assert!(matches!(encode_text(&c, 4, &p, &cfg), Err(crate::Error::Domain(_))));
    }
}
