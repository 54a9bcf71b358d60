//! Scaled dot-product attention with boolean key-visibility masks, and the
//! CoAttMask cross-attention mask.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, Axis};

use super::layers::{linear, linear_backward};
use super::params::{Attn, Parameters};
use super::ModelError;

/// Additive bias on invisible keys before the softmax. Their weights are then
/// set to exactly zero.
pub const MASK_BIAS: f64 = -1e9;

/// `visible[[q, k]]` is true when query `q` may attend to key `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    visible: Array2<bool>,
}

impl AttentionMask {
    pub fn new(visible: Array2<bool>) -> Result<Self, ModelError> {
        let mask = AttentionMask { visible };
        mask.check_rows()?;
        Ok(mask)
    }

    /// Every query sees the same keys.
    pub fn keys(queries: usize, key_visible: &[bool]) -> Result<Self, ModelError> {
        AttentionMask::new(Array2::from_shape_fn((queries, key_visible.len()), |(_, k)| key_visible[k]))
    }

    /// Lower-triangular mask over non-PAD keys.
    pub fn causal(pad: &[bool]) -> Result<Self, ModelError> {
        let n = pad.len();
        AttentionMask::new(Array2::from_shape_fn((n, n), |(q, k)| k <= q && !pad[k]))
    }

    pub fn visible(&self) -> &Array2<bool> {
        &self.visible
    }

    pub fn shape(&self) -> (usize, usize) {
        self.visible.dim()
    }

    fn check_rows(&self) -> Result<(), ModelError> {
        for (row, vis) in self.visible.rows().into_iter().enumerate() {
            if !vis.iter().any(|&v| v) {
                return Err(ModelError::NoVisibleKey { row });
            }
        }
        Ok(())
    }
}

/// Key visibility for decoder cross-attention: a source position is visible
/// iff it is neither padding nor context.
pub fn coatt_mask(pad_mask: &[bool], src_context_mask: &[bool]) -> Result<Vec<bool>, ModelError> {
    if pad_mask.len() != src_context_mask.len() {
        return Err(ModelError::MaskLength {
            expected: pad_mask.len(),
            got: src_context_mask.len(),
        });
    }
    let visible: Vec<bool> = pad_mask.iter().zip(src_context_mask).map(|(&p, &c)| !p && !c).collect();
    if !visible.iter().any(|&v| v) {
        return Err(ModelError::NoVisibleKey { row: 0 });
    }
    Ok(visible)
}

/// Row-wise softmax of `scores` over visible keys; invisible entries are
/// exactly zero.
pub(crate) fn masked_softmax(scores: &mut Array2<f64>, mask: &AttentionMask) {
    for (mut row, vis) in scores.rows_mut().into_iter().zip(mask.visible.rows()) {
        for (s, &v) in row.iter_mut().zip(vis) {
            if !v {
                *s += MASK_BIAS;
            }
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
        row.mapv_inplace(|s| (s - max).exp());
        let sum = row.sum();
        for (s, &v) in row.iter_mut().zip(vis) {
            *s = if v { *s / sum } else { 0.0 };
        }
    }
}

/// Attention weights softmax(q kᵀ / sqrt(d)) restricted to visible keys.
pub fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>, mask: &AttentionMask) -> Result<Array2<f64>, ModelError> {
    if mask.shape() != (q.nrows(), k.nrows()) {
        return Err(ModelError::MaskLength {
            expected: q.nrows() * k.nrows(),
            got: mask.visible.len(),
        });
    }
    mask.check_rows()?;
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q.dot(&k.t()) * scale;
    masked_softmax(&mut scores, mask);
    Ok(scores)
}

/// Single-head scaled dot-product attention.
pub fn attention(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>, mask: &AttentionMask) -> Result<Array2<f64>, ModelError> {
    Ok(attention_weights(q, k, mask)?.dot(&v))
}

pub(crate) struct MhaCache {
    xq: Array2<f64>,
    xkv: Option<Array2<f64>>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// `[segment][head]` weights.
    pub probs: Vec<Vec<Array2<f64>>>,
    ctx: Array2<f64>,
}

/// Multi-head attention over packed sequences: segment `i` of the queries
/// attends to segment `i` of the keys under `masks[i]`. `xkv == None` means
/// self-attention.
#[allow(clippy::too_many_arguments)]
pub(crate) fn multi_head(
    p: &Parameters,
    a: &Attn,
    heads: usize,
    xq: Array2<f64>,
    xkv: Option<&Array2<f64>>,
    q_segs: &[Range<usize>],
    k_segs: &[Range<usize>],
    masks: &[AttentionMask],
) -> (Array2<f64>, MhaCache) {
    let kv_in = xkv.unwrap_or(&xq);
    let q = linear(p, &a.q, &xq);
    let k = linear(p, &a.k, kv_in);
    let v = linear(p, &a.v, kv_in);
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(q_segs.len());
    for ((qr, kr), mask) in q_segs.iter().zip(k_segs).zip(masks) {
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![qr.clone(), cols.clone()]);
            let kh = k.slice(s![kr.clone(), cols.clone()]);
            let vh = v.slice(s![kr.clone(), cols.clone()]);
            let mut w = qh.dot(&kh.t()) * scale;
            masked_softmax(&mut w, mask);
            ctx.slice_mut(s![qr.clone(), cols]).assign(&w.dot(&vh));
            per_head.push(w);
        }
        probs.push(per_head);
    }
    let out = linear(p, &a.o, &ctx);
    let cache = MhaCache {
        xq,
        xkv: xkv.cloned(),
        q,
        k,
        v,
        probs,
        ctx,
    };
    (out, cache)
}

/// Returns (d xq, d xkv); for self-attention the second is `None` and its
/// contribution is already folded into the first.
#[allow(clippy::too_many_arguments)]
pub(crate) fn multi_head_backward(
    p: &Parameters,
    a: &Attn,
    heads: usize,
    cache: &MhaCache,
    q_segs: &[Range<usize>],
    k_segs: &[Range<usize>],
    dout: &Array2<f64>,
    g: &mut Parameters,
) -> (Array2<f64>, Option<Array2<f64>>) {
    let dctx = linear_backward(p, &a.o, &cache.ctx, dout, g);
    let d = cache.q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for ((qr, kr), per_head) in q_segs.iter().zip(k_segs).zip(&cache.probs) {
        for (h, w) in per_head.iter().enumerate() {
            let cols = h * dh..(h + 1) * dh;
            let dctx_h = dctx.slice(s![qr.clone(), cols.clone()]);
            let qh = cache.q.slice(s![qr.clone(), cols.clone()]);
            let kh = cache.k.slice(s![kr.clone(), cols.clone()]);
            let vh = cache.v.slice(s![kr.clone(), cols.clone()]);
            let dw = dctx_h.dot(&vh.t());
            let mut dv_h = dv.slice_mut(s![kr.clone(), cols.clone()]);
            dv_h += &w.t().dot(&dctx_h);
            // softmax backward: ds = w * (dw - sum_k w * dw)
            let row_dot = (&dw * w).sum_axis(Axis(1));
            let mut ds = dw;
            ds -= &row_dot.insert_axis(Axis(1));
            ds *= w;
            ds *= scale;
            let mut dq_h = dq.slice_mut(s![qr.clone(), cols.clone()]);
            dq_h += &ds.dot(&kh);
            let mut dk_h = dk.slice_mut(s![kr.clone(), cols]);
            dk_h += &ds.t().dot(&qh);
        }
    }
    let kv_in = cache.xkv.as_ref().unwrap_or(&cache.xq);
    let mut dxq = linear_backward(p, &a.q, &cache.xq, &dq, g);
    let mut dxkv = linear_backward(p, &a.k, kv_in, &dk, g);
    dxkv += &linear_backward(p, &a.v, kv_in, &dv, g);
    if cache.xkv.is_some() {
        (dxq, Some(dxkv))
    } else {
        dxq += &dxkv;
        (dxq, None)
    }
}
