//! Dense building blocks with hand-derived backward passes.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Ffn, Linear, Norm, Parameters};

const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn linear(p: &Parameters, l: &Linear, x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.dot(p.get(l.w));
    y += &p.get(l.b).row(0);
    y
}

/// Accumulates weight gradients into `g` and returns the input gradient.
pub(crate) fn linear_backward(p: &Parameters, l: &Linear, x: &Array2<f64>, dy: &Array2<f64>, g: &mut Parameters) -> Array2<f64> {
    *g.get_mut(l.w) += &x.t().dot(dy);
    g.get_mut(l.b).row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    dy.dot(&p.get(l.w).t())
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(p: &Parameters, n: &Norm, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + NORM_EPS).sqrt();
        row.mapv_inplace(|v| v * *s);
    }
    let mut y = &xhat * &p.get(n.gain).row(0);
    y += &p.get(n.bias).row(0);
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(p: &Parameters, n: &Norm, cache: &NormCache, dy: &Array2<f64>, g: &mut Parameters) -> Array2<f64> {
    g.get_mut(n.gain)
        .row_mut(0)
        .scaled_add(1.0, &(dy * &cache.xhat).sum_axis(Axis(0)));
    g.get_mut(n.bias).row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    let d = dy.ncols() as f64;
    let mut dx = dy * &p.get(n.gain).row(0);
    for ((mut row, xhat), &s) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
        let mean_dxhat = row.sum() / d;
        let mean_dxhat_xhat = row.dot(&xhat) / d;
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|v, &xh| *v = s * (*v - mean_dxhat - xh * mean_dxhat_xhat));
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) struct FfnCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

pub(crate) fn feed_forward(p: &Parameters, f: &Ffn, x: Array2<f64>) -> (Array2<f64>, FfnCache) {
    let pre = linear(p, &f.up, &x);
    let act = pre.mapv(gelu);
    let y = linear(p, &f.down, &act);
    (y, FfnCache { x, pre, act })
}

pub(crate) fn feed_forward_backward(p: &Parameters, f: &Ffn, cache: &FfnCache, dy: &Array2<f64>, g: &mut Parameters) -> Array2<f64> {
    let mut dact = linear_backward(p, &f.down, &cache.act, dy, g);
    Zip::from(&mut dact).and(&cache.pre).for_each(|d, &x| *d *= gelu_grad(x));
    linear_backward(p, &f.up, &cache.x, &dact, g)
}

/// Inverted dropout; returns the scaling mask when applied.
pub(crate) fn dropout(x: &mut Array2<f64>, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Array2<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = Array2::from_shape_simple_fn(x.raw_dim(), || if rng.gen::<f64>() < rate { 0.0 } else { keep });
    *x *= &mask;
    Some(mask)
}

pub(crate) fn dropout_backward(dy: &Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => dy * m,
        None => dy.clone(),
    }
}

/// Sinusoidal position encoding for one (possibly negative) position.
pub(crate) fn add_position(row: &mut ndarray::ArrayViewMut1<f64>, pos: i64) {
    let d = row.len();
    for i in (0..d).step_by(2) {
        let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
        row[i] += angle.sin();
        if i + 1 < d {
            row[i + 1] += angle.cos();
        }
    }
}
