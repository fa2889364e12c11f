//! Layer primitives with explicit backward passes. Row-major token matrices
//! (`tokens × features`) throughout.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{LayerNorm, Linear};
use super::Real;

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn linear<T: Real>(x: &ArrayView2<'_, T>, l: &Linear<T>) -> Array2<T> {
    let mut y = x.dot(&l.w);
    y += &l.b;
    y
}

/// Accumulates parameter gradients into `g` and returns the input gradient.
pub(crate) fn linear_backward<T: Real>(
    x: &ArrayView2<'_, T>,
    dy: &ArrayView2<'_, T>,
    l: &Linear<T>,
    g: &mut Linear<T>,
) -> Array2<T> {
    ndarray::linalg::general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut g.w);
    g.b += &dy.sum_axis(Axis(0));
    dy.dot(&l.w.t())
}

pub(crate) struct LnCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

pub(crate) fn layer_norm<T: Real>(x: &ArrayView2<'_, T>, ln: &LayerNorm<T>) -> (Array2<T>, LnCache<T>) {
    let d = T::of(x.ncols() as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *r = T::one() / (var + eps).sqrt();
        let k = *r;
        row.mapv_inplace(|v| v * k);
    }
    let mut y = &xhat * &ln.gamma;
    y += &ln.beta;
    (y, LnCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward<T: Real>(
    dy: &ArrayView2<'_, T>,
    cache: &LnCache<T>,
    ln: &LayerNorm<T>,
    g: &mut LayerNorm<T>,
) -> Array2<T> {
    g.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    g.beta += &dy.sum_axis(Axis(0));
    let d = T::of(dy.ncols() as f64);
    let mut dx = dy * &ln.gamma;
    for ((mut row, xh), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_g = row.sum() / d;
        let mean_gx = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|v, &xv| *v = r * (*v - mean_g - xv * mean_gx));
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Real>(x: &Array2<T>) -> Array2<T> {
    let (k, c, half) = (T::of(GELU_K), T::of(GELU_C), T::of(0.5));
    x.mapv(|v| half * v * (T::one() + (k * (v + c * v * v * v)).tanh()))
}

pub(crate) fn gelu_backward<T: Real>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let (k, c, half, three) = (T::of(GELU_K), T::of(GELU_C), T::of(0.5), T::of(3.0));
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|g, &v| {
        let t = (k * (v + c * v * v * v)).tanh();
        let d = half * (T::one() + t) + half * v * (T::one() - t * t) * k * (T::one() + three * c * v * v);
        *g = *g * d;
    });
    dx
}

pub(crate) fn softmax_rows<T: Real>(s: &mut Array2<T>) {
    for mut row in s.rows_mut() {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

pub(crate) struct AttnCache<T> {
    /// Attention probabilities per head, `tokens × tokens`.
    probs: Vec<Array2<T>>,
    qkv: Array2<T>,
    /// Concatenated head outputs before the output projection.
    heads: Array2<T>,
}

/// Multi-head self-attention on already-normalized input `u`. Returns the
/// pre-projection head outputs' projection.
pub(crate) fn attention<T: Real>(
    u: &ArrayView2<'_, T>,
    qkv_l: &Linear<T>,
    proj_l: &Linear<T>,
    num_heads: usize,
) -> (Array2<T>, AttnCache<T>) {
    let d = u.ncols();
    let dh = d / num_heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let qkv = linear(u, qkv_l);
    let mut heads = Array2::zeros((u.nrows(), d));
    let mut probs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let mut a = q.dot(&k.t());
        a.mapv_inplace(|x| x * scale);
        softmax_rows(&mut a);
        heads.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&a.dot(&v));
        probs.push(a);
    }
    let out = linear(&heads.view(), proj_l);
    (out, AttnCache { probs, qkv, heads })
}

/// Returns the gradient with respect to the attention input `u`.
pub(crate) fn attention_backward<T: Real>(
    u: &ArrayView2<'_, T>,
    dout: &ArrayView2<'_, T>,
    cache: &AttnCache<T>,
    qkv_l: &Linear<T>,
    proj_l: &Linear<T>,
    g_qkv: &mut Linear<T>,
    g_proj: &mut Linear<T>,
    num_heads: usize,
) -> Array2<T> {
    let d = u.ncols();
    let dh = d / num_heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let dheads = linear_backward(&cache.heads.view(), dout, proj_l, g_proj);
    let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
    for h in 0..num_heads {
        let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = cache.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = cache.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let a = &cache.probs[h];
        let dho = dheads.slice(s![.., h * dh..(h + 1) * dh]);
        // dV = A^T dO, dA = dO V^T
        dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh])
            .assign(&a.t().dot(&dho));
        let da = dho.dot(&v.t());
        // Softmax backward, row by row.
        let mut ds = &da * a;
        for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
            let dot = row.sum();
            Zip::from(&mut row).and(&arow).for_each(|x, &p| *x = *x - p * dot);
        }
        ds.mapv_inplace(|x| x * scale);
        dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.dot(&k));
        dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh])
            .assign(&ds.t().dot(&q));
    }
    linear_backward(u, &dqkv.view(), qkv_l, g_qkv)
}
