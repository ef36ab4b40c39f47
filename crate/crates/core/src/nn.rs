//! Dense building blocks with explicit backward passes.
//!
//! Activations are row-major `(rows, features)`. Every backward function
//! accumulates parameter gradients into the provided views and returns the
//! input gradient.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn linear(x: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

pub(crate) fn linear_backward(
    x: ArrayView2<'_, f64>,
    w: ArrayView2<'_, f64>,
    dy: ArrayView2<'_, f64>,
    mut dw: ArrayViewMut2<'_, f64>,
    mut db: ArrayViewMut1<'_, f64>,
) -> Array2<f64> {
    general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut dw);
    db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

/// Same as [`linear_backward`] without the input gradient.
pub(crate) fn linear_backward_params(
    x: ArrayView2<'_, f64>,
    dy: ArrayView2<'_, f64>,
    mut dw: ArrayViewMut2<'_, f64>,
    mut db: ArrayViewMut1<'_, f64>,
) {
    general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut dw);
    db += &dy.sum_axis(Axis(0));
}

pub(crate) struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(
    x: ArrayView2<'_, f64>,
    gain: ArrayView1<'_, f64>,
    bias: ArrayView1<'_, f64>,
) -> (Array2<f64>, LayerNormCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row -= mean;
        let var = row.dot(&row) / n;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row *= *inv;
    }
    let mut y = &xhat * &gain;
    y += &bias;
    (y, LayerNormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: ArrayView1<'_, f64>,
    dy: ArrayView2<'_, f64>,
    mut dgain: ArrayViewMut1<'_, f64>,
    mut dbias: ArrayViewMut1<'_, f64>,
) -> Array2<f64> {
    dgain += &(&dy * &cache.xhat).sum_axis(Axis(0));
    dbias += &dy.sum_axis(Axis(0));
    let n = dy.ncols() as f64;
    let mut dx = &dy * &gain;
    for ((mut row, xhat), inv) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / n;
        let mean_dx = row.dot(&xhat) / n;
        Zip::from(&mut row).and(&xhat).for_each(|d, &xh| {
            *d = inv * (*d - mean_d - xh * mean_dx);
        });
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// `tanh` of the inner GELU argument; cache it to skip a second evaluation
/// in the backward pass.
pub(crate) fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// Tanh approximation of GELU.
#[cfg(test)]
pub(crate) fn gelu(x: f64) -> f64 {
    gelu_from(x, gelu_tanh(x))
}

pub(crate) fn gelu_from(x: f64, th: f64) -> f64 {
    0.5 * x * (1.0 + th)
}

#[cfg(test)]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    gelu_grad_from(x, gelu_tanh(x))
}

pub(crate) fn gelu_grad_from(x: f64, th: f64) -> f64 {
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-x).exp());
    sig * (1.0 + x * (1.0 - sig))
}

/// Multi-head scaled dot-product attention of `q` rows over `k`/`v` rows.
///
/// Heads split the feature axis evenly. Returns the concatenated head
/// outputs and the per-head attention probabilities. Sequences here are
/// short, so the products are plain loops rather than matrix kernels.
pub(crate) fn attend(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (nq, nk, dim) = (q.nrows(), k.nrows(), q.ncols());
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (q, k, v) = (q.as_standard_layout(), k.as_standard_layout(), v.as_standard_layout());
    let (qs, ks, vs) = (flat(&q), flat(&k), flat(&v));
    let mut out = Array2::zeros((nq, dim));
    let os = out.as_slice_mut().expect("fresh array is contiguous");
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let c0 = h * hd;
        let mut p = Array2::zeros((nq, nk));
        let ps = p.as_slice_mut().expect("fresh array is contiguous");
        for i in 0..nq {
            let qi = &qs[i * dim + c0..i * dim + c0 + hd];
            let row = &mut ps[i * nk..(i + 1) * nk];
            let mut max = f64::NEG_INFINITY;
            for (j, r) in row.iter_mut().enumerate() {
                *r = scale * dot(qi, &ks[j * dim + c0..j * dim + c0 + hd]);
                max = max.max(*r);
            }
            let mut z = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                z += *r;
            }
            let oi = &mut os[i * dim + c0..i * dim + c0 + hd];
            for (j, r) in row.iter_mut().enumerate() {
                *r /= z;
                axpy(*r, &vs[j * dim + c0..j * dim + c0 + hd], oi);
            }
        }
        probs.push(p);
    }
    (out, probs)
}

pub(crate) fn attend_backward(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    probs: &[Array2<f64>],
    d_out: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let heads = probs.len();
    let (nq, nk, dim) = (q.nrows(), k.nrows(), q.ncols());
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (q, k, v, d_out) = (
        q.as_standard_layout(),
        k.as_standard_layout(),
        v.as_standard_layout(),
        d_out.as_standard_layout(),
    );
    let (qs, ks, vs, dos) = (flat(&q), flat(&k), flat(&v), flat(&d_out));
    let mut dq = Array2::zeros((nq, dim));
    let mut dk = Array2::zeros((nk, dim));
    let mut dv = Array2::zeros((nk, dim));
    let dqs = dq.as_slice_mut().expect("fresh array is contiguous");
    let dks = dk.as_slice_mut().expect("fresh array is contiguous");
    let dvs = dv.as_slice_mut().expect("fresh array is contiguous");
    let mut ds = vec![0.0; nk];
    for (h, p) in probs.iter().enumerate() {
        let c0 = h * hd;
        let cols = |r: usize| r * dim + c0..r * dim + c0 + hd;
        let ps = p.as_slice().expect("probabilities are contiguous");
        for i in 0..nq {
            let prow = &ps[i * nk..(i + 1) * nk];
            let doi = &dos[cols(i)];
            let mut inner = 0.0;
            for (j, d) in ds.iter_mut().enumerate() {
                axpy(prow[j], doi, &mut dvs[cols(j)]);
                *d = dot(doi, &vs[cols(j)]);
                inner += prow[j] * *d;
            }
            for (j, d) in ds.iter_mut().enumerate() {
                *d = scale * prow[j] * (*d - inner);
                axpy(*d, &ks[cols(j)], &mut dqs[cols(i)]);
                axpy(*d, &qs[cols(i)], &mut dks[cols(j)]);
            }
        }
    }
    (dq, dk, dv)
}

fn flat<'a>(x: &'a ndarray::CowArray<'_, f64, ndarray::Ix2>) -> &'a [f64] {
    x.as_slice().expect("standard layout is contiguous")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
