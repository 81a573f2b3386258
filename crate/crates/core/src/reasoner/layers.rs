//! Attention, feed-forward, and row-normalization primitives with
//! hand-written backward passes.
//!
//! Conventions: row vectors, `y = x·W`, active rows first and all
//! inactive rows exactly zero in both directions. Caches hold what the
//! backward pass needs and nothing else.

use crate::num::{real, Real};
use crate::tensor::{dot, rmsnorm, rmsnorm_backward, softmax_inplace, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights<R: Real> {
    pub wq: Matrix<R>,
    pub wk: Matrix<R>,
    pub wv: Matrix<R>,
    pub wo: Matrix<R>,
}

impl<R: Real> AttnWeights<R> {
    pub fn zeros(d: usize) -> Self {
        AttnWeights {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<R: Real> {
    pub w1: Matrix<R>,
    pub w2: Matrix<R>,
}

impl<R: Real> FeedForward<R> {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        FeedForward {
            w1: Matrix::zeros(d, hidden),
            w2: Matrix::zeros(hidden, d),
        }
    }
}

/// Per-row RMS normalization over the first `rows` rows.
pub struct RmsCache<R: Real> {
    pub normed: Matrix<R>,
    pub ri: Vec<R>,
}

pub fn rmsnorm_rows<R: Real>(x: &Matrix<R>, rows: usize) -> RmsCache<R> {
    let mut normed = Matrix::zeros(x.rows(), x.cols());
    let mut ri = Vec::with_capacity(rows);
    for i in 0..rows {
        let mut out = vec![R::zero(); x.cols()];
        ri.push(rmsnorm(x.row(i), &mut out));
        normed.row_mut(i).copy_from_slice(&out);
    }
    RmsCache { normed, ri }
}

pub fn rmsnorm_rows_backward<R: Real>(
    d_normed: &Matrix<R>,
    x: &Matrix<R>,
    cache: &RmsCache<R>,
    rows: usize,
    dx: &mut Matrix<R>,
) {
    for i in 0..rows {
        let mut row_grad = vec![R::zero(); x.cols()];
        rmsnorm_backward(d_normed.row(i), x.row(i), cache.ri[i], &mut row_grad);
        for (d, g) in dx.row_mut(i).iter_mut().zip(row_grad) {
            *d += g;
        }
    }
}

/// Self-attention over one matrix; `causal` limits keys to `j <= i`.
pub struct SelfAttnCache<R: Real> {
    pub q: Matrix<R>,
    pub k: Matrix<R>,
    pub v: Matrix<R>,
    pub probs: Matrix<R>,
    pub ctx: Matrix<R>,
}

pub fn self_attn_forward<R: Real>(
    xn: &Matrix<R>,
    w: &AttnWeights<R>,
    active: usize,
    causal: bool,
) -> (Matrix<R>, SelfAttnCache<R>) {
    let d = xn.cols();
    let scale = real::<R>(1.0 / (d as f64).sqrt());
    let q = xn.matmul(&w.wq);
    let k = xn.matmul(&w.wk);
    let v = xn.matmul(&w.wv);
    let mut probs = Matrix::zeros(xn.rows(), xn.rows());
    for i in 0..active {
        let kmax = if causal { i } else { active - 1 };
        let mut scores: Vec<R> = (0..=kmax)
            .map(|j| dot(q.row(i), k.row(j)) * scale)
            .collect();
        softmax_inplace(&mut scores);
        probs.row_mut(i)[..=kmax].copy_from_slice(&scores);
    }
    let ctx = probs.matmul(&v);
    let out = ctx.matmul(&w.wo);
    (out, SelfAttnCache { q, k, v, probs, ctx })
}

#[allow(clippy::too_many_arguments)]
pub fn self_attn_backward<R: Real>(
    d_out: &Matrix<R>,
    xn: &Matrix<R>,
    w: &AttnWeights<R>,
    cache: &SelfAttnCache<R>,
    active: usize,
    causal: bool,
    d_xn: &mut Matrix<R>,
    gw: &mut AttnWeights<R>,
) {
    let d = xn.cols();
    let scale = real::<R>(1.0 / (d as f64).sqrt());

    gw.wo.add_assign(&cache.ctx.matmul_at_b(d_out));
    let d_ctx = d_out.matmul_a_bt(&w.wo);

    let d_v = cache.probs.matmul_at_b(&d_ctx);
    let d_probs = d_ctx.matmul_a_bt(&cache.v);

    let mut d_scores = Matrix::zeros(xn.rows(), xn.rows());
    for i in 0..active {
        let kmax = if causal { i } else { active - 1 };
        let a = &cache.probs.row(i)[..=kmax];
        let da = &d_probs.row(i)[..=kmax];
        let inner: R = a.iter().zip(da).map(|(&p, &g)| p * g).sum();
        let ds_row = d_scores.row_mut(i);
        for j in 0..=kmax {
            ds_row[j] = a[j] * (da[j] - inner) * scale;
        }
    }
    let d_q = d_scores.matmul(&cache.k);
    let d_k = d_scores.matmul_at_b(&cache.q);

    gw.wq.add_assign(&xn.matmul_at_b(&d_q));
    gw.wk.add_assign(&xn.matmul_at_b(&d_k));
    gw.wv.add_assign(&xn.matmul_at_b(&d_v));
    d_xn.add_assign(&d_q.matmul_a_bt(&w.wq));
    d_xn.add_assign(&d_k.matmul_a_bt(&w.wk));
    d_xn.add_assign(&d_v.matmul_a_bt(&w.wv));
}

/// Attention from decoder rows onto the first `n_ctx` rows of an
/// encoder-side matrix.
pub struct CrossAttnCache<R: Real> {
    pub q: Matrix<R>,
    pub k: Matrix<R>,
    pub v: Matrix<R>,
    pub probs: Matrix<R>,
    pub ctx: Matrix<R>,
}

pub fn cross_attn_forward<R: Real>(
    xn: &Matrix<R>,
    src: &Matrix<R>,
    w: &AttnWeights<R>,
    rows: usize,
    n_ctx: usize,
) -> (Matrix<R>, CrossAttnCache<R>) {
    let d = xn.cols();
    let scale = real::<R>(1.0 / (d as f64).sqrt());
    let q = xn.matmul(&w.wq);
    let k = src.matmul(&w.wk);
    let v = src.matmul(&w.wv);
    let mut probs = Matrix::zeros(xn.rows(), src.rows());
    for i in 0..rows {
        let mut scores: Vec<R> = (0..n_ctx)
            .map(|j| dot(q.row(i), k.row(j)) * scale)
            .collect();
        softmax_inplace(&mut scores);
        probs.row_mut(i)[..n_ctx].copy_from_slice(&scores);
    }
    let ctx = probs.matmul(&v);
    let out = ctx.matmul(&w.wo);
    (out, CrossAttnCache { q, k, v, probs, ctx })
}

#[allow(clippy::too_many_arguments)]
pub fn cross_attn_backward<R: Real>(
    d_out: &Matrix<R>,
    xn: &Matrix<R>,
    src: &Matrix<R>,
    w: &AttnWeights<R>,
    cache: &CrossAttnCache<R>,
    rows: usize,
    n_ctx: usize,
    d_xn: &mut Matrix<R>,
    d_src: &mut Matrix<R>,
    gw: &mut AttnWeights<R>,
) {
    let d = xn.cols();
    let scale = real::<R>(1.0 / (d as f64).sqrt());

    gw.wo.add_assign(&cache.ctx.matmul_at_b(d_out));
    let d_ctx = d_out.matmul_a_bt(&w.wo);

    let d_v = cache.probs.matmul_at_b(&d_ctx);
    let d_probs = d_ctx.matmul_a_bt(&cache.v);

    let mut d_scores = Matrix::zeros(xn.rows(), src.rows());
    for i in 0..rows {
        let a = &cache.probs.row(i)[..n_ctx];
        let da = &d_probs.row(i)[..n_ctx];
        let inner: R = a.iter().zip(da).map(|(&p, &g)| p * g).sum();
        let ds_row = d_scores.row_mut(i);
        for j in 0..n_ctx {
            ds_row[j] = a[j] * (da[j] - inner) * scale;
        }
    }
    let d_q = d_scores.matmul(&cache.k);
    let d_k = d_scores.matmul_at_b(&cache.q);

    gw.wq.add_assign(&xn.matmul_at_b(&d_q));
    gw.wk.add_assign(&src.matmul_at_b(&d_k));
    gw.wv.add_assign(&src.matmul_at_b(&d_v));
    d_xn.add_assign(&d_q.matmul_a_bt(&w.wq));
    d_src.add_assign(&d_k.matmul_a_bt(&w.wk));
    d_src.add_assign(&d_v.matmul_a_bt(&w.wv));
}

/// Two-layer feed-forward with tanh. The GCN keeps the paper-side
/// ReLU; tanh here keeps transformer sublayers smooth end to end.
pub struct FfnCache<R: Real> {
    pub hidden: Matrix<R>,
}

pub fn ffn_forward<R: Real>(
    xn: &Matrix<R>,
    w: &FeedForward<R>,
    _rows: usize,
) -> (Matrix<R>, FfnCache<R>) {
    let hidden = xn.matmul(&w.w1).map(|v| v.tanh());
    let out = hidden.matmul(&w.w2);
    (out, FfnCache { hidden })
}

pub fn ffn_backward<R: Real>(
    d_out: &Matrix<R>,
    xn: &Matrix<R>,
    w: &FeedForward<R>,
    cache: &FfnCache<R>,
    d_xn: &mut Matrix<R>,
    gw: &mut FeedForward<R>,
) {
    gw.w2.add_assign(&cache.hidden.matmul_at_b(d_out));
    let d_hidden = d_out.matmul_a_bt(&w.w2);
    let one = R::one();
    let mut d_pre = d_hidden;
    for (dp, &h) in d_pre.data_mut().iter_mut().zip(cache.hidden.data()) {
        *dp = *dp * (one - h * h);
    }
    gw.w1.add_assign(&xn.matmul_at_b(&d_pre));
    d_xn.add_assign(&d_pre.matmul_a_bt(&w.w1));
}
