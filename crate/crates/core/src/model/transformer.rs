//! Per-sequence forward pass with activation cache, and its reverse pass.

use super::idx::{self, *};
use super::{Gradients, ModelWeights, COND_LEN, FFN_MULT};
use crate::tensor::{
    accumulate_col_sums, accumulate_weight_grad, add_assign, gemm, linear, linear_input_grad, View,
};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    out: Vec<f64>,
}

fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> LnCache {
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    LnCache { xhat, rstd, out }
}

fn layer_norm_backward(
    dout: &[f64],
    c: &LnCache,
    d: usize,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; dout.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..c.rstd.len() {
        let (dor, xh) = (&dout[r * d..(r + 1) * d], &c.xhat[r * d..(r + 1) * d]);
        for j in 0..d {
            dxhat[j] = dor[j] * gain[j];
            dgain[j] += dor[j] * xh[j];
            dbias[j] += dor[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[r * d + j] = c.rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

fn add_bias(y: &mut [f64], b: &[f64]) {
    for row in y.chunks_exact_mut(b.len()) {
        add_assign(row, b);
    }
}

/// Multi-head attention probabilities (`heads x lq x lk`) and outputs (`lq x d`).
fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * lq * lk];
    let mut out = vec![0.0; lq * d];
    for h in 0..heads {
        let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
        gemm(
            View::cols_of(q, lq, d, h * dh, dh),
            View::cols_of(k, lk, d, h * dh, dh).transpose(),
            0.0,
            p,
            lk,
        );
        for i in 0..lq {
            let row = &mut p[i * lk..(i + 1) * lk];
            let visible = if causal { i + 1 } else { lk };
            let max = row[..visible]
                .iter()
                .fold(f64::NEG_INFINITY, |m, &s| m.max(s * scale));
            let mut sum = 0.0;
            for s in row[..visible].iter_mut() {
                *s = (*s * scale - max).exp();
                sum += *s;
            }
            for s in row[..visible].iter_mut() {
                *s /= sum;
            }
            row[visible..].iter_mut().for_each(|s| *s = 0.0);
        }
        gemm(
            View::new(p, lq, lk),
            View::cols_of(v, lk, d, h * dh, dh),
            0.0,
            &mut out[h * dh..],
            d,
        );
    }
    (probs, out)
}

/// Returns `(dq, dk, dv)` for attention output gradient `dout`.
#[allow(clippy::too_many_arguments)]
fn attention_backward(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; lq * d];
    let mut dk = vec![0.0; lk * d];
    let mut dv = vec![0.0; lk * d];
    let mut ds = vec![0.0; lq * lk];
    for h in 0..heads {
        let p = &probs[h * lq * lk..(h + 1) * lq * lk];
        let dout_h = View::cols_of(dout, lq, d, h * dh, dh);
        gemm(View::t(p, lq, lk), dout_h, 0.0, &mut dv[h * dh..], d);
        gemm(dout_h, View::cols_of(v, lk, d, h * dh, dh).transpose(), 0.0, &mut ds, lk);
        for i in 0..lq {
            let (pr, dr) = (&p[i * lk..(i + 1) * lk], &mut ds[i * lk..(i + 1) * lk]);
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (g, &pv) in dr.iter_mut().zip(pr) {
                *g = pv * (*g - dot) * scale;
            }
        }
        gemm(
            View::new(&ds, lq, lk),
            View::cols_of(k, lk, d, h * dh, dh),
            0.0,
            &mut dq[h * dh..],
            d,
        );
        gemm(
            View::t(&ds, lq, lk),
            View::cols_of(q, lq, d, h * dh, dh),
            0.0,
            &mut dk[h * dh..],
            d,
        );
    }
    (dq, dk, dv)
}

struct CondCache {
    ids: [usize; COND_LEN],
    h0: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    c: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    xq: Vec<f64>,
    xk: Vec<f64>,
    xv: Vec<f64>,
    xatt: Vec<f64>,
    xo: Vec<f64>,
    ln3: LnCache,
    pre: Vec<f64>,
    act: Vec<f64>,
}

/// Activations of one sequence needed by the reverse pass.
pub(crate) struct ForwardCache {
    tokens: Vec<u32>,
    cond: CondCache,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
}

/// Logits (`len x vocab`) for one sequence plus the activation cache.
/// Tokens and condition ids must already be validated.
pub(crate) fn forward_seq(w: &ModelWeights, tokens: &[u32], ids: [usize; COND_LEN]) -> (Vec<f64>, ForwardCache) {
    let spec = w.spec();
    let (d, heads, nl, vsz) = (spec.d_model, spec.n_heads, spec.n_layers, spec.vocab_size);
    let ff = FFN_MULT * d;
    let n = tokens.len();

    let mut h0 = vec![0.0; COND_LEN * d];
    for (j, &id) in ids.iter().enumerate() {
        let row = &mut h0[j * d..(j + 1) * d];
        row.copy_from_slice(&w.p(COND_TABLE)[id * d..(id + 1) * d]);
        add_assign(row, &w.p(COND_POS)[j * d..(j + 1) * d]);
    }
    let mut pre = linear(&h0, COND_LEN, d, w.p(COND_W_IN), ff);
    add_bias(&mut pre, w.p(COND_B_IN));
    let act: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
    let mut c = linear(&act, COND_LEN, ff, w.p(COND_W_OUT), d);
    add_bias(&mut c, w.p(COND_B_OUT));
    add_assign(&mut c, &h0);
    let cond = CondCache { ids, h0, pre, act, c };

    let mut x = vec![0.0; n * d];
    for (i, &t) in tokens.iter().enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        let t = t as usize;
        row.copy_from_slice(&w.p(TOK)[t * d..(t + 1) * d]);
        add_assign(row, &w.p(POS)[i * d..(i + 1) * d]);
    }

    let mut layers = Vec::with_capacity(nl);
    for l in 0..nl {
        let p = |which| w.p(idx::layer(l, which));

        let ln1 = layer_norm(&x, d, p(LN1_G), p(LN1_B));
        let q = linear(&ln1.out, n, d, p(WQ), d);
        let k = linear(&ln1.out, n, d, p(WK), d);
        let v = linear(&ln1.out, n, d, p(WV), d);
        let (att, o) = attention(&q, &k, &v, n, n, d, heads, true);
        add_assign(&mut x, &linear(&o, n, d, p(WO), d));

        let ln2 = layer_norm(&x, d, p(LN2_G), p(LN2_B));
        let xq = linear(&ln2.out, n, d, p(XWQ), d);
        let xk = linear(&cond.c, COND_LEN, d, p(XWK), d);
        let xv = linear(&cond.c, COND_LEN, d, p(XWV), d);
        let (xatt, xo) = attention(&xq, &xk, &xv, n, COND_LEN, d, heads, false);
        add_assign(&mut x, &linear(&xo, n, d, p(XWO), d));

        let ln3 = layer_norm(&x, d, p(LN3_G), p(LN3_B));
        let mut pre = linear(&ln3.out, n, d, p(MLP_W_IN), ff);
        add_bias(&mut pre, p(MLP_B_IN));
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let mut y = linear(&act, n, ff, p(MLP_W_OUT), d);
        add_bias(&mut y, p(MLP_B_OUT));
        add_assign(&mut x, &y);

        layers.push(LayerCache { ln1, q, k, v, att, o, ln2, xq, xk, xv, xatt, xo, ln3, pre, act });
    }

    let g = idx::norm_gain(nl);
    let final_ln = layer_norm(&x, d, w.p(g), w.p(g + 1));
    let hw = idx::head_weight(nl);
    let mut logits = linear(&final_ln.out, n, d, w.p(hw), vsz);
    add_bias(&mut logits, w.p(hw + 1));

    let cache = ForwardCache { tokens: tokens.to_vec(), cond, layers, final_ln };
    (logits, cache)
}

/// Accumulates into `grads` the parameter gradient of `<dlogits, logits>`.
pub(crate) fn backward_seq(w: &ModelWeights, cache: &ForwardCache, dlogits: &[f64], grads: &mut Gradients) {
    let spec = w.spec();
    let (d, heads, nl, vsz) = (spec.d_model, spec.n_heads, spec.n_layers, spec.vocab_size);
    let ff = FFN_MULT * d;
    let n = cache.tokens.len();
    let g = &mut grads.tensors;

    let hw = idx::head_weight(nl);
    accumulate_weight_grad(&mut g[hw], dlogits, &cache.final_ln.out, n, vsz, d);
    accumulate_col_sums(&mut g[hw + 1], dlogits, vsz);
    let dnorm = linear_input_grad(dlogits, n, vsz, w.p(hw), d);
    let ng = idx::norm_gain(nl);
    let (gl, gr) = g.split_at_mut(ng + 1);
    let mut dx = layer_norm_backward(&dnorm, &cache.final_ln, d, w.p(ng), &mut gl[ng], &mut gr[0]);

    let mut dc = vec![0.0; COND_LEN * d];
    for l in (0..nl).rev() {
        let lc = &cache.layers[l];
        let i = |which| idx::layer(l, which);
        let p = |which| w.p(idx::layer(l, which));

        // MLP block.
        accumulate_col_sums(&mut g[i(MLP_B_OUT)], &dx, d);
        accumulate_weight_grad(&mut g[i(MLP_W_OUT)], &dx, &lc.act, n, d, ff);
        let mut dpre = linear_input_grad(&dx, n, d, p(MLP_W_OUT), ff);
        dpre.iter_mut().zip(&lc.pre).for_each(|(g, &x)| *g *= gelu_grad(x));
        accumulate_col_sums(&mut g[i(MLP_B_IN)], &dpre, ff);
        accumulate_weight_grad(&mut g[i(MLP_W_IN)], &dpre, &lc.ln3.out, n, ff, d);
        let dln = linear_input_grad(&dpre, n, ff, p(MLP_W_IN), d);
        let (ga, gb) = g.split_at_mut(i(LN3_B));
        add_assign(
            &mut dx,
            &layer_norm_backward(&dln, &lc.ln3, d, p(LN3_G), &mut ga[i(LN3_G)], &mut gb[0]),
        );

        // Cross-attention block.
        accumulate_weight_grad(&mut g[i(XWO)], &dx, &lc.xo, n, d, d);
        let dxo = linear_input_grad(&dx, n, d, p(XWO), d);
        let (dq, dk, dv) =
            attention_backward(&dxo, &lc.xq, &lc.xk, &lc.xv, &lc.xatt, n, COND_LEN, d, heads);
        accumulate_weight_grad(&mut g[i(XWQ)], &dq, &lc.ln2.out, n, d, d);
        accumulate_weight_grad(&mut g[i(XWK)], &dk, &cache.cond.c, COND_LEN, d, d);
        accumulate_weight_grad(&mut g[i(XWV)], &dv, &cache.cond.c, COND_LEN, d, d);
        add_assign(&mut dc, &linear_input_grad(&dk, COND_LEN, d, p(XWK), d));
        add_assign(&mut dc, &linear_input_grad(&dv, COND_LEN, d, p(XWV), d));
        let dln = linear_input_grad(&dq, n, d, p(XWQ), d);
        let (ga, gb) = g.split_at_mut(i(LN2_B));
        add_assign(
            &mut dx,
            &layer_norm_backward(&dln, &lc.ln2, d, p(LN2_G), &mut ga[i(LN2_G)], &mut gb[0]),
        );

        // Causal self-attention block.
        accumulate_weight_grad(&mut g[i(WO)], &dx, &lc.o, n, d, d);
        let do_ = linear_input_grad(&dx, n, d, p(WO), d);
        let (dq, dk, dv) = attention_backward(&do_, &lc.q, &lc.k, &lc.v, &lc.att, n, n, d, heads);
        accumulate_weight_grad(&mut g[i(WQ)], &dq, &lc.ln1.out, n, d, d);
        accumulate_weight_grad(&mut g[i(WK)], &dk, &lc.ln1.out, n, d, d);
        accumulate_weight_grad(&mut g[i(WV)], &dv, &lc.ln1.out, n, d, d);
        let mut dln = linear_input_grad(&dq, n, d, p(WQ), d);
        add_assign(&mut dln, &linear_input_grad(&dk, n, d, p(WK), d));
        add_assign(&mut dln, &linear_input_grad(&dv, n, d, p(WV), d));
        let (ga, gb) = g.split_at_mut(i(LN1_B));
        add_assign(
            &mut dx,
            &layer_norm_backward(&dln, &lc.ln1, d, p(LN1_G), &mut ga[i(LN1_G)], &mut gb[0]),
        );
    }

    for (pos, &t) in cache.tokens.iter().enumerate() {
        let t = t as usize;
        let row = &dx[pos * d..(pos + 1) * d];
        add_assign(&mut g[TOK][t * d..(t + 1) * d], row);
        add_assign(&mut g[POS][pos * d..(pos + 1) * d], row);
    }

    // Condition encoder: c = h0 + W_out gelu(W_in h0 + b_in) + b_out.
    let cc = &cache.cond;
    accumulate_col_sums(&mut g[COND_B_OUT], &dc, d);
    accumulate_weight_grad(&mut g[COND_W_OUT], &dc, &cc.act, COND_LEN, d, ff);
    let mut dpre = linear_input_grad(&dc, COND_LEN, d, w.p(COND_W_OUT), ff);
    dpre.iter_mut().zip(&cc.pre).for_each(|(g, &x)| *g *= gelu_grad(x));
    accumulate_col_sums(&mut g[COND_B_IN], &dpre, ff);
    accumulate_weight_grad(&mut g[COND_W_IN], &dpre, &cc.h0, COND_LEN, ff, d);
    let mut dh0 = linear_input_grad(&dpre, COND_LEN, ff, w.p(COND_W_IN), d);
    add_assign(&mut dh0, &dc);
    for (j, &id) in cc.ids.iter().enumerate() {
        let row = &dh0[j * d..(j + 1) * d];
        add_assign(&mut g[COND_TABLE][id * d..(id + 1) * d], row);
        add_assign(&mut g[COND_POS][j * d..(j + 1) * d], row);
    }
}
