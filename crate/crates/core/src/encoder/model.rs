//! Forward pass with activation caching, and the matching backward pass.
//!
//! Only the active rows (`[CLS]` plus real tokens) are processed; PAD rows
//! never enter attention. The last layer computes queries, residuals and the
//! feed-forward block for the `[CLS]` row alone, since nothing downstream
//! reads the other rows.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{EncoderConfig, EncoderOutput, EncoderParams, HeadPooling};
use crate::data::TokenizedExample;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub off: usize,
    pub len: usize,
}

impl Slot {
    pub fn of<'a>(&self, v: &'a [f64]) -> &'a [f64] {
        &v[self.off..self.off + self.len]
    }

    pub fn of_mut<'a>(&self, v: &'a mut [f64]) -> &'a mut [f64] {
        &mut v[self.off..self.off + self.len]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub wq: Slot,
    pub bq: Slot,
    pub wk: Slot,
    pub bk: Slot,
    pub wv: Slot,
    pub bv: Slot,
    pub wo: Slot,
    pub bo: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

/// Offsets of every tensor inside [`EncoderParams::values`]. Matrices are
/// row-major `in x out`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub(crate) tok_emb: Slot,
    pub(crate) pos_emb: Slot,
    pub(crate) layers: Vec<LayerSlots>,
    pub(crate) lnf_g: Slot,
    pub(crate) lnf_b: Slot,
    pub(crate) head_w: Slot,
    pub(crate) head_b: Slot,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &EncoderConfig) -> Self {
        let mut off = 0;
        let mut take = |len: usize| {
            let s = Slot { off, len };
            off += len;
            s
        };
        let (d, f) = (c.model_dim, c.ffn_dim);
        let tok_emb = take(c.vocab_size * d);
        let pos_emb = take(c.max_seq_len * d);
        let layers = (0..c.num_layers)
            .map(|_| LayerSlots {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * f),
                b1: take(f),
                w2: take(f * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let head_w = take(d * c.num_classes);
        let head_b = take(c.num_classes);
        Layout { tok_emb, pos_emb, layers, lnf_g, lnf_b, head_w, head_b, total: off }
    }

    /// Parameter index ranges that receive decoupled weight decay (matrices
    /// other than LayerNorm gains and biases).
    pub fn decayed(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = vec![self.tok_emb, self.pos_emb, self.head_w];
        for l in &self.layers {
            out.extend([l.wq, l.wk, l.wv, l.wo, l.w1, l.w2]);
        }
        out.into_iter().map(|s| s.off..s.off + s.len).collect()
    }
}

// y[m x n] = x[m x k] W[k x n] + b
pub(crate) fn linear(x: &[f64], w: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(m * n);
    for i in 0..m {
        y.extend_from_slice(b);
        let row = &mut y[i * n..(i + 1) * n];
        for (p, &xv) in x[i * k..(i + 1) * k].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (r, &wv) in row.iter_mut().zip(&w[p * n..(p + 1) * n]) {
                *r += xv * wv;
            }
        }
    }
    y
}

// Given dy = dL/dy for y = xW + b: accumulates dW, db and returns dx.
fn linear_backward(x: &[f64], dy: &[f64], w: &[f64], m: usize, k: usize, n: usize, dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; m * k];
    for i in 0..m {
        let dyr = &dy[i * n..(i + 1) * n];
        for (acc, &g) in db.iter_mut().zip(dyr) {
            *acc += g;
        }
        let xr = &x[i * k..(i + 1) * k];
        let dxr = &mut dx[i * k..(i + 1) * k];
        for p in 0..k {
            let wr = &w[p * n..(p + 1) * n];
            let dwr = &mut dw[p * n..(p + 1) * n];
            let xv = xr[p];
            let mut s = 0.0;
            for j in 0..n {
                s += dyr[j] * wr[j];
                dwr[j] += xv * dyr[j];
            }
            dxr[p] = s;
        }
    }
    dx
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], rows: usize, d: usize) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for i in 0..rows {
        let xr = &x[i * d..(i + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (xr[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = g[j] * h + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &[f64], c: &LnCache, g: &[f64], rows: usize, d: usize, dg: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    let mut dxhat = vec![0.0; d];
    for i in 0..rows {
        let xh = &c.xhat[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let (mut m1, mut m2) = (0.0, 0.0);
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xh[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            dx[i * d + j] = c.rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn dropout_mask(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect()
}

#[derive(Debug, Clone)]
struct LayerCache {
    n: usize,
    rows: usize,
    ln1: LnCache,
    h: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    // heads x rows x n
    attn: Vec<f64>,
    ctx: Vec<f64>,
    drop_attn: Option<Vec<f64>>,
    ln2: LnCache,
    h2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    drop_ffn: Option<Vec<f64>>,
}

/// Everything the backward pass needs for one example.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n: usize,
    emb_mask: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    pub feature: Vec<f64>,
    pub logits: Vec<f64>,
}

fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

/// Runs the network on one example. `emb_delta` (`n x d`, n = active rows)
/// is added to the embedding sum; `dropout` enables training-mode dropout.
pub fn forward_cached(
    p: &EncoderParams,
    layout: &Layout,
    ex: &TokenizedExample,
    emb_delta: Option<&[f64]>,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> ForwardCache {
    let c = &p.config;
    let (d, f, nh) = (c.model_dim, c.ffn_dim, c.num_heads);
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();
    let rate = c.dropout;
    let w = &p.values;
    let n = ex.active_len();

    let tok = layout.tok_emb.of(w);
    let pos = layout.pos_emb.of(w);
    let mut x = vec![0.0; n * d];
    for i in 0..n {
        let t = ex.ids[i] as usize;
        for j in 0..d {
            x[i * d + j] = tok[t * d + j] + pos[i * d + j];
        }
    }
    if let Some(delta) = emb_delta {
        for (xv, dv) in x.iter_mut().zip(delta) {
            *xv += dv;
        }
    }
    let mut mask_for = |len: usize| match dropout.as_deref_mut() {
        Some(rng) if rate > 0.0 => Some(dropout_mask(len, rate, rng)),
        _ => None,
    };
    let emb_mask = mask_for(n * d);
    apply_mask(&mut x, &emb_mask);

    let num_layers = layout.layers.len();
    let mut caches = Vec::with_capacity(num_layers);
    for (li, l) in layout.layers.iter().enumerate() {
        let rows = if li + 1 == num_layers { 1 } else { n };
        let (h, ln1) = layer_norm(&x, l.ln1_g.of(w), l.ln1_b.of(w), n, d);
        let q = linear(&h[..rows * d], l.wq.of(w), l.bq.of(w), rows, d, d);
        let k = linear(&h, l.wk.of(w), l.bk.of(w), n, d, d);
        let v = linear(&h, l.wv.of(w), l.bv.of(w), n, d, d);
        let mut attn = vec![0.0; nh * rows * n];
        let mut ctx = vec![0.0; rows * d];
        for hd in 0..nh {
            let o = hd * dh;
            for i in 0..rows {
                let a = &mut attn[(hd * rows + i) * n..(hd * rows + i + 1) * n];
                let qi = &q[i * d + o..i * d + o + dh];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    let kj = &k[j * d + o..j * d + o + dh];
                    let s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    a[j] = s;
                    mx = mx.max(s);
                }
                let mut z = 0.0;
                for s in a.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                for s in a.iter_mut() {
                    *s /= z;
                }
                let ci = &mut ctx[i * d + o..i * d + o + dh];
                for j in 0..n {
                    let vj = &v[j * d + o..j * d + o + dh];
                    for (cv, vv) in ci.iter_mut().zip(vj) {
                        *cv += a[j] * vv;
                    }
                }
            }
        }
        let mut att_out = linear(&ctx, l.wo.of(w), l.bo.of(w), rows, d, d);
        let drop_attn = mask_for(rows * d);
        apply_mask(&mut att_out, &drop_attn);
        let mut x_mid: Vec<f64> = x[..rows * d].to_vec();
        for (a, b) in x_mid.iter_mut().zip(&att_out) {
            *a += b;
        }

        let (h2, ln2) = layer_norm(&x_mid, l.ln2_g.of(w), l.ln2_b.of(w), rows, d);
        let u = linear(&h2, l.w1.of(w), l.b1.of(w), rows, d, f);
        let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
        let mut m = linear(&g, l.w2.of(w), l.b2.of(w), rows, f, d);
        let drop_ffn = mask_for(rows * d);
        apply_mask(&mut m, &drop_ffn);
        for (a, b) in x_mid.iter_mut().zip(&m) {
            *a += b;
        }
        caches.push(LayerCache { n, rows, ln1, h, q, k, v, attn, ctx, drop_attn, ln2, h2, u, g, drop_ffn });
        x = x_mid;
    }

    let (feature, lnf) = layer_norm(&x[..d], layout.lnf_g.of(w), layout.lnf_b.of(w), 1, d);
    let logits = linear(&feature, layout.head_w.of(w), layout.head_b.of(w), 1, d, c.num_classes);
    ForwardCache { n, emb_mask, layers: caches, lnf, feature, logits }
}

impl ForwardCache {
    /// `[CLS]` attention over maskable positions from the last layer.
    pub fn cls_attention(&self, config: &EncoderConfig, ex: &TokenizedExample) -> Vec<f64> {
        let last = self.layers.last().expect("at least one layer");
        let (n, nh) = (last.n, config.num_heads);
        // query row 0 of head h starts at h * rows * n with rows == 1
        let row = |h: usize| &last.attn[h * last.rows * n..h * last.rows * n + n];
        let pooled: Vec<f64> = (0..n)
            .map(|j| match config.attention_pooling {
                HeadPooling::Mean => (0..nh).map(|h| row(h)[j]).sum::<f64>() / nh as f64,
                HeadPooling::Max => (0..nh).map(|h| row(h)[j]).fold(0.0, f64::max),
                HeadPooling::Head(h) => row(h)[j],
            })
            .collect();
        let picked: Vec<f64> = (0..n).filter(|&j| ex.maskable[j]).map(|j| pooled[j]).collect();
        let z: f64 = picked.iter().sum();
        if z > 0.0 {
            picked.into_iter().map(|a| a / z).collect()
        } else {
            let m = picked.len() as f64;
            picked.into_iter().map(|_| 1.0 / m).collect()
        }
    }

    pub fn output(&self, p: &EncoderParams, _layout: &Layout, ex: &TokenizedExample) -> EncoderOutput {
        EncoderOutput { cls_feature: self.feature.clone(), logits: self.logits.clone(), cls_attention: self.cls_attention(&p.config, ex) }
    }
}

/// Backpropagates `dfeature` (gradient w.r.t. the `[CLS]` feature, excluding
/// the head) and `dlogits` into `grads`. Returns the gradient w.r.t. the
/// pre-dropout embedding sum (`n x d`).
pub fn backward(
    p: &EncoderParams,
    layout: &Layout,
    ex: &TokenizedExample,
    cache: &ForwardCache,
    dfeature: &[f64],
    dlogits: &[f64],
    grads: &mut [f64],
) -> Vec<f64> {
    let c = &p.config;
    let (d, f, nh, kc) = (c.model_dim, c.ffn_dim, c.num_heads, c.num_classes);
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();
    let w = &p.values;
    let n = cache.n;

    let mut dfeat = {
        let (dw, rest) = grads.split_at_mut(layout.head_b.off);
        let dw = &mut dw[layout.head_w.off..];
        let db = &mut rest[..kc];
        linear_backward(&cache.feature, dlogits, layout.head_w.of(w), 1, d, kc, dw, db)
    };
    for (a, b) in dfeat.iter_mut().zip(dfeature) {
        *a += b;
    }
    let mut dx = {
        let (g, b) = grads.split_at_mut(layout.lnf_b.off);
        layer_norm_backward(&dfeat, &cache.lnf, layout.lnf_g.of(w), 1, d, &mut g[layout.lnf_g.off..], &mut b[..d])
    };

    for (l, lc) in layout.layers.iter().zip(&cache.layers).rev() {
        let rows = lc.rows;
        debug_assert_eq!(dx.len(), rows * d);
        // feed-forward block
        let mut dm = dx.clone();
        apply_mask(&mut dm, &lc.drop_ffn);
        let dg = {
            let (a, b) = grads.split_at_mut(l.b2.off);
            linear_backward(&lc.g, &dm, l.w2.of(w), rows, f, d, &mut a[l.w2.off..l.w2.off + l.w2.len], &mut b[..d])
        };
        let du: Vec<f64> = dg.iter().zip(&lc.u).map(|(g, &u)| g * gelu_grad(u)).collect();
        let dh2 = {
            let (a, b) = grads.split_at_mut(l.b1.off);
            linear_backward(&lc.h2, &du, l.w1.of(w), rows, d, f, &mut a[l.w1.off..l.w1.off + l.w1.len], &mut b[..f])
        };
        let dmid = {
            let (a, b) = grads.split_at_mut(l.ln2_b.off);
            layer_norm_backward(&dh2, &lc.ln2, l.ln2_g.of(w), rows, d, &mut a[l.ln2_g.off..l.ln2_g.off + d], &mut b[..d])
        };
        let mut dx_mid = dx;
        for (a, b) in dx_mid.iter_mut().zip(&dmid) {
            *a += b;
        }

        // attention block
        let mut da = dx_mid.clone();
        apply_mask(&mut da, &lc.drop_attn);
        let dctx = {
            let (a, b) = grads.split_at_mut(l.bo.off);
            linear_backward(&lc.ctx, &da, l.wo.of(w), rows, d, d, &mut a[l.wo.off..l.wo.off + l.wo.len], &mut b[..d])
        };
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut ds = vec![0.0; n];
        for hd in 0..nh {
            let o = hd * dh;
            for i in 0..rows {
                let a = &lc.attn[(hd * rows + i) * n..(hd * rows + i + 1) * n];
                let dci = &dctx[i * d + o..i * d + o + dh];
                let mut dot = 0.0;
                for j in 0..n {
                    let vj = &lc.v[j * d + o..j * d + o + dh];
                    let da_ij: f64 = dci.iter().zip(vj).map(|(x, y)| x * y).sum();
                    ds[j] = da_ij;
                    dot += da_ij * a[j];
                    let dvj = &mut dv[j * d + o..j * d + o + dh];
                    for (t, &g) in dvj.iter_mut().zip(dci) {
                        *t += a[j] * g;
                    }
                }
                let qi = &lc.q[i * d + o..i * d + o + dh];
                for j in 0..n {
                    let s = a[j] * (ds[j] - dot) * scale;
                    if s == 0.0 {
                        continue;
                    }
                    let kj = &lc.k[j * d + o..j * d + o + dh];
                    for t in 0..dh {
                        dq[i * d + o + t] += s * kj[t];
                        dk[j * d + o + t] += s * qi[t];
                    }
                }
            }
        }
        let mut dh_all = vec![0.0; n * d];
        {
            let (a, b) = grads.split_at_mut(l.bq.off);
            let dhq = linear_backward(&lc.h[..rows * d], &dq, l.wq.of(w), rows, d, d, &mut a[l.wq.off..l.wq.off + l.wq.len], &mut b[..d]);
            for (t, s) in dh_all.iter_mut().zip(&dhq) {
                *t += s;
            }
        }
        for (wslot, bslot, dy) in [(l.wk, l.bk, &dk), (l.wv, l.bv, &dv)] {
            let (a, b) = grads.split_at_mut(bslot.off);
            let dhk = linear_backward(&lc.h, dy, wslot.of(w), n, d, d, &mut a[wslot.off..wslot.off + wslot.len], &mut b[..d]);
            for (t, s) in dh_all.iter_mut().zip(&dhk) {
                *t += s;
            }
        }
        let mut dx_in = {
            let (a, b) = grads.split_at_mut(l.ln1_b.off);
            layer_norm_backward(&dh_all, &lc.ln1, l.ln1_g.of(w), n, d, &mut a[l.ln1_g.off..l.ln1_g.off + d], &mut b[..d])
        };
        for (t, s) in dx_in[..rows * d].iter_mut().zip(&dx_mid) {
            *t += s;
        }
        dx = dx_in;
    }

    apply_mask(&mut dx, &cache.emb_mask);
    for i in 0..n {
        let t = ex.ids[i] as usize;
        let src = &dx[i * d..(i + 1) * d];
        let te = &mut grads[layout.tok_emb.off + t * d..layout.tok_emb.off + (t + 1) * d];
        for (a, b) in te.iter_mut().zip(src) {
            *a += b;
        }
        let pe = &mut grads[layout.pos_emb.off + i * d..layout.pos_emb.off + (i + 1) * d];
        for (a, b) in pe.iter_mut().zip(src) {
            *a += b;
        }
    }
    dx
}
