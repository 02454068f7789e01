//! Forward pass with cached activations and the matching hand-written
//! backward pass.
//!
//! Block structure (pre-norm):
//!   a = LN1(x);  x' = x + Attn(a) Wo
//!   b = LN2(x'); y  = x' + GELU(b W1 + b1) W2 + b2
//! followed by a final LN and the tied output projection `logits = h wteᵀ`.
//! Every per-position computation reads only positions at or before it, so
//! logits rows are causally exact (bit-identical under suffix changes).

use super::TransformerModel;
use crate::tokenizer::TokenId;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// sqrt(2/pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
    let th = u.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub(crate) struct BlockActs {
    x_in: Vec<f64>,
    ln1: Vec<f64>,
    ln1_mean: Vec<f64>,
    ln1_rstd: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads x T x T attention probabilities (zero above the diagonal)
    att: Vec<f64>,
    /// attention output before Wo
    o: Vec<f64>,
    x_mid: Vec<f64>,
    ln2: Vec<f64>,
    ln2_mean: Vec<f64>,
    ln2_rstd: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

pub(crate) struct Activations {
    t: usize,
    blocks: Vec<BlockActs>,
    x_out: Vec<f64>,
    lnf: Vec<f64>,
    lnf_mean: Vec<f64>,
    lnf_rstd: Vec<f64>,
}

fn layernorm_forward(
    out: &mut [f64],
    mean: &mut [f64],
    rstd: &mut [f64],
    inp: &[f64],
    g: &[f64],
    b: &[f64],
    c: usize,
) {
    for (r, x) in inp.chunks_exact(c).enumerate() {
        let m = x.iter().sum::<f64>() / c as f64;
        let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let o = &mut out[r * c..(r + 1) * c];
        for i in 0..c {
            o[i] = (x[i] - m) * s * g[i] + b[i];
        }
        mean[r] = m;
        rstd[r] = s;
    }
}

/// Accumulates into `dinp`, `dg` and `db`.
#[allow(clippy::too_many_arguments)]
fn layernorm_backward(
    dinp: &mut [f64],
    grads: &mut [f64],
    g_off: usize,
    b_off: usize,
    dout: &[f64],
    inp: &[f64],
    g: &[f64],
    mean: &[f64],
    rstd: &[f64],
    c: usize,
) {
    for r in 0..mean.len() {
        let x = &inp[r * c..(r + 1) * c];
        let dy = &dout[r * c..(r + 1) * c];
        let (m, s) = (mean[r], rstd[r]);
        let mut mean_dn = 0.0;
        let mut mean_dn_n = 0.0;
        for i in 0..c {
            let norm = (x[i] - m) * s;
            let dn = dy[i] * g[i];
            mean_dn += dn;
            mean_dn_n += dn * norm;
        }
        mean_dn /= c as f64;
        mean_dn_n /= c as f64;
        let dx = &mut dinp[r * c..(r + 1) * c];
        for i in 0..c {
            let norm = (x[i] - m) * s;
            grads[g_off + i] += dy[i] * norm;
            grads[b_off + i] += dy[i];
            dx[i] += s * (dy[i] * g[i] - mean_dn - norm * mean_dn_n);
        }
    }
}

/// out[r, :] = inp[r, :] · w (+ bias), with `w` stored `n_in x n_out`.
fn matmul_forward(out: &mut [f64], inp: &[f64], w: &[f64], bias: Option<&[f64]>, n_in: usize, n_out: usize) {
    for (x, o) in inp.chunks_exact(n_in).zip(out.chunks_exact_mut(n_out)) {
        match bias {
            Some(b) => o.copy_from_slice(b),
            None => o.fill(0.0),
        }
        for (i, &a) in x.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let w_row = &w[i * n_out..(i + 1) * n_out];
            for (oj, wj) in o.iter_mut().zip(w_row) {
                *oj += a * wj;
            }
        }
    }
}

/// Accumulates dinp += dout · wᵀ and dw += inpᵀ · dout.
fn matmul_backward(
    dinp: &mut [f64],
    dw: &mut [f64],
    dout: &[f64],
    inp: &[f64],
    w: &[f64],
    n_in: usize,
    n_out: usize,
) {
    for ((x, dy), dx) in inp.chunks_exact(n_in).zip(dout.chunks_exact(n_out)).zip(dinp.chunks_exact_mut(n_in)) {
        for i in 0..n_in {
            let w_row = &w[i * n_out..(i + 1) * n_out];
            dx[i] += w_row.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>();
            let a = x[i];
            if a != 0.0 {
                let dw_row = &mut dw[i * n_out..(i + 1) * n_out];
                for (g, d) in dw_row.iter_mut().zip(dy) {
                    *g += a * d;
                }
            }
        }
    }
}

fn bias_backward(db: &mut [f64], dout: &[f64]) {
    for dy in dout.chunks_exact(db.len()) {
        for (g, d) in db.iter_mut().zip(dy) {
            *g += d;
        }
    }
}

pub(crate) fn forward(model: &TransformerModel, ids: &[TokenId]) -> Activations {
    let cfg = model.config;
    let lay = &model.layout;
    let p = &model.params;
    let (t_len, c, f, nh) = (ids.len(), cfg.d_model, cfg.d_ff, cfg.n_heads);
    let hs = cfg.head_dim();
    let inv_sqrt = 1.0 / (hs as f64).sqrt();

    let mut x = vec![0.0; t_len * c];
    for (t, &id) in ids.iter().enumerate() {
        let tok = &p[lay.wte + id as usize * c..lay.wte + (id as usize + 1) * c];
        let pos = &p[lay.wpe + t * c..lay.wpe + (t + 1) * c];
        for i in 0..c {
            x[t * c + i] = tok[i] + pos[i];
        }
    }

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for off in &lay.blocks {
        let mut ln1 = vec![0.0; t_len * c];
        let mut ln1_mean = vec![0.0; t_len];
        let mut ln1_rstd = vec![0.0; t_len];
        layernorm_forward(&mut ln1, &mut ln1_mean, &mut ln1_rstd, &x, &p[off.ln1_g..off.ln1_g + c], &p[off.ln1_b..off.ln1_b + c], c);

        let mut q = vec![0.0; t_len * c];
        let mut k = vec![0.0; t_len * c];
        let mut v = vec![0.0; t_len * c];
        matmul_forward(&mut q, &ln1, &p[off.wq..off.wq + c * c], None, c, c);
        matmul_forward(&mut k, &ln1, &p[off.wk..off.wk + c * c], None, c, c);
        matmul_forward(&mut v, &ln1, &p[off.wv..off.wv + c * c], None, c, c);

        let mut att = vec![0.0; nh * t_len * t_len];
        let mut o = vec![0.0; t_len * c];
        for h in 0..nh {
            for t in 0..t_len {
                let qt = &q[t * c + h * hs..t * c + (h + 1) * hs];
                let row = &mut att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                let mut max = f64::NEG_INFINITY;
                for u in 0..=t {
                    let ku = &k[u * c + h * hs..u * c + (h + 1) * hs];
                    let s = qt.iter().zip(ku).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt;
                    row[u] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for s in row[..=t].iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in row[..=t].iter_mut() {
                    *s /= sum;
                }
                let ot = &mut o[t * c + h * hs..t * c + (h + 1) * hs];
                for u in 0..=t {
                    let a = row[u];
                    let vu = &v[u * c + h * hs..u * c + (h + 1) * hs];
                    for (oi, vi) in ot.iter_mut().zip(vu) {
                        *oi += a * vi;
                    }
                }
            }
        }

        let mut attn_proj = vec![0.0; t_len * c];
        matmul_forward(&mut attn_proj, &o, &p[off.wo..off.wo + c * c], None, c, c);
        let x_mid: Vec<f64> = x.iter().zip(&attn_proj).map(|(a, b)| a + b).collect();

        let mut ln2 = vec![0.0; t_len * c];
        let mut ln2_mean = vec![0.0; t_len];
        let mut ln2_rstd = vec![0.0; t_len];
        layernorm_forward(&mut ln2, &mut ln2_mean, &mut ln2_rstd, &x_mid, &p[off.ln2_g..off.ln2_g + c], &p[off.ln2_b..off.ln2_b + c], c);

        let mut h_pre = vec![0.0; t_len * f];
        matmul_forward(&mut h_pre, &ln2, &p[off.w1..off.w1 + c * f], Some(&p[off.b1..off.b1 + f]), c, f);
        let h_act: Vec<f64> = h_pre.iter().map(|&z| gelu(z)).collect();
        let mut mlp = vec![0.0; t_len * c];
        matmul_forward(&mut mlp, &h_act, &p[off.w2..off.w2 + f * c], Some(&p[off.b2..off.b2 + c]), f, c);
        let x_next: Vec<f64> = x_mid.iter().zip(&mlp).map(|(a, b)| a + b).collect();

        let x_in = std::mem::replace(&mut x, x_next);
        blocks.push(BlockActs {
            x_in,
            ln1,
            ln1_mean,
            ln1_rstd,
            q,
            k,
            v,
            att,
            o,
            x_mid,
            ln2,
            ln2_mean,
            ln2_rstd,
            h_pre,
            h_act,
        });
    }

    let mut lnf = vec![0.0; t_len * c];
    let mut lnf_mean = vec![0.0; t_len];
    let mut lnf_rstd = vec![0.0; t_len];
    layernorm_forward(&mut lnf, &mut lnf_mean, &mut lnf_rstd, &x, &p[lay.lnf_g..lay.lnf_g + c], &p[lay.lnf_b..lay.lnf_b + c], c);
    Activations { t: t_len, blocks, x_out: x, lnf, lnf_mean, lnf_rstd }
}

/// Logits for the requested rows, `rows.len() x vocab_size`.
pub(crate) fn logits_rows(model: &TransformerModel, acts: &Activations, rows: &[usize]) -> Vec<f64> {
    let (c, v) = (model.config.d_model, model.config.vocab_size);
    let wte = model.token_embedding();
    let mut out = vec![0.0; rows.len() * v];
    for (i, &r) in rows.iter().enumerate() {
        debug_assert!(r < acts.t);
        let h = &acts.lnf[r * c..(r + 1) * c];
        for (tok, o) in wte.chunks_exact(c).zip(&mut out[i * v..(i + 1) * v]) {
            *o = h.iter().zip(tok).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// -log softmax(logits)[target], computed stably.
pub(crate) fn nll_row(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Accumulates `scale * d(Σ NLL)/dθ` into `grads`; returns Σ NLL.
pub(crate) fn backward(
    model: &TransformerModel,
    acts: &Activations,
    ids: &[TokenId],
    targets: &[(usize, TokenId)],
    scale: f64,
    grads: &mut [f64],
) -> f64 {
    let cfg = model.config;
    let lay = &model.layout;
    let p = &model.params;
    let (t_len, c, f, nh, v) = (acts.t, cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.vocab_size);
    let hs = cfg.head_dim();
    let inv_sqrt = 1.0 / (hs as f64).sqrt();
    let wte = model.token_embedding();

    // Output projection (tied to wte).
    let rows: Vec<usize> = targets.iter().map(|&(r, _)| r).collect();
    let mut logits = logits_rows(model, acts, &rows);
    let mut nll = 0.0;
    let mut dlnf = vec![0.0; t_len * c];
    for (i, &(r, tgt)) in targets.iter().enumerate() {
        let row = &mut logits[i * v..(i + 1) * v];
        nll += nll_row(row, tgt as usize);
        super::softmax_in_place(row);
        row[tgt as usize] -= 1.0;
        let h = &acts.lnf[r * c..(r + 1) * c];
        let dh = &mut dlnf[r * c..(r + 1) * c];
        for (tok_id, &d) in row.iter().enumerate() {
            let d = d * scale;
            let tok = &wte[tok_id * c..(tok_id + 1) * c];
            let gtok = &mut grads[lay.wte + tok_id * c..lay.wte + (tok_id + 1) * c];
            for i in 0..c {
                dh[i] += d * tok[i];
                gtok[i] += d * h[i];
            }
        }
    }

    let mut dx = vec![0.0; t_len * c];
    layernorm_backward(
        &mut dx,
        grads,
        lay.lnf_g,
        lay.lnf_b,
        &dlnf,
        &acts.x_out,
        &p[lay.lnf_g..lay.lnf_g + c],
        &acts.lnf_mean,
        &acts.lnf_rstd,
        c,
    );

    for (off, a) in lay.blocks.iter().zip(&acts.blocks).rev() {
        // MLP branch: dx flows to both the residual and the MLP output.
        let mut dh_act = vec![0.0; t_len * f];
        matmul_backward(&mut dh_act, &mut grads[off.w2..off.w2 + f * c], &dx, &a.h_act, &p[off.w2..off.w2 + f * c], f, c);
        bias_backward(&mut grads[off.b2..off.b2 + c], &dx);
        let dh_pre: Vec<f64> = dh_act.iter().zip(&a.h_pre).map(|(d, &z)| d * gelu_grad(z)).collect();
        let mut dln2 = vec![0.0; t_len * c];
        matmul_backward(&mut dln2, &mut grads[off.w1..off.w1 + c * f], &dh_pre, &a.ln2, &p[off.w1..off.w1 + c * f], c, f);
        bias_backward(&mut grads[off.b1..off.b1 + f], &dh_pre);
        let mut dx_mid = dx;
        layernorm_backward(
            &mut dx_mid,
            grads,
            off.ln2_g,
            off.ln2_b,
            &dln2,
            &a.x_mid,
            &p[off.ln2_g..off.ln2_g + c],
            &a.ln2_mean,
            &a.ln2_rstd,
            c,
        );

        // Attention branch.
        let mut d_o = vec![0.0; t_len * c];
        matmul_backward(&mut d_o, &mut grads[off.wo..off.wo + c * c], &dx_mid, &a.o, &p[off.wo..off.wo + c * c], c, c);
        let mut dq = vec![0.0; t_len * c];
        let mut dk = vec![0.0; t_len * c];
        let mut dv = vec![0.0; t_len * c];
        let mut datt = vec![0.0; t_len];
        for h in 0..nh {
            for t in 0..t_len {
                let att = &a.att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                let dot = &d_o[t * c + h * hs..t * c + (h + 1) * hs];
                let mut weighted = 0.0;
                for u in 0..=t {
                    let vu = &a.v[u * c + h * hs..u * c + (h + 1) * hs];
                    datt[u] = dot.iter().zip(vu).map(|(x, y)| x * y).sum();
                    weighted += att[u] * datt[u];
                    let dvu = &mut dv[u * c + h * hs..u * c + (h + 1) * hs];
                    for (g, d) in dvu.iter_mut().zip(dot) {
                        *g += att[u] * d;
                    }
                }
                let qt = &a.q[t * c + h * hs..t * c + (h + 1) * hs];
                for u in 0..=t {
                    let ds = att[u] * (datt[u] - weighted) * inv_sqrt;
                    if ds == 0.0 {
                        continue;
                    }
                    let ku = &a.k[u * c + h * hs..u * c + (h + 1) * hs];
                    let dqt = &mut dq[t * c + h * hs..t * c + (h + 1) * hs];
                    for (g, kv) in dqt.iter_mut().zip(ku) {
                        *g += ds * kv;
                    }
                    let dku = &mut dk[u * c + h * hs..u * c + (h + 1) * hs];
                    for (g, qv) in dku.iter_mut().zip(qt) {
                        *g += ds * qv;
                    }
                }
            }
        }
        let mut dln1 = vec![0.0; t_len * c];
        matmul_backward(&mut dln1, &mut grads[off.wq..off.wq + c * c], &dq, &a.ln1, &p[off.wq..off.wq + c * c], c, c);
        matmul_backward(&mut dln1, &mut grads[off.wk..off.wk + c * c], &dk, &a.ln1, &p[off.wk..off.wk + c * c], c, c);
        matmul_backward(&mut dln1, &mut grads[off.wv..off.wv + c * c], &dv, &a.ln1, &p[off.wv..off.wv + c * c], c, c);
        let mut dx_in = dx_mid;
        layernorm_backward(
            &mut dx_in,
            grads,
            off.ln1_g,
            off.ln1_b,
            &dln1,
            &a.x_in,
            &p[off.ln1_g..off.ln1_g + c],
            &a.ln1_mean,
            &a.ln1_rstd,
            c,
        );
        dx = dx_in;
    }

    for (t, &id) in ids.iter().enumerate() {
        let d = &dx[t * c..(t + 1) * c];
        let gt = lay.wte + id as usize * c;
        for i in 0..c {
            grads[gt + i] += d[i];
        }
        let gp = lay.wpe + t * c;
        for i in 0..c {
            grads[gp + i] += d[i];
        }
    }
    nll
}
