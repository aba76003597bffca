//! Slice-level forward pass with activation cache, and its hand-derived
//! backward pass. Gradients accumulate into a model-shaped buffer
//! (see [`AttentionModel::zeros_like`]).

use super::model::AttentionModel;
use super::ops::{normalize_row, softmax_in_place, LayerNormParams, Linear};
use crate::tensor::{matmul_nn_acc, matmul_nt, outer_acc};

#[derive(Default)]
struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

#[derive(Default)]
struct LayerCache {
    h_in: Vec<f64>,
    ln1: NormCache,
    n1: Vec<f64>,
    qkv: Vec<f64>,
    /// `H x T x T` attention probabilities.
    probs: Vec<f64>,
    concat: Vec<f64>,
    ln2: NormCache,
    n2: Vec<f64>,
    /// FFN hidden pre-activation.
    u: Vec<f64>,
    a: Vec<f64>,
}

/// Activations of one forward pass.
#[derive(Default)]
pub(crate) struct Cache {
    x: Vec<f64>,
    layers: Vec<LayerCache>,
    lnf: NormCache,
    nf: Vec<f64>,
}

fn linear_fwd(x: &[f64], rows: usize, l: &Linear) -> Vec<f64> {
    let (inp, outp) = (l.in_dim(), l.out_dim());
    let mut out = vec![0.0; rows * outp];
    matmul_nt(x, l.w.data(), rows, inp, outp, &mut out);
    for r in out.chunks_exact_mut(outp) {
        for (v, b) in r.iter_mut().zip(l.b.data()) {
            *v += b;
        }
    }
    out
}

fn linear_bwd(dy: &[f64], x: &[f64], rows: usize, l: &Linear, g: &mut Linear, dx: Option<&mut [f64]>) {
    let (inp, outp) = (l.in_dim(), l.out_dim());
    outer_acc(dy, x, rows, outp, inp, g.w.data_mut());
    let gb = g.b.data_mut();
    for r in dy.chunks_exact(outp) {
        for (s, v) in gb.iter_mut().zip(r) {
            *s += v;
        }
    }
    if let Some(dx) = dx {
        matmul_nn_acc(dy, l.w.data(), rows, outp, inp, dx);
    }
}

fn norm_fwd(x: &[f64], d: usize, p: &LayerNormParams) -> (Vec<f64>, NormCache) {
    let mut out = x.to_vec();
    let mut xhat = x.to_vec();
    let mut rstds = Vec::with_capacity(x.len() / d);
    let ones = vec![1.0; d];
    let zeros = vec![0.0; d];
    for (row, xh) in out.chunks_exact_mut(d).zip(xhat.chunks_exact_mut(d)) {
        let (_, rstd) = normalize_row(xh, &ones, &zeros);
        rstds.push(rstd);
        for ((o, &h), (g, b)) in row
            .iter_mut()
            .zip(xh.iter())
            .zip(p.gamma.data().iter().zip(p.beta.data()))
        {
            *o = h * g + b;
        }
    }
    (out, NormCache { xhat, rstd: rstds })
}

fn norm_bwd(dy: &[f64], d: usize, c: &NormCache, p: &LayerNormParams, g: &mut LayerNormParams, dx: &mut [f64]) {
    let gamma = p.gamma.data();
    let n = d as f64;
    let mut dxhat = vec![0.0; d];
    for (r, (dyr, xh)) in dy.chunks_exact(d).zip(c.xhat.chunks_exact(d)).enumerate() {
        {
            let gg = g.gamma.data_mut();
            for i in 0..d {
                gg[i] += dyr[i] * xh[i];
            }
        }
        {
            let gb = g.beta.data_mut();
            for i in 0..d {
                gb[i] += dyr[i];
            }
        }
        let mut sum = 0.0;
        let mut sum_xh = 0.0;
        for i in 0..d {
            dxhat[i] = dyr[i] * gamma[i];
            sum += dxhat[i];
            sum_xh += dxhat[i] * xh[i];
        }
        let rstd = c.rstd[r];
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += rstd / n * (n * dxhat[i] - sum - xh[i] * sum_xh);
        }
    }
}

/// Forward pass over a patched `T_T x patch_dim` input (row-major slice).
/// Returns logits; fills `cache` when given.
pub(crate) fn forward(model: &AttentionModel, x: &[f64], cache: Option<&mut Cache>) -> Vec<f64> {
    let cfg = &model.config;
    let (t, d, heads) = (cfg.patches, cfg.dim, cfg.heads);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut h = linear_fwd(x, t, &model.input);
    let mut layer_caches = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let h_in = h.clone();
        let (n1, ln1) = norm_fwd(&h, d, &layer.norm1);
        let qkv = linear_fwd(&n1, t, &layer.qkv);
        let mut probs = vec![0.0; heads * t * t];
        let mut concat = vec![0.0; t * d];
        for hd in 0..heads {
            let p = &mut probs[hd * t * t..(hd + 1) * t * t];
            for i in 0..t {
                let qi = &qkv[i * 3 * d + hd * dh..i * 3 * d + (hd + 1) * dh];
                let row = &mut p[i * t..(i + 1) * t];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &qkv[j * 3 * d + d + hd * dh..j * 3 * d + d + (hd + 1) * dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(row);
                let out = &mut concat[i * d + hd * dh..i * d + (hd + 1) * dh];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &qkv[j * 3 * d + 2 * d + hd * dh..j * 3 * d + 2 * d + (hd + 1) * dh];
                    for (o, v) in out.iter_mut().zip(vj) {
                        *o += pij * v;
                    }
                }
            }
        }
        let o = linear_fwd(&concat, t, &layer.proj);
        for (hv, ov) in h.iter_mut().zip(&o) {
            *hv += ov;
        }
        let (n2, ln2) = norm_fwd(&h, d, &layer.norm2);
        let u = linear_fwd(&n2, t, &layer.ffn_hidden);
        let a: Vec<f64> = u.iter().map(|v| v.max(0.0)).collect();
        let f = linear_fwd(&a, t, &layer.ffn_out);
        for (hv, fv) in h.iter_mut().zip(&f) {
            *hv += fv;
        }
        layer_caches.push(LayerCache {
            h_in,
            ln1,
            n1,
            qkv,
            probs,
            concat,
            ln2,
            n2,
            u,
            a,
        });
    }
    let (nf, lnf) = norm_fwd(&h, d, &model.final_norm);
    let logits = linear_fwd(&nf, 1, &model.output);
    if let Some(c) = cache {
        *c = Cache {
            x: x.to_vec(),
            layers: layer_caches,
            lnf,
            nf,
        };
    }
    logits
}

/// Accumulates parameter gradients for `dlogits` into `grads`.
pub(crate) fn backward(model: &AttentionModel, cache: &Cache, dlogits: &[f64], grads: &mut AttentionModel) {
    let cfg = &model.config;
    let (t, d, heads) = (cfg.patches, cfg.dim, cfg.heads);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dnf = vec![0.0; t * d];
    linear_bwd(dlogits, &cache.nf, 1, &model.output, &mut grads.output, Some(&mut dnf));
    let mut dh_buf = vec![0.0; t * d];
    norm_bwd(
        &dnf,
        d,
        &cache.lnf,
        &model.final_norm,
        &mut grads.final_norm,
        &mut dh_buf,
    );

    for (li, lc) in cache.layers.iter().enumerate().rev() {
        let layer = &model.layers[li];
        let g = &mut grads.layers[li];

        // FFN branch: h = h_mid + ffn_out(relu(ffn_hidden(norm2(h_mid))))
        let mut da = vec![0.0; t * cfg.ffn_dim];
        linear_bwd(&dh_buf, &lc.a, t, &layer.ffn_out, &mut g.ffn_out, Some(&mut da));
        for (dv, &uv) in da.iter_mut().zip(&lc.u) {
            if uv <= 0.0 {
                *dv = 0.0;
            }
        }
        let mut dn2 = vec![0.0; t * d];
        linear_bwd(&da, &lc.n2, t, &layer.ffn_hidden, &mut g.ffn_hidden, Some(&mut dn2));
        norm_bwd(&dn2, d, &lc.ln2, &layer.norm2, &mut g.norm2, &mut dh_buf);

        // MSA branch: h_mid = h_in + proj(attn(qkv(norm1(h_in))))
        let mut dconcat = vec![0.0; t * d];
        linear_bwd(&dh_buf, &lc.concat, t, &layer.proj, &mut g.proj, Some(&mut dconcat));
        let mut dqkv = vec![0.0; t * 3 * d];
        let mut dp = vec![0.0; t];
        for hd in 0..heads {
            let probs = &lc.probs[hd * t * t..(hd + 1) * t * t];
            let (qo, ko, vo) = (hd * dh, d + hd * dh, 2 * d + hd * dh);
            for i in 0..t {
                let dout = &dconcat[i * d + hd * dh..i * d + (hd + 1) * dh];
                let prow = &probs[i * t..(i + 1) * t];
                for j in 0..t {
                    let vj = &lc.qkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                    dp[j] = dout.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let dvj = &mut dqkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                    for (s, &o) in dvj.iter_mut().zip(dout) {
                        *s += prow[j] * o;
                    }
                }
                let inner: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
                for j in 0..t {
                    let ds = prow[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for k in 0..dh {
                        let qik = lc.qkv[i * 3 * d + qo + k];
                        let kjk = lc.qkv[j * 3 * d + ko + k];
                        dqkv[i * 3 * d + qo + k] += ds * kjk;
                        dqkv[j * 3 * d + ko + k] += ds * qik;
                    }
                }
            }
        }
        let mut dn1 = vec![0.0; t * d];
        linear_bwd(&dqkv, &lc.n1, t, &layer.qkv, &mut g.qkv, Some(&mut dn1));
        norm_bwd(&dn1, d, &lc.ln1, &layer.norm1, &mut g.norm1, &mut dh_buf);
        debug_assert_eq!(lc.h_in.len(), dh_buf.len());
    }

    linear_bwd(&dh_buf, &cache.x, t, &model.input, &mut grads.input, None);
}
