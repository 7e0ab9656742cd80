//! Independent reference implementations used as oracles by the integration
//! tests. Nothing here calls into the library's numerical kernels.

#![allow(dead_code)]

use hetadapt_core::decoder::{DecoderWeights, LayerWeights};
use hetadapt_core::TokenSequence;

pub fn mat_vec(x: &[f64], w: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(x.len(), rows);
    (0..cols).map(|j| (0..rows).map(|i| x[i] * w[i * cols + j]).sum()).collect()
}

pub fn norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = (var + 1e-5).sqrt();
    x.iter().zip(g.iter().zip(b)).map(|(v, (g, b))| (v - mean) / sd * g + b).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Dense attention with an explicit `-inf` score matrix for masked pairs.
pub fn dense_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], heads: usize, causal: bool) -> Vec<Vec<f64>> {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let scores: Vec<f64> = (0..k.len())
                .map(|j| {
                    if causal && j > i {
                        f64::NEG_INFINITY
                    } else {
                        (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt()
                    }
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..k.len() {
                for c in 0..dh {
                    out[i][h * dh + c] += e[j] / z * v[j][h * dh + c];
                }
            }
        }
    }
    out
}

pub fn positional(p: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let a = p as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Optional adapter: per layer four `(m×d)` banks, four gates, and a
/// zero-based bank per position.
pub struct RefAdapter<'a> {
    pub banks: Vec<[Vec<Vec<f64>>; 4]>,
    pub gates: Vec<[f64; 4]>,
    pub routes: &'a [u8],
}

fn project_rows(rows: &[Vec<f64>], w: &[f64], d: usize) -> Vec<Vec<f64>> {
    rows.iter().map(|r| mat_vec(r, w, d, d)).collect()
}

fn block(x: &mut [Vec<f64>], lw: &LayerWeights<f64>, heads: usize, layer: usize, adapter: Option<&RefAdapter>) {
    let d = x[0].len();
    let f = lw.b1.numel();
    let h: Vec<Vec<f64>> = x.iter().map(|r| norm(r, lw.ln1_gamma.data(), lw.ln1_beta.data())).collect();
    let q = project_rows(&h, lw.wq.data(), d);
    let k = project_rows(&h, lw.wk.data(), d);
    let v = project_rows(&h, lw.wv.data(), d);
    let att = dense_attention(&q, &k, &v, heads, true);
    let mut s = project_rows(&att, lw.wo.data(), d);
    if let Some(a) = adapter {
        for i in 0..x.len() {
            let r = a.routes[i] as usize;
            let bank = &a.banks[layer][r];
            let kb = project_rows(bank, lw.wk.data(), d);
            let vb = project_rows(bank, lw.wv.data(), d);
            let cross = dense_attention(&q[i..i + 1], &kb, &vb, heads, false);
            let u = mat_vec(&cross[0], lw.wo.data(), d, d);
            for c in 0..d {
                s[i][c] += a.gates[layer][r] * u[c];
            }
        }
    }
    for i in 0..x.len() {
        for c in 0..d {
            x[i][c] += s[i][c];
        }
        let h2 = norm(&x[i], lw.ln2_gamma.data(), lw.ln2_beta.data());
        let mut mid = mat_vec(&h2, lw.w1.data(), d, f);
        for (m, b) in mid.iter_mut().zip(lw.b1.data()) {
            *m = gelu(*m + b);
        }
        let out = mat_vec(&mid, lw.w2.data(), f, d);
        for c in 0..d {
            x[i][c] += out[c] + lw.b2.data()[c];
        }
    }
}

/// `[position][codebook][vocab]` logits.
pub fn reference_forward(w: &DecoderWeights<f64>, tokens: &TokenSequence, adapter: Option<&RefAdapter>) -> Vec<Vec<Vec<f64>>> {
    let cfg = w.config;
    let d = cfg.model_dim;
    let mut x: Vec<Vec<f64>> = (0..tokens.frames())
        .map(|t| {
            let mut row = positional(t, d);
            for (k, &id) in tokens.frame(t).iter().enumerate() {
                for c in 0..d {
                    row[c] += w.embed[k].data()[id as usize * d + c];
                }
            }
            row
        })
        .collect();
    for (l, lw) in w.layers.iter().enumerate() {
        block(&mut x, lw, cfg.num_heads, l, adapter);
    }
    x.iter()
        .map(|r| {
            let h = norm(r, w.lnf_gamma.data(), w.lnf_beta.data());
            w.heads.iter().map(|head| mat_vec(&h, head.data(), d, cfg.vocab_size)).collect()
        })
        .collect()
}

/// Brute-force binary median with replicate padding.
pub fn median_oracle(bits: &[bool], window: usize) -> Vec<bool> {
    let n = bits.len() as isize;
    let half = (window / 2) as isize;
    (0..n)
        .map(|t| {
            let mut vals: Vec<u8> = (t - half..=t + half).map(|i| bits[i.clamp(0, n - 1) as usize] as u8).collect();
            vals.sort_unstable();
            vals[vals.len() / 2] == 1
        })
        .collect()
}
