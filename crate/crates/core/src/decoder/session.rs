//! Tape-free incremental inference with a key/value cache.
//!
//! Each position is computed from the cached keys and values of earlier
//! positions only, so logits at position `t` cannot depend on later tokens.

use rand::Rng;

use super::{DecoderWeights, Logits, LN_EPS};
use crate::autodiff::{argmax, gelu, gemm, layer_norm_row, softmax_in_place, Scalar, Tensor, Trans};
use crate::error::{contract, Error, Result};
use crate::rng::{domain, keyed};
use crate::sequence::{TokenId, TokenSequence};

/// Adapter state precomputed for inference: projected keys/values per
/// layer and bank, gate values, and a zero-based bank index per position.
#[derive(Clone, Debug)]
pub struct AdapterCache<F> {
    slots: usize,
    keys: Vec<[Vec<F>; 4]>,
    values: Vec<[Vec<F>; 4]>,
    gates: Vec<[F; 4]>,
    routes: Vec<u8>,
}

impl<F: Scalar> AdapterCache<F> {
    /// `banks[l][r]` is the `m×d` adapter of layer `l`, type `r`.
    pub fn new(w: &DecoderWeights<F>, banks: &[[&Tensor<F>; 4]], gates: &[[F; 4]], routes: Vec<u8>) -> Result<Self> {
        let cfg = w.config;
        contract!(
            banks.len() == cfg.num_layers && gates.len() == cfg.num_layers,
            "adapter has {} layers, decoder {}",
            banks.len(),
            cfg.num_layers
        );
        contract!(routes.iter().all(|&r| r < 4), "route index outside 0..4");
        let d = cfg.model_dim;
        let slots = banks.first().map_or(0, |b| b[0].shape()[0]);
        contract!(slots >= 1, "adapter width must be at least 1");
        let mut keys = Vec::with_capacity(banks.len());
        let mut values = Vec::with_capacity(banks.len());
        for (layer, bank) in w.layers.iter().zip(banks) {
            let project = |wm: &Tensor<F>| -> Result<[Vec<F>; 4]> {
                let mut out: [Vec<F>; 4] = Default::default();
                for (o, a) in out.iter_mut().zip(bank) {
                    if a.shape() != [slots, d] {
                        return Err(Error::Shape(format!("adapter bank {:?}, expected [{slots}, {d}]", a.shape())));
                    }
                    *o = vec![F::zero(); slots * d];
                    gemm(slots, d, d, a.data(), Trans::No, wm.data(), Trans::No, o, false);
                }
                Ok(out)
            };
            keys.push(project(&layer.wk)?);
            values.push(project(&layer.wv)?);
        }
        Ok(Self {
            slots,
            keys,
            values,
            gates: gates.to_vec(),
            routes,
        })
    }

    pub fn routes(&self) -> &[u8] {
        &self.routes
    }
}

/// Incremental decoder state for one sequence.
pub struct Session<'a, F> {
    w: &'a DecoderWeights<F>,
    adapter: Option<&'a AdapterCache<F>>,
    k_cache: Vec<Vec<F>>,
    v_cache: Vec<Vec<F>>,
    pos: usize,
    scratch: Scratch<F>,
}

struct Scratch<F> {
    x: Vec<F>,
    h: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    att: Vec<F>,
    s: Vec<F>,
    u: Vec<F>,
    f: Vec<F>,
    probs: Vec<F>,
}

fn vecmat<F: Scalar>(x: &[F], w: &Tensor<F>, out: &mut [F]) {
    let shape = w.shape();
    gemm(1, shape[0], shape[1], x, Trans::No, w.data(), Trans::No, out, false);
}

/// Softmax attention of one query head over `rows` cached keys/values.
#[allow(clippy::too_many_arguments)]
fn attend<F: Scalar>(q: &[F], keys: &[F], values: &[F], rows: usize, d: usize, off: usize, scale: F, probs: &mut Vec<F>, out: &mut [F]) {
    let dh = q.len();
    probs.clear();
    for j in 0..rows {
        let kj = &keys[j * d + off..j * d + off + dh];
        probs.push(q.iter().zip(kj).map(|(&a, &b)| a * b).sum::<F>() * scale);
    }
    softmax_in_place(probs);
    out.iter_mut().for_each(|o| *o = F::zero());
    for (j, &p) in probs.iter().enumerate() {
        let vj = &values[j * d + off..j * d + off + dh];
        out.iter_mut().zip(vj).for_each(|(o, &v)| *o += p * v);
    }
}

impl<'a, F: Scalar> Session<'a, F> {
    pub fn new(w: &'a DecoderWeights<F>, adapter: Option<&'a AdapterCache<F>>) -> Result<Self> {
        let cfg = w.config;
        if let Some(a) = adapter {
            contract!(a.keys.len() == cfg.num_layers, "adapter cache built for another decoder");
        }
        let (d, f) = (cfg.model_dim, cfg.ffn_dim);
        Ok(Self {
            w,
            adapter,
            k_cache: vec![Vec::new(); cfg.num_layers],
            v_cache: vec![Vec::new(); cfg.num_layers],
            pos: 0,
            scratch: Scratch {
                x: vec![F::zero(); d],
                h: vec![F::zero(); d],
                q: vec![F::zero(); d],
                k: vec![F::zero(); d],
                v: vec![F::zero(); d],
                att: vec![F::zero(); d],
                s: vec![F::zero(); d],
                u: vec![F::zero(); d],
                f: vec![F::zero(); f],
                probs: Vec::new(),
            },
        })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one frame and returns its `n×V` logits.
    pub fn step(&mut self, frame: &[TokenId]) -> Result<Vec<F>> {
        let w = self.w;
        let cfg = w.config;
        let (d, heads) = (cfg.model_dim, cfg.num_heads);
        let dh = d / heads;
        contract!(self.pos < cfg.max_seq_len, "position {} exceeds max_seq_len {}", self.pos, cfg.max_seq_len);
        contract!(frame.len() == cfg.num_codebooks, "frame of {} tokens for {} codebooks", frame.len(), cfg.num_codebooks);
        let route = match self.adapter {
            Some(a) => {
                let r = a.routes.get(self.pos).copied();
                Some(r.ok_or_else(|| Error::Contract(format!("no route for position {}", self.pos)))? as usize)
            }
            None => None,
        };
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let eps = F::lit(LN_EPS);
        let sc = &mut self.scratch;

        sc.x.copy_from_slice(&w.positional()[self.pos * d..(self.pos + 1) * d]);
        for (k, &id) in frame.iter().enumerate() {
            if id as usize >= cfg.vocab_size {
                return Err(Error::Index(format!("token {id} outside vocabulary of {}", cfg.vocab_size)));
            }
            let row = w.embed[k].row(id as usize);
            sc.x.iter_mut().zip(row).for_each(|(o, &e)| *o += e);
        }

        let rows = self.pos + 1;
        for (l, lw) in w.layers.iter().enumerate() {
            layer_norm_row(&sc.x, lw.ln1_gamma.data(), lw.ln1_beta.data(), eps, &mut sc.h);
            vecmat(&sc.h, &lw.wq, &mut sc.q);
            vecmat(&sc.h, &lw.wk, &mut sc.k);
            vecmat(&sc.h, &lw.wv, &mut sc.v);
            self.k_cache[l].extend_from_slice(&sc.k);
            self.v_cache[l].extend_from_slice(&sc.v);
            for hd in 0..heads {
                let off = hd * dh;
                attend(
                    &sc.q[off..off + dh],
                    &self.k_cache[l],
                    &self.v_cache[l],
                    rows,
                    d,
                    off,
                    scale,
                    &mut sc.probs,
                    &mut sc.att[off..off + dh],
                );
            }
            vecmat(&sc.att, &lw.wo, &mut sc.s);
            if let (Some(a), Some(r)) = (self.adapter, route) {
                for hd in 0..heads {
                    let off = hd * dh;
                    attend(
                        &sc.q[off..off + dh],
                        &a.keys[l][r],
                        &a.values[l][r],
                        a.slots,
                        d,
                        off,
                        scale,
                        &mut sc.probs,
                        &mut sc.att[off..off + dh],
                    );
                }
                vecmat(&sc.att, &lw.wo, &mut sc.u);
                let g = a.gates[l][r];
                sc.s.iter_mut().zip(&sc.u).for_each(|(s, &u)| *s = *s + g * u);
            }
            sc.x.iter_mut().zip(&sc.s).for_each(|(x, &s)| *x += s);

            layer_norm_row(&sc.x, lw.ln2_gamma.data(), lw.ln2_beta.data(), eps, &mut sc.h);
            vecmat(&sc.h, &lw.w1, &mut sc.f);
            sc.f.iter_mut().zip(lw.b1.data()).for_each(|(f, &b)| *f = gelu(*f + b));
            vecmat(&sc.f, &lw.w2, &mut sc.s);
            sc.x.iter_mut().zip(sc.s.iter().zip(lw.b2.data())).for_each(|(x, (&s, &b))| *x += s + b);
        }

        layer_norm_row(&sc.x, w.lnf_gamma.data(), w.lnf_beta.data(), eps, &mut sc.h);
        let v = cfg.vocab_size;
        let mut out = vec![F::zero(); cfg.num_codebooks * v];
        for (k, head) in w.heads.iter().enumerate() {
            vecmat(&sc.h, head, &mut out[k * v..(k + 1) * v]);
        }
        self.pos += 1;
        Ok(out)
    }

    /// Feeds every frame of `tokens` and collects all logits.
    pub fn run(mut self, tokens: &TokenSequence) -> Result<Logits<F>> {
        self.w.check_tokens(tokens)?;
        let cfg = self.w.config;
        let mut data = Vec::with_capacity(tokens.frames() * cfg.num_codebooks * cfg.vocab_size);
        for t in 0..tokens.frames() {
            data.extend(self.step(tokens.frame(t))?);
        }
        Logits::new(tokens.frames(), cfg.num_codebooks, cfg.vocab_size, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Sample among the `k` largest logits after dividing by `temperature`.
    TopK { k: usize, temperature: f64, seed: u64 },
}

fn pick<F: Scalar, R: Rng>(logits: &[F], mode: DecodeMode, rng: &mut R) -> Result<usize> {
    match mode {
        DecodeMode::Greedy => Ok(argmax(logits)),
        DecodeMode::TopK { k, temperature, .. } => {
            contract!(k >= 1, "top-k needs k >= 1");
            contract!(temperature > 0.0, "temperature must be positive");
            let mut order: Vec<usize> = (0..logits.len()).collect();
            // Stable sort keeps lower indices first among equal logits.
            order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal));
            order.truncate(k.min(logits.len()));
            if order.len() == 1 {
                return Ok(order[0]);
            }
            let mut p: Vec<f64> = order.iter().map(|&i| logits[i].as_f64() / temperature).collect();
            softmax_in_place(&mut p);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (&i, &pi) in order.iter().zip(&p) {
                acc += pi;
                if u < acc {
                    return Ok(i);
                }
            }
            Ok(*order.last().expect("non-empty"))
        }
    }
}

/// Feeds `context` and then emits `steps` frames autoregressively.
pub fn generate<F: Scalar>(
    w: &DecoderWeights<F>,
    adapter: Option<&AdapterCache<F>>,
    context: &TokenSequence,
    steps: usize,
    mode: DecodeMode,
) -> Result<TokenSequence> {
    w.check_tokens(context)?;
    contract!(context.frames() >= 1, "generation needs at least one context frame");
    contract!(
        context.frames() + steps <= w.config.max_seq_len + 1,
        "{} context frames + {steps} steps exceed max_seq_len {}",
        context.frames(),
        w.config.max_seq_len
    );
    let n = w.config.num_codebooks;
    let v = w.config.vocab_size;
    let mut session = Session::new(w, adapter)?;
    let mut last = Vec::new();
    for t in 0..context.frames() {
        last = session.step(context.frame(t))?;
    }
    let mut out = TokenSequence::new(0, n, Vec::new())?;
    let seed = match mode {
        DecodeMode::TopK { seed, .. } => seed,
        DecodeMode::Greedy => 0,
    };
    for i in 0..steps {
        let mut rng = keyed(seed, domain::SAMPLE, i as u64);
        let frame = (0..n)
            .map(|k| pick(&last[k * v..(k + 1) * v], mode, &mut rng).map(|id| id as TokenId))
            .collect::<Result<Vec<_>>>()?;
        out.push_frame(&frame)?;
        if i + 1 < steps {
            last = session.step(&frame)?;
        }
    }
    Ok(out)
}

/// Emits the `T` prediction-area frames that follow a `T`-frame prefix.
pub fn decode_prediction_area<F: Scalar>(
    w: &DecoderWeights<F>,
    adapter: Option<&AdapterCache<F>>,
    prefix: &TokenSequence,
    mode: DecodeMode,
) -> Result<TokenSequence> {
    generate(w, adapter, prefix, prefix.frames(), mode)
}
