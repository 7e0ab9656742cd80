//! Toy pre-LN causal transformer decoder over summed per-codebook token
//! embeddings with fixed sinusoidal positions and one output head per
//! codebook.

mod forward;
mod session;

pub use forward::{forward_tape, prediction_loss_tape, AdapterVars, LayerVars, WeightVars};
pub use session::{decode_prediction_area, generate, AdapterCache, DecodeMode, Session};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{contract, Error, Result};
use crate::rng::{domain, keyed};
use crate::sequence::TokenSequence;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub num_codebooks: usize,
    pub max_seq_len: usize,
}

impl DecoderConfig {
    /// L=4, d=64, h=4, ffn=256, V=64, one codebook, room for 2×128 frames.
    pub fn toy() -> Self {
        Self {
            num_layers: 4,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            vocab_size: 64,
            num_codebooks: 1,
            max_seq_len: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("num_codebooks", self.num_codebooks),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.vocab_size > u16::MAX as usize + 1 {
            return Err(Error::Config(format!("vocab_size {} exceeds 16-bit ids", self.vocab_size)));
        }
        Ok(())
    }

    /// Number of stored weight values (the positional table is not stored).
    pub fn param_count(&self) -> usize {
        let (n, v, d, f) = (self.num_codebooks, self.vocab_size, self.model_dim, self.ffn_dim);
        let per_layer = 4 * d * d + 4 * d + d * f + f + f * d + d;
        n * v * d + self.num_layers * per_layer + 2 * d + n * d * v
    }
}

/// Weights of one block. Projections act as `x @ W` on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<F> {
    pub ln1_gamma: Tensor<F>,
    pub ln1_beta: Tensor<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub ln2_gamma: Tensor<F>,
    pub ln2_beta: Tensor<F>,
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

impl<F: Scalar> LayerWeights<F> {
    fn tensors(&self) -> [(&'static str, &Tensor<F>); 12] {
        [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
            ("attn.wo", &self.wo),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("ffn.w1", &self.w1),
            ("ffn.b1", &self.b1),
            ("ffn.w2", &self.w2),
            ("ffn.b2", &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<F>); 12] {
        [
            ("ln1.gamma", &mut self.ln1_gamma),
            ("ln1.beta", &mut self.ln1_beta),
            ("attn.wq", &mut self.wq),
            ("attn.wk", &mut self.wk),
            ("attn.wv", &mut self.wv),
            ("attn.wo", &mut self.wo),
            ("ln2.gamma", &mut self.ln2_gamma),
            ("ln2.beta", &mut self.ln2_beta),
            ("ffn.w1", &mut self.w1),
            ("ffn.b1", &mut self.b1),
            ("ffn.w2", &mut self.w2),
            ("ffn.b2", &mut self.b2),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights<F> {
    pub config: DecoderConfig,
    /// One `V×d` table per codebook.
    pub embed: Vec<Tensor<F>>,
    pub layers: Vec<LayerWeights<F>>,
    pub lnf_gamma: Tensor<F>,
    pub lnf_beta: Tensor<F>,
    /// One `d×V` head per codebook.
    pub heads: Vec<Tensor<F>>,
    positional: Vec<F>,
}

/// `max_len × d` sinusoidal table: even columns sine, odd columns cosine.
pub fn sinusoidal_table<F: Scalar>(max_len: usize, d: usize) -> Vec<F> {
    let mut pe = vec![F::zero(); max_len * d];
    for p in 0..max_len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * pair / d as f64);
            pe[p * d + i] = F::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

fn normal_tensor<F: Scalar, R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor<F> {
    let numel = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..numel).map(|_| F::lit(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("numel matches")
}

fn filled<F: Scalar>(len: usize, v: f64) -> Tensor<F> {
    Tensor::new(vec![len], vec![F::lit(v); len]).expect("numel matches")
}

impl<F: Scalar> DecoderWeights<F> {
    /// Random initialisation; each tensor draws from its own keyed stream.
    pub fn init(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, f, v, l) = (config.model_dim, config.ffn_dim, config.vocab_size, config.num_layers);
        let mut stream = 0u64;
        let mut next = || {
            stream += 1;
            keyed(seed, domain::INIT, stream)
        };
        let proj = 1.0 / (d as f64).sqrt();
        let resid = proj / ((2 * l) as f64).sqrt();
        let embed = (0..config.num_codebooks)
            .map(|_| normal_tensor(vec![v, d], 1.0, &mut next()))
            .collect();
        let layers = (0..l)
            .map(|_| LayerWeights {
                ln1_gamma: filled(d, 1.0),
                ln1_beta: filled(d, 0.0),
                wq: normal_tensor(vec![d, d], proj, &mut next()),
                wk: normal_tensor(vec![d, d], proj, &mut next()),
                wv: normal_tensor(vec![d, d], proj, &mut next()),
                wo: normal_tensor(vec![d, d], resid, &mut next()),
                ln2_gamma: filled(d, 1.0),
                ln2_beta: filled(d, 0.0),
                w1: normal_tensor(vec![d, f], proj, &mut next()),
                b1: filled(f, 0.0),
                w2: normal_tensor(vec![f, d], resid * (d as f64 / f as f64).sqrt(), &mut next()),
                b2: filled(d, 0.0),
            })
            .collect();
        let heads = (0..config.num_codebooks)
            .map(|_| normal_tensor(vec![d, v], proj, &mut next()))
            .collect();
        Ok(Self {
            config,
            embed,
            layers,
            lnf_gamma: filled(d, 1.0),
            lnf_beta: filled(d, 0.0),
            heads,
            positional: sinusoidal_table(config.max_seq_len, d),
        })
    }

    pub fn positional(&self) -> &[F] {
        &self.positional
    }

    /// Every stored tensor with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (k, t) in self.embed.iter().enumerate() {
            out.push((format!("embed.cb{k}"), t));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("final_ln.gamma".to_string(), &self.lnf_gamma));
        out.push(("final_ln.beta".to_string(), &self.lnf_beta));
        for (k, t) in self.heads.iter().enumerate() {
            out.push((format!("head.cb{k}"), t));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        for (k, t) in self.embed.iter_mut().enumerate() {
            out.push((format!("embed.cb{k}"), t));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.tensors_mut() {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("final_ln.gamma".to_string(), &mut self.lnf_gamma));
        out.push(("final_ln.beta".to_string(), &mut self.lnf_beta));
        for (k, t) in self.heads.iter_mut().enumerate() {
            out.push((format!("head.cb{k}"), t));
        }
        out
    }

    /// Rebuilds weights from named tensors, checking every shape.
    pub fn from_named(config: DecoderConfig, mut lookup: impl FnMut(&str) -> Option<Tensor<F>>) -> Result<Self> {
        let mut w = Self::init(config, 0)?;
        for (name, t) in w.named_mut() {
            let src = lookup(&name).ok_or_else(|| Error::Format(format!("missing weight {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Contract(format!(
                    "weight {name} has shape {:?}, config expects {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src;
        }
        Ok(w)
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for (_, t) in self.named_mut() {
            t.set_requires_grad(on);
        }
    }

    pub fn cast<G: Scalar>(&self) -> DecoderWeights<G> {
        DecoderWeights {
            config: self.config,
            embed: self.embed.iter().map(Tensor::cast).collect(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln1_gamma: l.ln1_gamma.cast(),
                    ln1_beta: l.ln1_beta.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ln2_gamma: l.ln2_gamma.cast(),
                    ln2_beta: l.ln2_beta.cast(),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                })
                .collect(),
            lnf_gamma: self.lnf_gamma.cast(),
            lnf_beta: self.lnf_beta.cast(),
            heads: self.heads.iter().map(Tensor::cast).collect(),
            positional: sinusoidal_table(self.config.max_seq_len, self.config.model_dim),
        }
    }

    pub(crate) fn check_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        contract!(
            tokens.frames() <= self.config.max_seq_len,
            "sequence of {} frames exceeds max_seq_len {}",
            tokens.frames(),
            self.config.max_seq_len
        );
        contract!(
            tokens.codebooks() == self.config.num_codebooks,
            "sequence has {} codebooks, model {}",
            tokens.codebooks(),
            self.config.num_codebooks
        );
        tokens.check_vocab(self.config.vocab_size)
    }

    /// `S×d` input states: summed codebook embeddings plus positions.
    pub fn embed(&self, tokens: &TokenSequence) -> Result<Vec<F>> {
        self.check_tokens(tokens)?;
        let d = self.config.model_dim;
        let mut out = self.positional[..tokens.frames() * d].to_vec();
        for t in 0..tokens.frames() {
            for (k, &id) in tokens.frame(t).iter().enumerate() {
                let row = self.embed[k].row(id as usize);
                out[t * d..(t + 1) * d].iter_mut().zip(row).for_each(|(o, &e)| *o += e);
            }
        }
        Ok(out)
    }

    /// Masked multi-head self-attention of one layer on `S×d` states, through `W_o`.
    pub fn causal_self_attention(&self, h: &[F], layer: usize) -> Result<Vec<F>> {
        let d = self.config.model_dim;
        contract!(layer < self.layers.len(), "layer {layer} of {}", self.layers.len());
        contract!(h.len() % d == 0, "{} values are not rows of width {d}", h.len());
        let seq = h.len() / d;
        contract!(seq <= self.config.max_seq_len, "{seq} rows exceed max_seq_len");
        let lw = &self.layers[layer];
        let mut tape = crate::autodiff::Tape::new();
        let x = tape.input(vec![seq, d], h.to_vec(), false)?;
        let (wq, wk, wv, wo) = (tape.leaf(&lw.wq), tape.leaf(&lw.wk), tape.leaf(&lw.wv), tape.leaf(&lw.wo));
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let a = tape.causal_attention(q, k, v, self.config.num_heads)?;
        let s = tape.matmul(a, wo)?;
        Ok(tape.value(s).to_vec())
    }

    /// Full-sequence logits of the unadapted decoder.
    pub fn forward(&self, tokens: &TokenSequence) -> Result<Logits<F>> {
        Session::new(self, None)?.run(tokens)
    }
}

/// `S × n × V` logits, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<F> {
    seq: usize,
    codebooks: usize,
    vocab: usize,
    data: Vec<F>,
}

impl<F: Scalar> Logits<F> {
    pub fn new(seq: usize, codebooks: usize, vocab: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != seq * codebooks * vocab {
            return Err(Error::Shape(format!(
                "{} logits for {seq}x{codebooks}x{vocab}",
                data.len()
            )));
        }
        Ok(Self { seq, codebooks, vocab, data })
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn codebooks(&self) -> usize {
        self.codebooks
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn at(&self, pos: usize, codebook: usize) -> &[F] {
        let off = (pos * self.codebooks + codebook) * self.vocab;
        &self.data[off..off + self.vocab]
    }

    /// Largest absolute difference to another logit block of the same shape.
    pub fn max_abs_diff(&self, other: &Logits<F>) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "logit shapes differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Greedy token per codebook at one position.
pub fn argmax_frame<F: Scalar>(logits: &Logits<F>, pos: usize) -> Vec<crate::sequence::TokenId> {
    (0..logits.codebooks())
        .map(|k| crate::autodiff::argmax(logits.at(pos, k)) as crate::sequence::TokenId)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DecoderConfig {
        DecoderConfig {
            num_layers: 1,
            model_dim: 4,
            num_heads: 1,
            ffn_dim: 8,
            vocab_size: 5,
            num_codebooks: 1,
            max_seq_len: 16,
        }
    }

    #[test]
    fn param_count_matches_named_tensors() {
        for cfg in [tiny(), DecoderConfig::toy(), DecoderConfig { num_codebooks: 2, ..tiny() }] {
            let w = DecoderWeights::<f32>::init(cfg, 1).unwrap();
            let total: usize = w.named().iter().map(|(_, t)| t.numel()).sum();
            assert_eq!(total, cfg.param_count());
        }
        let a = tiny();
        let b = DecoderConfig { vocab_size: 10, ..a };
        assert_eq!(b.param_count() - a.param_count(), 2 * 5 * 4);
    }

    #[test]
    fn config_validation() {
        assert!(DecoderConfig { num_heads: 3, ..tiny() }.validate().is_err());
        assert!(DecoderConfig { num_layers: 0, ..tiny() }.validate().is_err());
        assert!(DecoderConfig { max_seq_len: 1, ..tiny() }.validate().is_err());
    }

    #[test]
    fn embed_examples() {
        let mut w = DecoderWeights::<f64>::init(tiny(), 3).unwrap();
        let toks = TokenSequence::mono(vec![2, 2]);
        let e = w.embed(&toks).unwrap();
        let pe = w.positional().to_vec();
        for i in 0..4 {
            let diff = (e[4 + i] - e[i]) - (pe[4 + i] - pe[i]);
            assert!(diff.abs() < 1e-12);
        }
        w.embed[0].data_mut().iter_mut().for_each(|x| *x = 0.0);
        assert_eq!(w.embed(&toks).unwrap(), pe[..8].to_vec());
        assert!(matches!(w.embed(&TokenSequence::mono(vec![5])), Err(Error::Index(_))));
    }

    #[test]
    fn two_codebook_embedding_sums() {
        let cfg = DecoderConfig { num_codebooks: 2, ..tiny() };
        let mut w = DecoderWeights::<f64>::init(cfg, 0).unwrap();
        for (k, table) in w.embed.iter_mut().enumerate() {
            for (i, x) in table.data_mut().iter_mut().enumerate() {
                *x = (k * 100 + i) as f64;
            }
        }
        let toks = TokenSequence::new(1, 2, vec![1, 3]).unwrap();
        let e = w.embed(&toks).unwrap();
        // row 1 of table 0 is 4..8, row 3 of table 1 is 112..116; position 0 is [0,1,0,1]
        assert_eq!(e, vec![116.0, 119.0, 120.0, 123.0]);
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let w = DecoderWeights::<f32>::init(tiny(), 0).unwrap();
        let toks = TokenSequence::mono(vec![0; 17]);
        assert!(matches!(w.forward(&toks), Err(Error::Contract(_))));
    }
}
