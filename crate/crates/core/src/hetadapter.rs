//! Four routed, zero-gated adapter banks per layer on top of a frozen decoder.
//!
//! Each position picks one bank from whether it lies in the prefix or the
//! prediction area and whether its frame is masked. The position's
//! self-attention query attends over the bank rows projected by the layer's
//! own `W_k`/`W_v`; the result goes through the layer's `W_o` and is added to
//! the self-attention output scaled by the bank's gate.

use rand_distr::{Distribution, Normal};

use crate::autodiff::{finite_diff_check, softmax_in_place, GradCheckReport, Gradients, Scalar, Tape, Tensor, Var};
use crate::decoder::{
    forward_tape, generate, prediction_loss_tape, AdapterCache, AdapterVars, DecodeMode, DecoderWeights,
    LayerWeights, Logits, Session, WeightVars,
};
use crate::error::{contract, Error, Result};
use crate::rng::{domain, keyed};
use crate::sequence::{AssembledSequence, FrameMask, TokenSequence};

pub const ADAPTER_TYPES: usize = 4;
pub const ADAPTER_INIT_STD: f64 = 0.02;

/// Adapter type (1..=4) of one-based position `t` in a `2T` sequence.
pub fn route(t: usize, prefix_len: usize, mask: &FrameMask) -> Result<u8> {
    contract!(mask.len() == prefix_len, "mask of {} for prefix length {prefix_len}", mask.len());
    contract!(
        t >= 1 && t <= 2 * prefix_len,
        "position {t} outside 1..={}",
        2 * prefix_len
    );
    Ok(if t <= prefix_len {
        if mask.is_masked(t - 1) {
            2
        } else {
            1
        }
    } else if mask.is_masked(t - prefix_len - 1) {
        4
    } else {
        3
    })
}

/// Zero-based bank index for each of the `2T` positions.
pub fn route_indices(prefix_len: usize, mask: &FrameMask) -> Result<Vec<u8>> {
    (1..=2 * prefix_len).map(|t| route(t, prefix_len, mask).map(|r| r - 1)).collect()
}

/// Multi-head cross-attention of one hidden row over an `m×d` bank,
/// reusing the layer's query/key/value/output projections.
pub fn adapter_cross_attention<F: Scalar>(h: &[F], bank: &Tensor<F>, layer: &LayerWeights<F>, heads: usize) -> Result<Vec<F>> {
    let (m, d) = bank.dims2()?;
    if h.len() != d || layer.wq.shape() != [d, d] {
        return Err(Error::Shape(format!("hidden of {} against bank width {d}", h.len())));
    }
    contract!(m >= 1, "adapter bank needs at least one row");
    contract!(heads >= 1 && d % heads == 0, "{d} columns over {heads} heads");
    let proj = |x: &[F], w: &Tensor<F>| -> Vec<F> {
        (0..d).map(|j| (0..d).map(|i| x[i] * w.data()[i * d + j]).sum()).collect()
    };
    let q = proj(h, &layer.wq);
    let rows: Vec<&[F]> = (0..m).map(|j| bank.row(j)).collect();
    let keys: Vec<Vec<F>> = rows.iter().map(|a| proj(a, &layer.wk)).collect();
    let values: Vec<Vec<F>> = rows.iter().map(|a| proj(a, &layer.wv)).collect();
    let dh = d / heads;
    let scale = F::lit(1.0 / (dh as f64).sqrt());
    let mut concat = vec![F::zero(); d];
    for hd in 0..heads {
        let r = hd * dh..(hd + 1) * dh;
        let mut p: Vec<F> = keys
            .iter()
            .map(|k| q[r.clone()].iter().zip(&k[r.clone()]).map(|(&a, &b)| a * b).sum::<F>() * scale)
            .collect();
        softmax_in_place(&mut p);
        for (pj, v) in p.iter().zip(&values) {
            for c in r.clone() {
                concat[c] += *pj * v[c];
            }
        }
    }
    Ok(proj(&concat, &layer.wo))
}

/// `s + g·u`.
pub fn apply_gate<F: Scalar>(s: &[F], u: &[F], g: F) -> Result<Vec<F>> {
    if s.len() != u.len() {
        return Err(Error::Shape(format!("gate operands of {} and {}", s.len(), u.len())));
    }
    Ok(s.iter().zip(u).map(|(&a, &b)| a + g * b).collect())
}

/// Trainable values added per model: `4·L·m·d` adapter entries plus `4·L` gates.
pub fn adapter_param_count(layers: usize, width: usize, dim: usize) -> usize {
    ADAPTER_TYPES * layers * width * dim + ADAPTER_TYPES * layers
}

/// `banks[l][r]` is the `m×d` matrix of layer `l`, zero-based type `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBank<F> {
    pub width: usize,
    pub banks: Vec<[Tensor<F>; 4]>,
}

/// `gates[l][r]` is a rank-0 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSet<F> {
    pub gates: Vec<[Tensor<F>; 4]>,
}

impl<F: Scalar> GateSet<F> {
    pub fn zeros(layers: usize) -> Self {
        let zero = || Tensor::scalar(F::zero()).with_grad();
        Self {
            gates: (0..layers).map(|_| [zero(), zero(), zero(), zero()]).collect(),
        }
    }

    pub fn values(&self) -> Vec<[F; 4]> {
        self.gates
            .iter()
            .map(|l| [l[0].data()[0], l[1].data()[0], l[2].data()[0], l[3].data()[0]])
            .collect()
    }
}

pub fn adapter_name(layer: usize, kind: usize) -> String {
    format!("adapter.layer{layer}.type{}", kind + 1)
}

pub fn gate_name(layer: usize, kind: usize) -> String {
    format!("gate.layer{layer}.type{}", kind + 1)
}

/// Frozen decoder plus trainable adapter banks and gates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedModel<F> {
    pub base: DecoderWeights<F>,
    pub adapters: AdapterBank<F>,
    pub gates: GateSet<F>,
}

/// Gradients of every trainable tensor, in [`AdaptedModel::trainable`] order.
pub type TrainableGrads<F> = Vec<Vec<F>>;

/// Tape handles of one recorded adapted forward pass.
pub struct Recorded {
    pub logits: Vec<Var>,
    pub weights: WeightVars,
    pub banks: Vec<[Var; 4]>,
    pub gates: Vec<Var>,
}

/// Freezes `base` and adds banks drawn from `N(0, 0.02²)` with zero gates.
pub fn attach<F: Scalar>(mut base: DecoderWeights<F>, width: usize, seed: u64) -> Result<AdaptedModel<F>> {
    contract!(width >= 1, "adapter width must be at least 1");
    base.set_requires_grad(false);
    let d = base.config.model_dim;
    let dist = Normal::new(0.0, ADAPTER_INIT_STD).expect("positive std");
    let banks = (0..base.config.num_layers)
        .map(|l| {
            std::array::from_fn(|r| {
                let mut rng = keyed(seed, domain::INIT, (1 << 32) + (l * ADAPTER_TYPES + r) as u64);
                let data = (0..width * d).map(|_| F::lit(dist.sample(&mut rng))).collect();
                Tensor::new(vec![width, d], data).expect("numel matches").with_grad()
            })
        })
        .collect();
    let gates = GateSet::zeros(base.config.num_layers);
    Ok(AdaptedModel {
        base,
        adapters: AdapterBank { width, banks },
        gates,
    })
}

impl<F: Scalar> AdaptedModel<F> {
    pub fn width(&self) -> usize {
        self.adapters.width
    }

    /// Trainable tensors with their checkpoint names: adapters, then gates.
    pub fn trainable(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (l, layer) in self.adapters.banks.iter().enumerate() {
            for (r, t) in layer.iter().enumerate() {
                out.push((adapter_name(l, r), t));
            }
        }
        for (l, layer) in self.gates.gates.iter().enumerate() {
            for (r, t) in layer.iter().enumerate() {
                out.push((gate_name(l, r), t));
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        for (l, layer) in self.adapters.banks.iter_mut().enumerate() {
            for (r, t) in layer.iter_mut().enumerate() {
                out.push((adapter_name(l, r), t));
            }
        }
        for (l, layer) in self.gates.gates.iter_mut().enumerate() {
            for (r, t) in layer.iter_mut().enumerate() {
                out.push((gate_name(l, r), t));
            }
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn adapter_cache(&self, routes: Vec<u8>) -> Result<AdapterCache<F>> {
        let banks: Vec<[&Tensor<F>; 4]> = self
            .adapters
            .banks
            .iter()
            .map(|b| [&b[0], &b[1], &b[2], &b[3]])
            .collect();
        AdapterCache::new(&self.base, &banks, &self.gates.values(), routes)
    }

    /// Logits over an assembled sequence, routed by its mask.
    pub fn forward(&self, seq: &AssembledSequence) -> Result<Logits<F>> {
        let cache = self.adapter_cache(route_indices(seq.prefix_len, &seq.mask)?)?;
        Session::new(&self.base, Some(&cache))?.run(&seq.tokens)
    }

    /// Autoregressively fills the prediction area after `prefix`.
    pub fn decode(&self, prefix: &TokenSequence, mask: &FrameMask, mode: DecodeMode) -> Result<TokenSequence> {
        let cache = self.adapter_cache(route_indices(prefix.frames(), mask)?)?;
        generate(&self.base, Some(&cache), prefix, prefix.frames(), mode)
    }

    /// Records the adapted forward pass of `seq` on `tape`.
    pub fn record(&self, tape: &mut Tape<F>, seq: &AssembledSequence, routes: &[u8]) -> Result<Recorded> {
        let weights = WeightVars::register(tape, &self.base);
        let banks: Vec<[Var; 4]> = self
            .adapters
            .banks
            .iter()
            .map(|b| std::array::from_fn(|r| tape.leaf(&b[r])))
            .collect();
        let mut gates = Vec::with_capacity(self.gates.gates.len());
        for layer in &self.gates.gates {
            let vals = layer.iter().map(|g| g.data()[0]).collect();
            gates.push(tape.input(vec![4], vals, layer.iter().any(Tensor::requires_grad))?);
        }
        let hook = AdapterVars {
            banks: banks.clone(),
            gates: gates.clone(),
            routes,
        };
        let logits = forward_tape(tape, &self.base, &weights, &seq.tokens, Some(&hook))?;
        Ok(Recorded {
            logits,
            weights,
            banks,
            gates,
        })
    }

    /// Prediction-area loss of `seq` and gradients of the trainable tensors.
    pub fn loss_and_grads(&self, seq: &AssembledSequence) -> Result<(f64, TrainableGrads<F>)> {
        let routes = route_indices(seq.prefix_len, &seq.mask)?;
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, seq, &routes)?;
        let target = seq.target();
        let loss = prediction_loss_tape(&mut tape, &rec.logits, &target)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss)[0].as_f64(), self.collect_grads(&grads, &rec)))
    }

    fn collect_grads(&self, grads: &Gradients<F>, rec: &Recorded) -> TrainableGrads<F> {
        let mut out = Vec::new();
        for layer in &rec.banks {
            for &v in layer {
                out.push(grads.wrt(v));
            }
        }
        for &g in &rec.gates {
            out.extend(grads.wrt(g).into_iter().map(|x| vec![x]));
        }
        out
    }
}

/// Finite-difference check of the adapted model's prediction-area loss
/// with respect to adapters and gates, and optionally every base weight.
pub fn gradcheck_adapted(
    model: &AdaptedModel<f64>,
    seq: &AssembledSequence,
    eps: f64,
    include_base: bool,
) -> Result<GradCheckReport> {
    let routes = route_indices(seq.prefix_len, &seq.mask)?;
    let target = seq.target();
    let cfg = model.base.config;
    let mut params: Vec<Tensor<f64>> = Vec::new();
    if include_base {
        params.extend(model.base.named().into_iter().map(|(_, t)| t.clone()));
    }
    let n_base = params.len();
    for layer in &model.adapters.banks {
        params.extend(layer.iter().cloned());
    }
    for g in model.gates.values() {
        params.push(Tensor::new(vec![4], g.to_vec())?);
    }
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let weights = if include_base {
            WeightVars::from_flat(&vars[..n_base], cfg.num_layers, cfg.num_codebooks)?
        } else {
            WeightVars::register(tape, &model.base)
        };
        let banks: Vec<[Var; 4]> = vars[n_base..n_base + 4 * cfg.num_layers]
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        let hook = AdapterVars {
            banks,
            gates: vars[n_base + 4 * cfg.num_layers..].to_vec(),
            routes: &routes,
        };
        let logits = forward_tape(tape, &model.base, &weights, &seq.tokens, Some(&hook))?;
        prediction_loss_tape(tape, &logits, &target)
    };
    finite_diff_check(f, &params, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;

    #[test]
    fn route_examples() {
        let mask = FrameMask::from_indices(5, &[2, 3]).unwrap();
        assert_eq!(route(1, 5, &mask).unwrap(), 1);
        assert_eq!(route(3, 5, &mask).unwrap(), 2);
        assert_eq!(route(9, 5, &mask).unwrap(), 4);
        assert_eq!(route(6, 5, &mask).unwrap(), 3);
        assert!(matches!(route(0, 5, &mask), Err(Error::Contract(_))));
        assert!(matches!(route(11, 5, &mask), Err(Error::Contract(_))));
    }

    #[test]
    fn param_count_examples() {
        // 4·2·4·8 + 4·2
        assert_eq!(adapter_param_count(2, 4, 8), 264);
        let cfg = DecoderConfig { num_layers: 2, model_dim: 8, num_heads: 2, ..DecoderConfig::toy() };
        let m = attach(DecoderWeights::<f32>::init(cfg, 0).unwrap(), 4, 0).unwrap();
        assert_eq!(m.trainable_count(), 264);
        assert_eq!(m.trainable().len(), 16);
    }

    #[test]
    fn gate_examples() {
        let s = [1.0f64, -2.0, 0.5];
        let u = [0.3, 0.7, -1.1];
        assert_eq!(apply_gate(&s, &u, 0.0).unwrap(), s.to_vec());
        let sum: Vec<f64> = s.iter().zip(&u).map(|(a, b)| a + b).collect();
        assert_eq!(apply_gate(&s, &u, 1.0).unwrap(), sum);
        let g = 0.37;
        let one = apply_gate(&s, &u, g).unwrap();
        let two = apply_gate(&s, &u, 2.0 * g).unwrap();
        for i in 0..3 {
            assert!(((two[i] - s[i]) - 2.0 * (one[i] - s[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn single_slot_and_zero_bank() {
        let cfg = DecoderConfig { num_layers: 1, model_dim: 8, num_heads: 2, ..DecoderConfig::toy() };
        let w = DecoderWeights::<f64>::init(cfg, 4).unwrap();
        let h: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let zero = Tensor::zeros(vec![3, 8]);
        assert!(adapter_cross_attention(&h, &zero, &w.layers[0], 2).unwrap().iter().all(|&x| x == 0.0));

        let a = Tensor::new(vec![1, 8], (0..8).map(|i| (i as f64).sin()).collect()).unwrap();
        let u = adapter_cross_attention(&h, &a, &w.layers[0], 2).unwrap();
        let d = 8;
        let wv = w.layers[0].wv.data();
        let wo = w.layers[0].wo.data();
        let v: Vec<f64> = (0..d).map(|j| (0..d).map(|i| a.data()[i] * wv[i * d + j]).sum()).collect();
        let expect: Vec<f64> = (0..d).map(|j| (0..d).map(|i| v[i] * wo[i * d + j]).sum()).collect();
        for (x, y) in u.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
