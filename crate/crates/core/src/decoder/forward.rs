//! Recorded (differentiable) forward pass.

use super::{DecoderWeights, LN_EPS};
use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{contract, Result};
use crate::sequence::{prediction_picks, TokenSequence};

/// Tape handles of one block's weights.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub ln1: (Var, Var),
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2: (Var, Var),
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape handles of all decoder weights.
#[derive(Clone, Debug)]
pub struct WeightVars {
    pub embed: Vec<Var>,
    pub layers: Vec<LayerVars>,
    pub lnf: (Var, Var),
    pub heads: Vec<Var>,
}

impl WeightVars {
    /// Records every weight as a leaf, honouring each tensor's grad flag.
    pub fn register<F: Scalar>(tape: &mut Tape<F>, w: &DecoderWeights<F>) -> Self {
        let embed = w.embed.iter().map(|t| tape.leaf(t)).collect();
        let layers = w
            .layers
            .iter()
            .map(|l| LayerVars {
                ln1: (tape.leaf(&l.ln1_gamma), tape.leaf(&l.ln1_beta)),
                wq: tape.leaf(&l.wq),
                wk: tape.leaf(&l.wk),
                wv: tape.leaf(&l.wv),
                wo: tape.leaf(&l.wo),
                ln2: (tape.leaf(&l.ln2_gamma), tape.leaf(&l.ln2_beta)),
                w1: tape.leaf(&l.w1),
                b1: tape.leaf(&l.b1),
                w2: tape.leaf(&l.w2),
                b2: tape.leaf(&l.b2),
            })
            .collect();
        let lnf = (tape.leaf(&w.lnf_gamma), tape.leaf(&w.lnf_beta));
        let heads = w.heads.iter().map(|t| tape.leaf(t)).collect();
        Self { embed, layers, lnf, heads }
    }

    /// Inverse of [`Self::flat`] for a decoder of `layers` blocks and `codebooks` heads.
    pub fn from_flat(vars: &[Var], layers: usize, codebooks: usize) -> Result<Self> {
        contract!(
            vars.len() == 2 * codebooks + 12 * layers + 2,
            "{} handles for {layers} layers and {codebooks} codebooks",
            vars.len()
        );
        let embed = vars[..codebooks].to_vec();
        let layers_v = vars[codebooks..codebooks + 12 * layers]
            .chunks_exact(12)
            .map(|c| LayerVars {
                ln1: (c[0], c[1]),
                wq: c[2],
                wk: c[3],
                wv: c[4],
                wo: c[5],
                ln2: (c[6], c[7]),
                w1: c[8],
                b1: c[9],
                w2: c[10],
                b2: c[11],
            })
            .collect();
        let rest = &vars[codebooks + 12 * layers..];
        Ok(Self {
            embed,
            layers: layers_v,
            lnf: (rest[0], rest[1]),
            heads: rest[2..].to_vec(),
        })
    }

    /// Handles in the same order as [`DecoderWeights::named`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = self.embed.clone();
        for l in &self.layers {
            out.extend([
                l.ln1.0, l.ln1.1, l.wq, l.wk, l.wv, l.wo, l.ln2.0, l.ln2.1, l.w1, l.b1, l.w2, l.b2,
            ]);
        }
        out.extend([self.lnf.0, self.lnf.1]);
        out.extend(self.heads.iter().copied());
        out
    }
}

/// Adapter handles for a recorded forward pass: per layer four `m×d`
/// banks and a length-4 gate vector, plus a zero-based bank index per row.
#[derive(Clone, Debug)]
pub struct AdapterVars<'a> {
    pub banks: Vec<[Var; 4]>,
    pub gates: Vec<Var>,
    pub routes: &'a [u8],
}

/// Records the decoder on `tokens`; returns one `S×V` logit node per codebook.
pub fn forward_tape<F: Scalar>(
    tape: &mut Tape<F>,
    w: &DecoderWeights<F>,
    wv: &WeightVars,
    tokens: &TokenSequence,
    adapter: Option<&AdapterVars<'_>>,
) -> Result<Vec<Var>> {
    w.check_tokens(tokens)?;
    let cfg = w.config;
    let (seq, d) = (tokens.frames(), cfg.model_dim);
    contract!(seq >= 1, "empty token sequence");
    if let Some(a) = adapter {
        contract!(
            a.banks.len() == cfg.num_layers && a.gates.len() == cfg.num_layers,
            "adapter has {} layers, decoder {}",
            a.banks.len(),
            cfg.num_layers
        );
        contract!(a.routes.len() == seq, "{} routes for {seq} positions", a.routes.len());
    }
    let eps = F::lit(LN_EPS);

    let pos = tape.input(vec![seq, d], w.positional()[..seq * d].to_vec(), false)?;
    let mut x = pos;
    for k in 0..cfg.num_codebooks {
        let ids: Vec<usize> = (0..seq).map(|t| tokens.frame(t)[k] as usize).collect();
        let e = tape.gather_rows(wv.embed[k], &ids)?;
        x = tape.add(x, e)?;
    }

    for (l, lv) in wv.layers.iter().enumerate() {
        let h = tape.layer_norm(x, lv.ln1.0, lv.ln1.1, eps)?;
        let q = tape.matmul(h, lv.wq)?;
        let k = tape.matmul(h, lv.wk)?;
        let v = tape.matmul(h, lv.wv)?;
        let att = tape.causal_attention(q, k, v, cfg.num_heads)?;
        let mut s = tape.matmul(att, lv.wo)?;
        if let Some(a) = adapter {
            let mut keys = Vec::with_capacity(4);
            let mut values = Vec::with_capacity(4);
            for &bank in &a.banks[l] {
                keys.push(tape.matmul(bank, lv.wk)?);
                values.push(tape.matmul(bank, lv.wv)?);
            }
            let cross = tape.routed_attention(q, &keys, &values, a.routes, cfg.num_heads)?;
            let u = tape.matmul(cross, lv.wo)?;
            s = tape.gated_add(s, u, a.gates[l], a.routes)?;
        }
        x = tape.add(x, s)?;
        let h2 = tape.layer_norm(x, lv.ln2.0, lv.ln2.1, eps)?;
        let f1 = tape.matmul(h2, lv.w1)?;
        let f1 = tape.add_row_bias(f1, lv.b1)?;
        let f1 = tape.gelu(f1);
        let f2 = tape.matmul(f1, lv.w2)?;
        let f2 = tape.add_row_bias(f2, lv.b2)?;
        x = tape.add(x, f2)?;
    }

    let hf = tape.layer_norm(x, wv.lnf.0, wv.lnf.1, eps)?;
    wv.heads.iter().map(|&head| tape.matmul(hf, head)).collect()
}

/// Prediction-area cross-entropy of an assembled `2T`-frame sequence,
/// averaged over frames and codebooks.
pub fn prediction_loss_tape<F: Scalar>(
    tape: &mut Tape<F>,
    logits: &[Var],
    target: &TokenSequence,
) -> Result<Var> {
    contract!(logits.len() == target.codebooks(), "one logit block per codebook required");
    let mut total: Option<Var> = None;
    for (k, &lg) in logits.iter().enumerate() {
        let ce = tape.cross_entropy(lg, &prediction_picks(target, k))?;
        total = Some(match total {
            None => ce,
            Some(t) => tape.add(t, ce)?,
        });
    }
    let total = total.expect("at least one codebook");
    Ok(if logits.len() == 1 {
        total
    } else {
        tape.scale(total, F::lit(1.0 / logits.len() as f64))
    })
}
