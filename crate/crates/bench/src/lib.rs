//! Shared fixtures for the benchmarks.

use hetadapt_core::decoder::DecoderConfig;
use hetadapt_core::hetadapter::{attach, AdaptedModel};
use hetadapt_core::sequence::{assemble, eval_mask, AssembledSequence};
use hetadapt_core::synthdata::{gen_record, TaskSpec};
use hetadapt_core::rng::{domain, keyed};
use hetadapt_core::DecoderWeights;

/// Toy decoder with adapters of width `m` and one assembled pattern-1
/// sequence of `frames` target frames.
pub fn fixture(frames: usize, m: usize) -> (AdaptedModel<f32>, AssembledSequence) {
    let cfg = DecoderConfig { max_seq_len: 2 * frames, ..DecoderConfig::toy() };
    let base = DecoderWeights::<f32>::init(cfg, 0).expect("valid toy config");
    let mut model = attach(base, m, 0).expect("adapter attach");
    for layer in model.gates.gates.iter_mut() {
        for g in layer.iter_mut() {
            g.data_mut()[0] = 0.1;
        }
    }
    let (x, c) = gen_record(&TaskSpec::affine(cfg.vocab_size, 1, 1, 0, 0), frames, 0).expect("record");
    let mask = eval_mask(1, frames, &mut keyed(0, domain::EVAL_MASK, 0)).expect("mask");
    let prefix = hetadapt_core::sequence::build_prefix(&x, &c, &mask).expect("prefix");
    (model, assemble(&prefix, &x, &mask).expect("assemble"))
}
