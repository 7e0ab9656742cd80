//! Autoregressive pretraining of the base decoder and adapter-only
//! fine-tuning on the masked prefix/prediction objective.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, Entry, Values, ADAPTER_CONFIG_ENTRY, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, DECODER_CONFIG_ENTRY};
pub use config::{Phase, PretrainLayout, TrainConfig};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::{optimizer_step, warmup_lr, AdamConfig, AdamState, Scalar, Tape, Tensor};
use crate::decoder::{forward_tape, DecoderConfig, DecoderWeights, WeightVars};
use crate::error::{contract, Error, Result};
use crate::hetadapter::{attach, AdaptedModel};
use crate::rng::{domain, keyed};
use crate::sequence::{assemble, build_prefix, sample_mask, AssembledSequence, Dataset, TokenSequence};

/// Per-step mean batch losses of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// `|g|` for every layer and type at logged steps.
#[derive(Clone, Debug, PartialEq)]
pub struct GateLog {
    pub entries: Vec<(usize, Vec<[f64; 4]>)>,
}

impl GateLog {
    fn record<F: Scalar>(&mut self, step: usize, model: &AdaptedModel<F>) {
        let values = model
            .gates
            .values()
            .iter()
            .map(|l| l.map(|g| g.as_f64().abs()))
            .collect();
        self.entries.push((step, values));
    }

    /// Largest `|g|` of one zero-based type over all layers in the last entry.
    pub fn final_max(&self, kind: usize) -> f64 {
        self.entries
            .last()
            .map_or(0.0, |(_, layers)| layers.iter().map(|l| l[kind]).fold(0.0, f64::max))
    }

    /// Long-format CSV: `step,layer,type,abs_gate` with one-based types.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,layer,type,abs_gate\n");
        for (step, layers) in &self.entries {
            for (l, gates) in layers.iter().enumerate() {
                for (r, g) in gates.iter().enumerate() {
                    out.push_str(&format!("{step},{l},{},{g:e}\n", r + 1));
                }
            }
        }
        out
    }
}

/// Number of optimizer steps a config implies for `records` training pairs.
pub fn total_steps(cfg: &TrainConfig, records: usize) -> usize {
    let per_epoch = records.div_ceil(cfg.batch_size);
    let steps = cfg.epochs * per_epoch;
    if cfg.max_steps > 0 {
        steps.min(cfg.max_steps)
    } else {
        steps
    }
}

/// Runs `per_item` on a batch, possibly in parallel, and sums results in
/// batch order.
fn batch_grads<T, G>(items: &[T], threads: usize, per_item: G) -> Result<(f64, Vec<Vec<f32>>)>
where
    T: Sync,
    G: Fn(&T) -> Result<(f64, Vec<Vec<f32>>)> + Sync + Send,
{
    let results: Vec<Result<(f64, Vec<Vec<f32>>)>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| items.par_iter().map(&per_item).collect())
    } else {
        items.iter().map(&per_item).collect()
    };
    let mut loss = 0.0;
    let mut total: Option<Vec<Vec<f32>>> = None;
    for r in results {
        let (l, g) = r?;
        loss += l;
        match &mut total {
            None => total = Some(g),
            Some(t) => {
                for (a, b) in t.iter_mut().zip(&g) {
                    a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
                }
            }
        }
    }
    let n = items.len() as f32;
    let mut total = total.unwrap_or_default();
    total.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x /= n));
    Ok((loss / items.len() as f64, total))
}

/// Visits `(epoch, step, batch indices)` for a config and dataset size.
fn schedule(cfg: &TrainConfig, records: usize) -> Vec<(usize, Vec<usize>)> {
    let total = total_steps(cfg, records);
    let mut out = Vec::with_capacity(total);
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..records).collect();
        order.shuffle(&mut keyed(cfg.seed, domain::SHUFFLE, epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            if out.len() == total {
                break 'epochs;
            }
            out.push((epoch, chunk.to_vec()));
        }
    }
    out
}

/// Next-token loss over a target sequence; returns loss and weight gradients
/// in [`DecoderWeights::named`] order.
pub fn next_token_grads(w: &DecoderWeights<f32>, x: &TokenSequence) -> Result<(f64, Vec<Vec<f32>>)> {
    contract!(x.frames() >= 2, "next-token loss needs at least two frames");
    let mut tape = Tape::new();
    let wv = WeightVars::register(&mut tape, w);
    let logits = forward_tape(&mut tape, w, &wv, x, None)?;
    let mut loss = None;
    for (k, &lg) in logits.iter().enumerate() {
        let picks: Vec<(usize, usize)> = (0..x.frames() - 1).map(|p| (p, x.frame(p + 1)[k] as usize)).collect();
        let ce = tape.cross_entropy(lg, &picks)?;
        loss = Some(match loss {
            None => ce,
            Some(t) => tape.add(t, ce)?,
        });
    }
    let loss = tape.scale(loss.expect("one codebook"), 1.0 / logits.len() as f32);
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss)[0] as f64, wv.flat().into_iter().map(|v| grads.wrt(v)).collect()))
}

/// Record `index` laid out for pretraining.
pub fn pretrain_example(layout: PretrainLayout, data: &Dataset, index: usize) -> Result<TokenSequence> {
    let (x, c) = &data.records[index];
    Ok(match layout {
        PretrainLayout::Target => x.clone(),
        PretrainLayout::Paired => {
            let mut ids = c.ids().to_vec();
            ids.extend_from_slice(x.ids());
            TokenSequence::new(2 * x.frames(), x.codebooks(), ids)?
        }
    })
}

/// Trains a fresh decoder on next-token prediction over the dataset targets.
pub fn pretrain_base(dcfg: DecoderConfig, cfg: &TrainConfig, data: &Dataset) -> Result<(DecoderWeights<f32>, TrainReport)> {
    cfg.validate()?;
    contract!(!data.is_empty(), "pretraining needs a non-empty dataset");
    contract!(
        dcfg.vocab_size >= data.vocab && dcfg.num_codebooks == data.codebooks,
        "decoder V={} n={} does not match dataset V={} n={}",
        dcfg.vocab_size,
        dcfg.num_codebooks,
        data.vocab,
        data.codebooks
    );
    let mut w = DecoderWeights::<f32>::init(dcfg, cfg.seed)?;
    w.set_requires_grad(true);
    let mut adam = AdamState::new(AdamConfig::default());
    let plan = schedule(cfg, data.len());
    let warmup = (cfg.warmup_fraction * plan.len() as f64).round() as usize;
    let mut losses = Vec::with_capacity(plan.len());
    for (step, (_, batch)) in plan.iter().enumerate() {
        let (loss, grads) = batch_grads(batch, cfg.threads, |&i| next_token_grads(&w, &pretrain_example(cfg.layout, data, i)?))?;
        let mut params: Vec<&mut Tensor<f32>> = w.named_mut().into_iter().map(|(_, t)| t).collect();
        optimizer_step(&mut params, &grads, &mut adam, warmup_lr(cfg.lr, step, warmup))?;
        losses.push(loss);
    }
    w.set_requires_grad(false);
    Ok((w, TrainReport { steps: plan.len(), losses }))
}

/// The assembled training sequence of record `index` in `epoch`, with a
/// freshly sampled mask.
pub fn training_sequence(cfg: &TrainConfig, data: &Dataset, epoch: usize, index: usize) -> Result<AssembledSequence> {
    let (x, c) = &data.records[index];
    let stream = (epoch as u64) * data.len() as u64 + index as u64;
    let mask = sample_mask(x.frames(), cfg.mask_lo, cfg.mask_hi, &mut keyed(cfg.seed, domain::TRAIN_MASK, stream))?;
    assemble(&build_prefix(x, c, &mask)?, x, &mask)
}

/// Callback invoked after each optimizer step with `(step, mean loss)`.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, f64);

/// Trains adapters and gates of `base` with everything else frozen.
pub fn peft_finetune(
    base: &DecoderWeights<f32>,
    width: usize,
    cfg: &TrainConfig,
    data: &Dataset,
    mut hook: Option<StepHook<'_>>,
) -> Result<(AdaptedModel<f32>, GateLog, TrainReport)> {
    cfg.validate()?;
    contract!(!data.is_empty(), "fine-tuning needs a non-empty dataset");
    let bc = base.config;
    contract!(
        bc.vocab_size >= data.vocab && bc.num_codebooks == data.codebooks && 2 * data.frames <= bc.max_seq_len,
        "base (V={}, n={}, max_seq_len={}) cannot take dataset (V={}, n={}, T={})",
        bc.vocab_size,
        bc.num_codebooks,
        bc.max_seq_len,
        data.vocab,
        data.codebooks,
        data.frames
    );
    let mut model = attach(base.clone(), width, cfg.seed)?;
    let mut adam = AdamState::new(AdamConfig::default());
    let plan = schedule(cfg, data.len());
    let warmup = (cfg.warmup_fraction * plan.len() as f64).round() as usize;
    let mut log = GateLog { entries: Vec::new() };
    log.record(0, &model);
    let mut losses = Vec::with_capacity(plan.len());
    for (step, (epoch, batch)) in plan.iter().enumerate() {
        let (loss, grads) = batch_grads(batch, cfg.threads, |&i| {
            let seq = training_sequence(cfg, data, *epoch, i)?;
            model.loss_and_grads(&seq)
        })?;
        let mut params: Vec<&mut Tensor<f32>> = model.trainable_mut().into_iter().map(|(_, t)| t).collect();
        optimizer_step(&mut params, &grads, &mut adam, warmup_lr(cfg.lr, step, warmup))?;
        losses.push(loss);
        let done = step + 1;
        if done % cfg.gate_log_every == 0 || done == plan.len() {
            log.record(done, &model);
        }
        if let Some(h) = hook.as_mut() {
            h(done, loss);
        }
    }
    Ok((model, log, TrainReport { steps: plan.len(), losses }))
}
