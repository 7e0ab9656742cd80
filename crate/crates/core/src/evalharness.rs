//! Token and symbolic metrics, and mask-pattern evaluation runs.

use rayon::prelude::*;

use crate::decoder::{generate, DecodeMode, DecoderWeights};
use crate::error::{contract, Error, Result};
use crate::hetadapter::AdaptedModel;
use crate::rng::{domain, keyed};
use crate::sequence::{build_prefix, eval_mask, Dataset, FrameMask, TokenId, TokenSequence};
use crate::symbolic::{ChordQuality, ChordSpan};
use crate::synthdata::{oracle_inpaint, token_pitch_classes, TaskKind, TaskSpec};

/// Frames per second used when token frames are read as time.
pub const FRAME_RATE: f64 = 50.0;
/// Grid resolution of [`chord_recall`] in seconds.
pub const CHORD_RESOLUTION: f64 = 0.02;
pub const CSV_HEADER: &str = "model,task,pattern,mode,metric,value,n,seed";

/// Fraction of masked frames whose every codebook token matches.
pub fn masked_accuracy(predicted: &TokenSequence, reference: &TokenSequence, mask: &FrameMask) -> Result<f64> {
    contract!(
        predicted.frames() == reference.frames() && predicted.codebooks() == reference.codebooks(),
        "prediction {}x{} vs reference {}x{}",
        predicted.frames(),
        predicted.codebooks(),
        reference.frames(),
        reference.codebooks()
    );
    contract!(mask.len() == reference.frames(), "mask length {} for {} frames", mask.len(), reference.frames());
    let idx = mask.masked_indices();
    contract!(!idx.is_empty(), "accuracy over an empty mask is undefined");
    let hits = idx.iter().filter(|&&t| predicted.frame(t) == reference.frame(t)).count();
    Ok(hits as f64 / idx.len() as f64)
}

/// Mean per-frame cosine; a pair of silent frames counts 1, one silent frame 0.
pub fn chroma_cosine(a: &[[f64; 12]], b: &[[f64; 12]]) -> Result<f64> {
    contract!(a.len() == b.len(), "chroma lengths {} and {} differ", a.len(), b.len());
    if a.is_empty() {
        return Ok(1.0);
    }
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            match (nx == 0.0, ny == 0.0) {
                (true, true) => 1.0,
                (true, false) | (false, true) => 0.0,
                _ => x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny),
            }
        })
        .sum();
    Ok(total / a.len() as f64)
}

fn label_at(spans: &[ChordSpan], t: f64) -> Option<&ChordSpan> {
    spans.iter().find(|s| s.contains(t))
}

/// Share of grid points with a non-N reference chord where the prediction
/// carries the same label. Points are interval midpoints.
pub fn chord_recall(predicted: &[ChordSpan], reference: &[ChordSpan], resolution: f64) -> Result<f64> {
    contract!(resolution > 0.0 && resolution.is_finite(), "resolution must be positive");
    let end = reference.iter().chain(predicted).map(|s| s.end).fold(0.0, f64::max);
    let points = (end / resolution).ceil() as usize;
    let (mut hit, mut total) = (0usize, 0usize);
    for i in 0..points {
        let t = (i as f64 + 0.5) * resolution;
        let Some(r) = label_at(reference, t).filter(|r| r.quality != ChordQuality::N) else {
            continue;
        };
        total += 1;
        if label_at(predicted, t).is_some_and(|p| p.same_label(r)) {
            hit += 1;
        }
    }
    contract!(total > 0, "reference has no chords; recall is undefined");
    Ok(hit as f64 / total as f64)
}

/// Binary chroma of a mono chord-cycle token stream.
pub fn token_chroma(tokens: &TokenSequence) -> Vec<[f64; 12]> {
    (0..tokens.frames())
        .map(|t| {
            let mut row = [0.0; 12];
            for &tok in tokens.frame(t) {
                for pc in token_pitch_classes(tok) {
                    row[pc as usize] = 1.0;
                }
            }
            row
        })
        .collect()
}

/// Per-frame triad estimate from the pitch classes within `radius` frames:
/// the major or minor triad covering the most of them, ties to the lower
/// root with major first; no-chord when nothing sounds.
pub fn estimate_chords(tokens: &TokenSequence, radius: usize) -> Vec<Option<(u8, ChordQuality)>> {
    let chroma = token_chroma(tokens);
    let n = chroma.len();
    (0..n)
        .map(|t| {
            let mut active = [false; 12];
            for row in &chroma[t.saturating_sub(radius)..(t + radius + 1).min(n)] {
                for (a, &v) in active.iter_mut().zip(row) {
                    *a |= v > 0.0;
                }
            }
            if !active.iter().any(|&a| a) {
                return None;
            }
            let mut best = None;
            let mut best_score = 0;
            for root in 0..12u8 {
                for q in [ChordQuality::Maj, ChordQuality::Min] {
                    let score = q.intervals().iter().filter(|&&i| active[((root + i) % 12) as usize]).count();
                    if score > best_score {
                        best_score = score;
                        best = Some((root, q));
                    }
                }
            }
            best
        })
        .collect()
}

/// Turns per-frame labels on the selected frames into spans.
pub fn frames_to_spans(labels: &[Option<(u8, ChordQuality)>], keep: &FrameMask, fps: f64) -> Vec<ChordSpan> {
    let mut out: Vec<ChordSpan> = Vec::new();
    for (t, label) in labels.iter().enumerate() {
        if !keep.is_masked(t) {
            continue;
        }
        let (root, quality) = label.unwrap_or((0, ChordQuality::N));
        let (start, end) = (t as f64 / fps, (t + 1) as f64 / fps);
        match out.last_mut() {
            Some(last) if (last.end - start).abs() < 1e-9 && last.root == root && last.quality == quality => last.end = end,
            _ => out.push(ChordSpan { start, end, root, quality }),
        }
    }
    out
}

/// Ground-truth chord labels of a chord-cycle condition stream.
pub fn condition_chords(c: &TokenSequence) -> Vec<Option<(u8, ChordQuality)>> {
    (0..c.frames())
        .map(|t| {
            crate::synthdata::triad_of(c.frame(t)[0]).map(|tones| {
                let q = if (tones[1] + 12 - tones[0]) % 12 == 3 { ChordQuality::Min } else { ChordQuality::Maj };
                (tones[0], q)
            })
        })
        .collect()
}

/// Something that fills masked frames.
pub trait Inpainter: Sync {
    /// Predicted target for all `T` frames given the condition and the
    /// target's unmasked frames.
    fn inpaint(&self, x: &TokenSequence, c: &TokenSequence, mask: &FrameMask, mode: DecodeMode) -> Result<TokenSequence>;

    /// Continues `context` to `frames` frames without any condition.
    fn continue_from(&self, context: &TokenSequence, frames: usize, mode: DecodeMode) -> Result<TokenSequence>;
}

/// Continuation through a plain decoder. An empty context is started from a
/// silent frame of token 0 that is dropped from the output.
pub fn continue_decoder(w: &DecoderWeights<f32>, context: &TokenSequence, frames: usize, mode: DecodeMode) -> Result<TokenSequence> {
    contract!(context.frames() <= frames, "context longer than the requested length");
    if context.frames() == 0 {
        let start = TokenSequence::new(1, w.config.num_codebooks, vec![0; w.config.num_codebooks])?;
        return generate(w, None, &start, frames, mode);
    }
    let steps = frames - context.frames();
    let mut out = context.clone();
    let gen = generate(w, None, context, steps, mode)?;
    for t in 0..gen.frames() {
        out.push_frame(gen.frame(t))?;
    }
    Ok(out)
}

impl Inpainter for DecoderWeights<f32> {
    fn inpaint(&self, x: &TokenSequence, c: &TokenSequence, mask: &FrameMask, mode: DecodeMode) -> Result<TokenSequence> {
        let prefix = build_prefix(x, c, mask)?;
        generate(self, None, &prefix, prefix.frames(), mode)
    }

    fn continue_from(&self, context: &TokenSequence, frames: usize, mode: DecodeMode) -> Result<TokenSequence> {
        continue_decoder(self, context, frames, mode)
    }
}

impl Inpainter for AdaptedModel<f32> {
    fn inpaint(&self, x: &TokenSequence, c: &TokenSequence, mask: &FrameMask, mode: DecodeMode) -> Result<TokenSequence> {
        self.decode(&build_prefix(x, c, mask)?, mask, mode)
    }

    /// Adapters are routed by prefix/prediction roles, so continuation runs
    /// on the frozen base.
    fn continue_from(&self, context: &TokenSequence, frames: usize, mode: DecodeMode) -> Result<TokenSequence> {
        continue_decoder(&self.base, context, frames, mode)
    }
}

/// The generative rule replayed exactly; an upper bound for any model.
pub struct Oracle<'a>(pub &'a TaskSpec);

impl Inpainter for Oracle<'_> {
    fn inpaint(&self, x: &TokenSequence, c: &TokenSequence, mask: &FrameMask, _: DecodeMode) -> Result<TokenSequence> {
        let filled = oracle_inpaint(self.0, c, mask, x)?;
        let mut out = x.clone();
        for (t, tok) in mask.masked_indices().into_iter().zip(filled) {
            out.frame_mut(t)[0] = tok;
        }
        Ok(out)
    }

    fn continue_from(&self, _: &TokenSequence, _: usize, _: DecodeMode) -> Result<TokenSequence> {
        Err(Error::Contract("the oracle needs the condition".into()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Inpaint,
    Continue,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Inpaint => "inpaint",
            EvalMode::Continue => "continue",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inpaint" => Ok(EvalMode::Inpaint),
            "continue" => Ok(EvalMode::Continue),
            _ => Err(Error::Config(format!("unknown eval mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub patterns: Vec<u8>,
    pub mode: EvalMode,
    pub seed: u64,
    pub decode: DecodeMode,
    /// Replace every condition token with this one (the no-condition ablation).
    pub blank_condition: Option<TokenId>,
    /// Evaluate only the first `limit` records.
    pub limit: Option<usize>,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            patterns: vec![1, 2, 3],
            mode: EvalMode::Inpaint,
            seed: 0,
            decode: DecodeMode::Greedy,
            blank_condition: None,
            limit: None,
            threads: 1,
        }
    }
}

/// The mask pattern `pattern` applied to record `index` under `seed`.
pub fn record_mask(seed: u64, pattern: u8, frames: usize, index: usize) -> Result<FrameMask> {
    eval_mask(pattern, frames, &mut keyed(seed, domain::EVAL_MASK, index as u64 * 4 + pattern as u64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub task: String,
    pub pattern: u8,
    pub mode: EvalMode,
    pub metric: &'static str,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn get(&self, pattern: u8, mode: EvalMode, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.pattern == pattern && r.mode == mode && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{},{}\n",
                r.model,
                r.task,
                r.pattern,
                r.mode.as_str(),
                r.metric,
                r.value,
                r.n,
                r.seed
            ));
        }
        out
    }
}

struct RecordScores {
    accuracy: f64,
    chroma: Option<f64>,
    recall: Option<f64>,
}

fn score_record(
    model: &dyn Inpainter,
    spec: &TaskSpec,
    x: &TokenSequence,
    c: &TokenSequence,
    mask: &FrameMask,
    opts: &EvalOptions,
) -> Result<RecordScores> {
    let frames = x.frames();
    let predicted = match opts.mode {
        EvalMode::Inpaint => {
            let cond = match opts.blank_condition {
                Some(tok) => TokenSequence::new(frames, c.codebooks(), vec![tok; c.ids().len()])?,
                None => c.clone(),
            };
            model.inpaint(x, &cond, mask, opts.decode)?
        }
        EvalMode::Continue => {
            let first = mask.first_masked().unwrap_or(frames);
            model.continue_from(&x.slice(0, first), frames, opts.decode)?
        }
    };
    let accuracy = masked_accuracy(&predicted, x, mask)?;
    if !matches!(spec.kind, TaskKind::ChordCycle { .. }) {
        return Ok(RecordScores { accuracy, chroma: None, recall: None });
    }
    let rows = mask.masked_indices();
    let pc = token_chroma(&predicted);
    let rc = token_chroma(x);
    let pick = |m: &[[f64; 12]]| rows.iter().map(|&t| m[t]).collect::<Vec<_>>();
    let chroma = chroma_cosine(&pick(&pc), &pick(&rc))?;
    let reference = frames_to_spans(&condition_chords(c), mask, FRAME_RATE);
    let estimate = frames_to_spans(&estimate_chords(&predicted, 2), mask, FRAME_RATE);
    let recall = chord_recall(&estimate, &reference, CHORD_RESOLUTION)?;
    Ok(RecordScores { accuracy, chroma: Some(chroma), recall: Some(recall) })
}

/// Evaluates `model` on every record for each pattern and averages.
pub fn run_eval(model: &dyn Inpainter, name: &str, spec: &TaskSpec, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    contract!(!data.is_empty(), "evaluation needs a non-empty dataset");
    contract!(opts.threads >= 1, "threads must be positive");
    let count = opts.limit.map_or(data.len(), |l| l.min(data.len()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut report = EvalReport::default();
    for &pattern in &opts.patterns {
        let scores: Vec<Result<RecordScores>> = pool.install(|| {
            (0..count)
                .into_par_iter()
                .map(|i| {
                    let (x, c) = &data.records[i];
                    let mask = record_mask(opts.seed, pattern, x.frames(), i)?;
                    score_record(model, spec, x, c, &mask, opts)
                })
                .collect()
        });
        let scores: Vec<RecordScores> = scores.into_iter().collect::<Result<_>>()?;
        let mean = |f: &dyn Fn(&RecordScores) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = scores.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let metrics: [(&'static str, Option<f64>); 3] = [
            ("masked_accuracy", mean(&|s| Some(s.accuracy))),
            ("chroma_cosine", mean(&|s| s.chroma)),
            ("chord_recall", mean(&|s| s.recall)),
        ];
        for (metric, value) in metrics {
            if let Some(value) = value {
                report.rows.push(EvalRow {
                    model: name.to_string(),
                    task: spec.name().to_string(),
                    pattern,
                    mode: opts.mode,
                    metric,
                    value,
                    n: count,
                    seed: opts.seed,
                });
            }
        }
    }
    Ok(report)
}

/// Next-token accuracy of a decoder over targets `X` given only past targets.
pub fn next_token_accuracy(w: &DecoderWeights<f32>, data: &Dataset) -> Result<f64> {
    contract!(!data.is_empty(), "accuracy over an empty dataset is undefined");
    let (mut hit, mut total) = (0usize, 0usize);
    for (x, _) in &data.records {
        let logits = w.forward(x)?;
        for p in 0..x.frames().saturating_sub(1) {
            hit += (crate::decoder::argmax_frame(&logits, p) == x.frame(p + 1)) as usize;
            total += 1;
        }
    }
    contract!(total > 0, "records need at least two frames");
    Ok(hit as f64 / total as f64)
}
