//! Synthetic condition→target tasks with exact inpainting oracles.

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::rng::{domain, keyed};
use crate::sequence::{Dataset, FrameMask, TokenId, TokenSequence};

/// Chord-cycle vocabulary: 0 is silence, `1..=24` are major/minor triads
/// (`1 + 2·root + minor`), `25..=36` are single pitch classes.
pub const CHORD_TOKENS: TokenId = 1;
pub const NOTE_TOKENS: TokenId = 25;
pub const CHORDCYCLE_MIN_VOCAB: usize = 37;

#[derive(Clone, Debug, PartialEq)]
pub enum TaskKind {
    /// `x_t = c_t`, condition uniform.
    Copy,
    /// `x_t = (α·c_t + β·x_{t−1} + γ) mod V`, `x_0 = 0`, condition uniform.
    Affine { alpha: u64, beta: u64, gamma: u64 },
    /// Piecewise-constant triads; the target arpeggiates the current triad
    /// through `pattern` (indices into root/third/fifth) by frame index.
    ChordCycle { min_segment: usize, max_segment: usize, pattern: Vec<u8> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    pub p_noise: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn copy(vocab: usize, seed: u64) -> Self {
        Self { kind: TaskKind::Copy, vocab, p_noise: 0.0, seed }
    }

    pub fn affine(vocab: usize, alpha: u64, beta: u64, gamma: u64, seed: u64) -> Self {
        Self { kind: TaskKind::Affine { alpha, beta, gamma }, vocab, p_noise: 0.0, seed }
    }

    pub fn chordcycle(vocab: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::ChordCycle { min_segment: 8, max_segment: 24, pattern: vec![0, 1, 2, 1] },
            vocab,
            p_noise: 0.0,
            seed,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            TaskKind::Copy => "copy",
            TaskKind::Affine { .. } => "affine",
            TaskKind::ChordCycle { .. } => "chordcycle",
        }
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.vocab >= 2, "task vocabulary must hold at least 2 tokens");
        contract!(self.vocab <= TokenId::MAX as usize + 1, "task vocabulary exceeds 16-bit ids");
        contract!(
            (0.0..1.0).contains(&self.p_noise),
            "noise probability {} outside [0, 1)",
            self.p_noise
        );
        if let TaskKind::ChordCycle { min_segment, max_segment, pattern } = &self.kind {
            contract!(
                self.vocab >= CHORDCYCLE_MIN_VOCAB,
                "chordcycle needs a vocabulary of at least {CHORDCYCLE_MIN_VOCAB}"
            );
            contract!(
                *min_segment >= 1 && min_segment <= max_segment,
                "segment range {min_segment}..={max_segment} is empty"
            );
            contract!(
                !pattern.is_empty() && pattern.iter().all(|&p| p < 3),
                "cycle pattern must index triad tones 0..3"
            );
        }
        Ok(())
    }

    pub fn is_deterministic(&self) -> bool {
        self.p_noise == 0.0
    }
}

/// Pitch classes of a triad condition token (`[root, third, fifth]`).
pub fn triad_of(token: TokenId) -> Option<[u8; 3]> {
    if !(CHORD_TOKENS..NOTE_TOKENS).contains(&token) {
        return None;
    }
    let k = token - CHORD_TOKENS;
    let root = (k / 2) as u8;
    let third = if k % 2 == 1 { 3 } else { 4 };
    Some([root, (root + third) % 12, (root + 7) % 12])
}

/// Pitch classes sounded by a chord-cycle token.
pub fn token_pitch_classes(token: TokenId) -> Vec<u8> {
    if let Some(t) = triad_of(token) {
        return t.to_vec();
    }
    if (NOTE_TOKENS..NOTE_TOKENS + 12).contains(&token) {
        return vec![(token - NOTE_TOKENS) as u8];
    }
    Vec::new()
}

fn chordcycle_target(c: TokenId, t: usize, pattern: &[u8]) -> TokenId {
    match triad_of(c) {
        Some(tones) => NOTE_TOKENS + tones[pattern[t % pattern.len()] as usize] as TokenId,
        None => 0,
    }
}

fn affine_step(spec: &TaskSpec, c: TokenId, prev: TokenId) -> TokenId {
    let TaskKind::Affine { alpha, beta, gamma } = spec.kind else {
        unreachable!("affine step on a non-affine task")
    };
    let v = spec.vocab as u64;
    ((alpha % v * c as u64 + beta % v * prev as u64 + gamma) % v) as TokenId
}

/// Clean target for a condition sequence, ignoring noise.
fn clean_target(spec: &TaskSpec, c: &[TokenId]) -> Vec<TokenId> {
    match &spec.kind {
        TaskKind::Copy => c.to_vec(),
        TaskKind::Affine { .. } => {
            let mut prev = 0;
            c.iter()
                .map(|&ct| {
                    prev = affine_step(spec, ct, prev);
                    prev
                })
                .collect()
        }
        TaskKind::ChordCycle { pattern, .. } => {
            c.iter().enumerate().map(|(t, &ct)| chordcycle_target(ct, t, pattern)).collect()
        }
    }
}

/// Draws one `(X, C)` pair of `frames` frames.
pub fn gen_pair<R: Rng + ?Sized>(spec: &TaskSpec, frames: usize, rng: &mut R) -> Result<(TokenSequence, TokenSequence)> {
    spec.validate()?;
    contract!(frames >= 1, "pairs need at least one frame");
    let c: Vec<TokenId> = match &spec.kind {
        TaskKind::Copy | TaskKind::Affine { .. } => {
            (0..frames).map(|_| rng.gen_range(0..spec.vocab as u32) as TokenId).collect()
        }
        TaskKind::ChordCycle { min_segment, max_segment, .. } => {
            let mut c = Vec::with_capacity(frames);
            while c.len() < frames {
                let len = rng.gen_range(*min_segment..=*max_segment);
                let chord = CHORD_TOKENS + rng.gen_range(0..24);
                c.extend(std::iter::repeat(chord).take(len.min(frames - c.len())));
            }
            c
        }
    };
    let mut x = clean_target(spec, &c);
    if spec.p_noise > 0.0 {
        // The recursion follows the corrupted tokens so the rule stays
        // consistent with what the model observes.
        match spec.kind {
            TaskKind::Affine { .. } => {
                let mut prev = 0;
                for t in 0..frames {
                    let mut xt = affine_step(spec, c[t], prev);
                    if rng.gen_bool(spec.p_noise) {
                        xt = rng.gen_range(0..spec.vocab as u32) as TokenId;
                    }
                    x[t] = xt;
                    prev = xt;
                }
            }
            _ => {
                for xt in x.iter_mut() {
                    if rng.gen_bool(spec.p_noise) {
                        *xt = rng.gen_range(0..spec.vocab as u32) as TokenId;
                    }
                }
            }
        }
    }
    Ok((TokenSequence::mono(x), TokenSequence::mono(c)))
}

/// Pair `index` of the task's keyed stream.
pub fn gen_record(spec: &TaskSpec, frames: usize, index: u64) -> Result<(TokenSequence, TokenSequence)> {
    gen_pair(spec, frames, &mut keyed(spec.seed, domain::DATA, index))
}

/// Exact tokens at the masked frames, in frame order, from the condition and
/// the target's unmasked frames.
pub fn oracle_inpaint(spec: &TaskSpec, c: &TokenSequence, mask: &FrameMask, context: &TokenSequence) -> Result<Vec<TokenId>> {
    contract!(spec.is_deterministic(), "the oracle needs a noise-free task");
    contract!(
        c.frames() == mask.len() && context.frames() == mask.len(),
        "oracle inputs disagree on length"
    );
    contract!(c.codebooks() == 1 && context.codebooks() == 1, "synthetic tasks use one codebook");
    let cs = c.ids();
    let xs = context.ids();
    let mut out = Vec::with_capacity(mask.masked_count());
    match &spec.kind {
        TaskKind::Copy => out.extend(mask.masked_indices().into_iter().map(|t| cs[t])),
        TaskKind::ChordCycle { pattern, .. } => out.extend(
            mask.masked_indices().into_iter().map(|t| chordcycle_target(cs[t], t, pattern)),
        ),
        TaskKind::Affine { .. } => {
            let mut prev = 0;
            for t in 0..mask.len() {
                if mask.is_masked(t) {
                    prev = affine_step(spec, cs[t], prev);
                    out.push(prev);
                } else {
                    prev = xs[t];
                }
            }
        }
    }
    Ok(out)
}

/// `records` pairs from the task's keyed stream.
pub fn gen_dataset(spec: &TaskSpec, records: usize, frames: usize) -> Result<Dataset> {
    spec.validate()?;
    let mut ds = Dataset::new(frames, 1, spec.vocab);
    for i in 0..records {
        let (x, c) = gen_record(spec, frames, i as u64)?;
        ds.push(x, c)?;
    }
    Ok(ds)
}

/// Parses `copy`, `affine[:α,β,γ]` or `chordcycle`.
pub fn parse_task(name: &str, vocab: usize, seed: u64) -> Result<TaskSpec> {
    let (kind, args) = name.split_once(':').unwrap_or((name, ""));
    let spec = match kind {
        "copy" => TaskSpec::copy(vocab, seed),
        "chordcycle" => TaskSpec::chordcycle(vocab, seed),
        "affine" => {
            let (a, b, g) = if args.is_empty() {
                DEFAULT_AFFINE
            } else {
                let p: Vec<u64> = args
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad affine parameter {s:?}"))))
                    .collect::<Result<_>>()?;
                match p[..] {
                    [a, b, g] => (a, b, g),
                    _ => return Err(Error::Config("affine takes three parameters α,β,γ".into())),
                }
            };
            TaskSpec::affine(vocab, a, b, g, seed)
        }
        other => return Err(Error::Config(format!("unknown task {other:?}"))),
    };
    spec.validate()?;
    Ok(spec)
}

/// `(α, β, γ)` used when an affine task is named without parameters.
pub const DEFAULT_AFFINE: (u64, u64, u64) = (1, 1, 0);
