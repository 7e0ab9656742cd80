//! Prefix/prediction sequence construction, training and evaluation masks,
//! and the prediction-area loss.
//!
//! An assembled sequence has `2T` frames: the first `T` hold the target with
//! condition frames substituted wherever the mask is set, the last `T` hold
//! the clean target. Logits at absolute position `p` predict the frame at
//! `p + 1`, so the prediction-area loss reads positions `T-1 ..= 2T-2`.

mod dataset;

pub use dataset::{read_mask, write_mask, Dataset, DATASET_MAGIC, DATASET_VERSION, MASK_MAGIC};

use rand::Rng;

use crate::autodiff::{cross_entropy, Scalar};
use crate::decoder::Logits;
use crate::error::{contract, Error, Result};

pub type TokenId = u16;

/// `frames × codebooks` token ids, row-major by frame.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    frames: usize,
    codebooks: usize,
    ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(frames: usize, codebooks: usize, ids: Vec<TokenId>) -> Result<Self> {
        contract!(codebooks >= 1, "token sequence needs at least one codebook");
        if ids.len() != frames * codebooks {
            return Err(Error::Shape(format!(
                "{} ids for {frames} frames x {codebooks} codebooks",
                ids.len()
            )));
        }
        Ok(Self { frames, codebooks, ids })
    }

    /// Single-codebook sequence.
    pub fn mono(ids: Vec<TokenId>) -> Self {
        Self {
            frames: ids.len(),
            codebooks: 1,
            ids,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn codebooks(&self) -> usize {
        self.codebooks
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn frame(&self, t: usize) -> &[TokenId] {
        &self.ids[t * self.codebooks..(t + 1) * self.codebooks]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [TokenId] {
        &mut self.ids[t * self.codebooks..(t + 1) * self.codebooks]
    }

    /// Frames `start..end` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> TokenSequence {
        TokenSequence {
            frames: end - start,
            codebooks: self.codebooks,
            ids: self.ids[start * self.codebooks..end * self.codebooks].to_vec(),
        }
    }

    pub fn push_frame(&mut self, frame: &[TokenId]) -> Result<()> {
        if frame.len() != self.codebooks {
            return Err(Error::Shape(format!(
                "frame of {} tokens for {} codebooks",
                frame.len(),
                self.codebooks
            )));
        }
        self.ids.extend_from_slice(frame);
        self.frames += 1;
        Ok(())
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id as usize >= vocab) {
            Some(id) => Err(Error::Index(format!("token {id} outside vocabulary of {vocab}"))),
            None => Ok(()),
        }
    }
}

/// Per-frame binary mask; `true` marks a masked frame.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FrameMask {
    flags: Vec<bool>,
}

impl FrameMask {
    pub fn new(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    pub fn unmasked(len: usize) -> Self {
        Self { flags: vec![false; len] }
    }

    /// Mask with the given zero-based frames set.
    pub fn from_indices(len: usize, masked: &[usize]) -> Result<Self> {
        let mut flags = vec![false; len];
        for &i in masked {
            if i >= len {
                return Err(Error::Index(format!("frame {i} in a mask of {len}")));
            }
            flags[i] = true;
        }
        Ok(Self { flags })
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn is_masked(&self, t: usize) -> bool {
        self.flags[t]
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&t| self.flags[t]).collect()
    }

    /// Maximal runs of masked frames as `(start, len)`.
    pub fn runs(&self) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut t = 0;
        while t < self.flags.len() {
            if self.flags[t] {
                let start = t;
                while t < self.flags.len() && self.flags[t] {
                    t += 1;
                }
                runs.push((start, t - start));
            } else {
                t += 1;
            }
        }
        runs
    }

    pub fn first_masked(&self) -> Option<usize> {
        self.flags.iter().position(|&f| f)
    }
}

/// `[X^p; X]` plus the mask and prefix length used to build it.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledSequence {
    pub tokens: TokenSequence,
    pub mask: FrameMask,
    pub prefix_len: usize,
}

impl AssembledSequence {
    pub fn prefix(&self) -> TokenSequence {
        self.tokens.slice(0, self.prefix_len)
    }

    pub fn target(&self) -> TokenSequence {
        self.tokens.slice(self.prefix_len, 2 * self.prefix_len)
    }
}

/// Substitutes condition frames into the target wherever the mask is set.
pub fn build_prefix(x: &TokenSequence, c: &TokenSequence, mask: &FrameMask) -> Result<TokenSequence> {
    contract!(
        x.frames() == c.frames() && x.frames() == mask.len(),
        "prefix inputs disagree on length: target {}, condition {}, mask {}",
        x.frames(),
        c.frames(),
        mask.len()
    );
    contract!(
        x.codebooks() == c.codebooks(),
        "target has {} codebooks, condition {}",
        x.codebooks(),
        c.codebooks()
    );
    let mut out = x.clone();
    for t in 0..x.frames() {
        if mask.is_masked(t) {
            out.frame_mut(t).copy_from_slice(c.frame(t));
        }
    }
    Ok(out)
}

pub fn assemble(prefix: &TokenSequence, x: &TokenSequence, mask: &FrameMask) -> Result<AssembledSequence> {
    contract!(
        prefix.frames() == x.frames() && prefix.codebooks() == x.codebooks(),
        "prefix {}x{} and target {}x{} differ",
        prefix.frames(),
        prefix.codebooks(),
        x.frames(),
        x.codebooks()
    );
    contract!(mask.len() == x.frames(), "mask of {} for {} frames", mask.len(), x.frames());
    let mut ids = prefix.ids().to_vec();
    ids.extend_from_slice(x.ids());
    Ok(AssembledSequence {
        tokens: TokenSequence::new(2 * x.frames(), x.codebooks(), ids)?,
        mask: mask.clone(),
        prefix_len: x.frames(),
    })
}

/// Random training mask: Bernoulli frames at a ratio drawn from `[lo, hi]`,
/// then smoothed by an 11-frame median filter.
pub fn sample_mask<R: Rng + ?Sized>(frames: usize, lo: f64, hi: f64, rng: &mut R) -> Result<FrameMask> {
    contract!(
        (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo <= hi,
        "mask ratio bounds [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"
    );
    let ratio = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let flags = (0..frames).map(|_| rng.gen_bool(ratio)).collect();
    median_smooth(&FrameMask::new(flags), 11)
}

/// Binary median filter with replicate padding at both edges.
pub fn median_smooth(mask: &FrameMask, window: usize) -> Result<FrameMask> {
    contract!(window % 2 == 1, "median window {window} must be odd");
    let n = mask.len();
    if n == 0 {
        return Ok(mask.clone());
    }
    let half = window / 2;
    let at = |i: isize| mask.flags[i.clamp(0, n as isize - 1) as usize] as usize;
    let mut ones: usize = (-(half as isize)..=half as isize).map(at).sum();
    let mut out = Vec::with_capacity(n);
    for t in 0..n as isize {
        out.push(ones > half);
        ones += at(t + half as isize + 1);
        ones -= at(t - half as isize);
    }
    Ok(FrameMask::new(out))
}

/// Evaluation mask: half of the frames masked in 1, 2 or 4 equal runs
/// (pattern 1, 2, 3), placed uniformly with at least one clear frame between.
pub fn eval_mask<R: Rng + ?Sized>(pattern: u8, frames: usize, rng: &mut R) -> Result<FrameMask> {
    let runs = match pattern {
        1 => 1,
        2 => 2,
        3 => 4,
        other => return Err(Error::Contract(format!("unknown mask pattern {other}"))),
    };
    contract!(
        frames >= 8 && frames % 8 == 0,
        "evaluation masks need a frame count divisible by 8, got {frames}"
    );
    let run_len = frames / 2 / runs;
    // Unmasked frames left after the mandatory single-frame separators.
    let slack = frames / 2 - (runs - 1);
    // Stars and bars: a uniform sorted subset picks the extra gap sizes.
    let slots = slack + runs;
    let chosen = rand::seq::index::sample(rng, slots, runs).into_vec();
    let mut chosen = chosen;
    chosen.sort_unstable();
    let mut flags = vec![false; frames];
    let mut start = chosen[0];
    for i in 0..runs {
        flags[start..start + run_len].iter_mut().for_each(|f| *f = true);
        if i + 1 < runs {
            let extra = chosen[i + 1] - chosen[i] - 1;
            start += run_len + 1 + extra;
        }
    }
    Ok(FrameMask::new(flags))
}

/// `(row, target)` pairs of the prediction-area loss for codebook `k`.
pub fn prediction_picks(x: &TokenSequence, k: usize) -> Vec<(usize, usize)> {
    let t = x.frames();
    (0..t).map(|i| (t - 1 + i, x.frame(i)[k] as usize)).collect()
}

/// Mean cross-entropy of the prediction area against the clean target.
pub fn prediction_loss<F: Scalar>(logits: &Logits<F>, x: &TokenSequence) -> Result<F> {
    let t = x.frames();
    contract!(t >= 1, "empty target");
    contract!(
        logits.seq() >= 2 * t - 1 && logits.codebooks() == x.codebooks(),
        "logits of {} positions x {} codebooks do not cover a {t}-frame prediction area",
        logits.seq(),
        logits.codebooks()
    );
    let mut total = 0.0;
    for k in 0..x.codebooks() {
        for (row, target) in prediction_picks(x, k) {
            total += cross_entropy(logits.at(row, k), target)?.as_f64();
        }
    }
    Ok(F::lit(total / (t * x.codebooks()) as f64))
}
