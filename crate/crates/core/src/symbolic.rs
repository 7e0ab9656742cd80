//! Symbolic conditioning: piano reduction, block-chord rendering, and
//! frame-level chroma and token views of note events.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::sequence::{TokenId, TokenSequence};

/// Lowest pitch of a rendered block chord's root octave.
pub const CHORD_BASE_PITCH: u8 = 60;
pub const BLOCK_VELOCITY: u8 = 80;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub onset: f64,
    pub duration: f64,
    pub pitch: u8,
    pub velocity: u8,
    pub program: u8,
    pub track: u32,
}

impl NoteEvent {
    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || !self.onset.is_finite() || !self.duration.is_finite() {
            return Err(Error::Format(format!(
                "event at {} needs a finite positive duration, got {}",
                self.onset, self.duration
            )));
        }
        if self.pitch > 127 || self.program > 127 || !(1..=127).contains(&self.velocity) {
            return Err(Error::Format(format!(
                "event pitch {}, velocity {}, program {} out of MIDI range",
                self.pitch, self.velocity, self.program
            )));
        }
        Ok(())
    }

    /// Same pitch and intersecting half-open intervals.
    pub fn collides(&self, other: &NoteEvent) -> bool {
        self.pitch == other.pitch && self.onset < other.end() && other.onset < self.end()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChordQuality {
    Maj,
    Min,
    Dim,
    Aug,
    Maj7,
    Min7,
    Dom7,
    N,
}

impl ChordQuality {
    pub const ALL: [ChordQuality; 8] = [
        ChordQuality::Maj,
        ChordQuality::Min,
        ChordQuality::Dim,
        ChordQuality::Aug,
        ChordQuality::Maj7,
        ChordQuality::Min7,
        ChordQuality::Dom7,
        ChordQuality::N,
    ];

    /// Semitone offsets above the root.
    pub fn intervals(self) -> &'static [u8] {
        match self {
            ChordQuality::Maj => &[0, 4, 7],
            ChordQuality::Min => &[0, 3, 7],
            ChordQuality::Dim => &[0, 3, 6],
            ChordQuality::Aug => &[0, 4, 8],
            ChordQuality::Maj7 => &[0, 4, 7, 11],
            ChordQuality::Min7 => &[0, 3, 7, 10],
            ChordQuality::Dom7 => &[0, 4, 7, 10],
            ChordQuality::N => &[],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ChordQuality::Maj => "maj",
            ChordQuality::Min => "min",
            ChordQuality::Dim => "dim",
            ChordQuality::Aug => "aug",
            ChordQuality::Maj7 => "maj7",
            ChordQuality::Min7 => "min7",
            ChordQuality::Dom7 => "dom7",
            ChordQuality::N => "N",
        }
    }
}

impl fmt::Display for ChordQuality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChordQuality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ChordQuality::ALL
            .into_iter()
            .find(|q| q.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown chord quality {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChordSpan {
    pub start: f64,
    pub end: f64,
    pub root: u8,
    pub quality: ChordQuality,
}

impl ChordSpan {
    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t < self.end
    }

    /// Pitch classes of the chord; empty for no-chord.
    pub fn pitch_classes(&self) -> Vec<u8> {
        self.quality.intervals().iter().map(|i| (self.root + i) % 12).collect()
    }

    /// Two spans denote the same chord label (roots are ignored for no-chord).
    pub fn same_label(&self, other: &ChordSpan) -> bool {
        self.quality == other.quality && (self.quality == ChordQuality::N || self.root == other.root)
    }
}

/// Validates chord spans: ordered bounds, roots in range, no overlaps.
pub fn check_chords(chords: &[ChordSpan]) -> Result<()> {
    for c in chords {
        if !(c.start < c.end) || c.root > 11 {
            return Err(Error::Format(format!(
                "chord span [{}, {}) root {} is invalid",
                c.start, c.end, c.root
            )));
        }
    }
    let mut sorted: Vec<&ChordSpan> = chords.iter().collect();
    sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
    if sorted.windows(2).any(|w| w[1].start < w[0].end) {
        return Err(Error::Format("chord spans overlap".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeatGrid {
    times: Vec<f64>,
}

impl BeatGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Format("beat times must be finite and strictly increasing".into()));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

/// Greedy duration-first reduction of piano-family events (programs 0–7).
///
/// Candidates are visited longest first (then earlier onset, then lower
/// pitch) and kept unless they collide with a kept event of the same pitch.
pub fn piano_reduce(events: &[NoteEvent]) -> Vec<NoteEvent> {
    let mut candidates: Vec<NoteEvent> = events.iter().filter(|e| e.program <= 7).copied().collect();
    candidates.sort_by(|a, b| {
        b.duration
            .total_cmp(&a.duration)
            .then(a.onset.total_cmp(&b.onset))
            .then(a.pitch.cmp(&b.pitch))
    });
    let mut kept: Vec<NoteEvent> = Vec::new();
    for mut e in candidates {
        if kept.iter().all(|k| !k.collides(&e)) {
            e.program = 0;
            kept.push(e);
        }
    }
    kept
}

/// Block chords struck at each beat inside a chord span.
///
/// A block lasts until the next beat, clipped to the end of its span; the
/// last beat's block lasts until the span ends.
pub fn render_block_chords(chords: &[ChordSpan], beats: &BeatGrid) -> Vec<NoteEvent> {
    let times = beats.times();
    let mut out = Vec::new();
    for (i, &b) in times.iter().enumerate() {
        let Some(span) = chords.iter().find(|c| c.contains(b)) else { continue };
        let end = match times.get(i + 1) {
            Some(&next) => next.min(span.end),
            None => span.end,
        };
        for &iv in span.quality.intervals() {
            out.push(NoteEvent {
                onset: b,
                duration: end - b,
                pitch: CHORD_BASE_PITCH + span.root + iv,
                velocity: BLOCK_VELOCITY,
                program: 0,
                track: 0,
            });
        }
    }
    out
}

fn frame_bounds(t: usize, fps: f64) -> (f64, f64) {
    (t as f64 / fps, (t + 1) as f64 / fps)
}

/// Binary `frames × 12` pitch-class activity.
pub fn events_to_chroma(events: &[NoteEvent], frames: usize, fps: f64) -> Result<Vec<[f64; 12]>> {
    contract!(fps > 0.0 && fps.is_finite(), "fps must be positive, got {fps}");
    let mut chroma = vec![[0.0; 12]; frames];
    for e in events {
        for (t, row) in chroma.iter_mut().enumerate() {
            let (lo, hi) = frame_bounds(t, fps);
            if e.onset < hi && e.end() > lo {
                row[(e.pitch % 12) as usize] = 1.0;
            }
        }
    }
    Ok(chroma)
}

/// 12-bit pitch-class set of a chroma row.
pub fn chroma_mask(row: &[f64; 12]) -> u16 {
    row.iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .fold(0, |m, (pc, _)| m | (1 << pc))
}

/// Token id for a pitch-class set: 0 for silence, otherwise a fixed
/// multiplicative hash into `1..vocab`.
pub fn pitch_class_token(mask: u16, vocab: usize) -> TokenId {
    if mask == 0 {
        return 0;
    }
    let h = (mask as u64).wrapping_mul(2_654_435_761) % (1 << 32);
    (1 + h % (vocab as u64 - 1)) as TokenId
}

/// One token per frame from the frame's sounding pitch classes.
pub fn events_to_tokens(events: &[NoteEvent], frames: usize, fps: f64, vocab: usize) -> Result<TokenSequence> {
    contract!(vocab >= 2, "vocabulary must hold at least 2 tokens");
    contract!(vocab <= TokenId::MAX as usize + 1, "vocabulary {vocab} exceeds 16-bit ids");
    let chroma = events_to_chroma(events, frames, fps)?;
    Ok(TokenSequence::mono(
        chroma.iter().map(|row| pitch_class_token(chroma_mask(row), vocab)).collect(),
    ))
}

/// Parses one JSON object per non-blank line.
pub fn parse_events(text: &str) -> Result<Vec<NoteEvent>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let e: NoteEvent = serde_json::from_str(l).map_err(|err| Error::Format(format!("events line {}: {err}", i + 1)))?;
            e.validate().map_err(|err| Error::Format(format!("events line {}: {err}", i + 1)))?;
            Ok(e)
        })
        .collect()
}

pub fn format_events(events: &[NoteEvent]) -> String {
    events
        .iter()
        .map(|e| serde_json::to_string(e).expect("plain struct serialises") + "\n")
        .collect()
}

/// Parses `start end root quality` lines.
pub fn parse_chords(text: &str) -> Result<Vec<ChordSpan>> {
    let chords = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |what: &str| Error::Format(format!("chords line {}: {what}", i + 1));
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad("expected `start end root quality`"));
            }
            Ok(ChordSpan {
                start: f[0].parse().map_err(|_| bad("bad start"))?,
                end: f[1].parse().map_err(|_| bad("bad end"))?,
                root: f[2].parse().map_err(|_| bad("bad root"))?,
                quality: f[3].parse()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    check_chords(&chords)?;
    Ok(chords)
}

pub fn format_chords(chords: &[ChordSpan]) -> String {
    chords
        .iter()
        .map(|c| format!("{} {} {} {}\n", c.start, c.end, c.root, c.quality))
        .collect()
}

pub fn parse_beats(text: &str) -> Result<BeatGrid> {
    let times = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("beats line {}: not a number", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    BeatGrid::new(times)
}

/// Deterministic order for event lists: onset, pitch, then the rest.
pub fn sort_events(events: &mut [NoteEvent]) {
    events.sort_by(|a, b| {
        a.onset
            .total_cmp(&b.onset)
            .then(a.pitch.cmp(&b.pitch))
            .then(a.duration.total_cmp(&b.duration))
            .then(a.track.cmp(&b.track))
            .then_with(|| a.program.cmp(&b.program))
            .then_with(|| a.velocity.cmp(&b.velocity))
            .then(Ordering::Equal)
    });
}
