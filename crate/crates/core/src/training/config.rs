use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which parameters a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Peft,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Peft => "peft",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "peft" => Ok(Phase::Peft),
            _ => Err(Error::Config(format!("unknown phase `{s}`"))),
        }
    }
}

/// What a pretraining example looks like.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainLayout {
    /// The target stream `X` alone.
    Target,
    /// The condition followed by the target, `[C; X]`.
    Paired,
}

impl fmt::Display for PretrainLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PretrainLayout::Target => "target",
            PretrainLayout::Paired => "paired",
        })
    }
}

impl FromStr for PretrainLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(PretrainLayout::Target),
            "paired" => Ok(PretrainLayout::Paired),
            _ => Err(Error::Config(format!("unknown pretrain layout `{s}`"))),
        }
    }
}

/// Optimizer and schedule settings shared by both phases.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// 0 means no cap beyond `epochs`.
    pub max_steps: usize,
    pub seed: u64,
    pub mask_lo: f64,
    pub mask_hi: f64,
    pub gate_log_every: usize,
    pub threads: usize,
    pub layout: PretrainLayout,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            lr: 1e-3,
            warmup_fraction: 0.05,
            batch_size: 16,
            epochs: 10,
            max_steps: 0,
            seed: 0,
            mask_lo: 0.4,
            mask_hi: 0.8,
            gate_log_every: 10,
            threads: 1,
            layout: PretrainLayout::Target,
        }
    }

    pub fn peft() -> Self {
        Self {
            phase: Phase::Peft,
            lr: 2e-3,
            ..Self::pretrain()
        }
    }

    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Pretrain => Self::pretrain(),
            Phase::Peft => Self::peft(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.gate_log_every == 0 || self.threads == 0 {
            return bad("batch_size, epochs, gate_log_every and threads must be positive");
        }
        if !(0.0 <= self.mask_lo && self.mask_lo <= self.mask_hi && self.mask_hi <= 1.0) {
            return bad("mask ratio bounds must satisfy 0 <= lo <= hi <= 1");
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "phase" => self.phase = value.parse()?,
            "lr" => self.lr = num(key, value)?,
            "warmup_fraction" => self.warmup_fraction = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "mask_lo" => self.mask_lo = num(key, value)?,
            "mask_hi" => self.mask_hi = num(key, value)?,
            "gate_log_every" => self.gate_log_every = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            "layout" => self.layout = value.parse()?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the phase defaults. Blank lines and
    /// `#` comments are skipped; a `phase` line, if present, picks the defaults.
    pub fn parse(text: &str, default_phase: Phase) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            pairs.push((k.trim(), v.trim()));
        }
        let phase = match pairs.iter().find(|(k, _)| *k == "phase") {
            Some((_, v)) => v.parse()?,
            None => default_phase,
        };
        let mut cfg = Self::for_phase(phase);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "phase = {}\nlr = {}\nwarmup_fraction = {}\nbatch_size = {}\nepochs = {}\nmax_steps = {}\nseed = {}\nmask_lo = {}\nmask_hi = {}\ngate_log_every = {}\nthreads = {}\nlayout = {}\n",
            self.phase,
            self.lr,
            self.warmup_fraction,
            self.batch_size,
            self.epochs,
            self.max_steps,
            self.seed,
            self.mask_lo,
            self.mask_hi,
            self.gate_log_every,
            self.threads,
            self.layout
        )
    }
}
