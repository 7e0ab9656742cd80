//! "AIRC" named-array checkpoints.
//!
//! Layout (little-endian): magic, version u32, entry count u32, then entries
//! sorted by name, each `name_len u16, name, rank u8, dims u32…, dtype u8,
//! values`. Dtype 0 is f32; dtype 1 (u32) carries configuration echoes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::decoder::{DecoderConfig, DecoderWeights};
use crate::error::{contract, Error, Result};
use crate::hetadapter::{adapter_name, gate_name, AdaptedModel, AdapterBank, GateSet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AIRC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DECODER_CONFIG_ENTRY: &str = "config.decoder";
pub const ADAPTER_CONFIG_ENTRY: &str = "config.adapter";

#[derive(Clone, Debug, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl Values {
    fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::U32(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Values::F32(_) => 0,
            Values::U32(_) => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub values: Values,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Values) -> Result<()> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape(format!("entry {name} {shape:?} with {} values", values.len())));
        }
        contract!(name.len() <= u16::MAX as usize, "entry name too long");
        contract!(shape.len() <= u8::MAX as usize, "entry rank too large");
        self.entries.insert(name.to_string(), Entry { shape, values });
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: &str, t: &Tensor<f32>) -> Result<()> {
        self.insert(name, t.shape().to_vec(), Values::F32(t.data().to_vec()))
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of f32 values across entries.
    pub fn float_count(&self) -> usize {
        self.entries
            .values()
            .filter_map(|e| match &e.values {
                Values::F32(v) => Some(v.len()),
                Values::U32(_) => None,
            })
            .sum()
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<f32>> {
        match self.entries.get(name) {
            Some(Entry { shape, values: Values::F32(v) }) => Tensor::new(shape.clone(), v.clone()),
            Some(_) => Err(Error::Format(format!("entry {name} is not f32"))),
            None => Err(Error::Format(format!("checkpoint has no entry {name}"))),
        }
    }

    fn u32s(&self, name: &str) -> Result<&[u32]> {
        match self.entries.get(name) {
            Some(Entry { values: Values::U32(v), .. }) => Ok(v),
            Some(_) => Err(Error::Format(format!("entry {name} is not u32"))),
            None => Err(Error::Format(format!("checkpoint has no entry {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(e.values.tag());
            match &e.values {
                Values::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Values::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an AIRC checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            if last.as_ref().is_some_and(|l| *l >= name) {
                return Err(Error::Format("checkpoint entries are not sorted by name".into()));
            }
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format("entry size overflows".into()))?;
            let tag = r.take(1)?[0];
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("entry size overflows".into()))?)?;
            let words = raw.chunks_exact(4).map(|b| [b[0], b[1], b[2], b[3]]);
            let values = match tag {
                0 => Values::F32(words.map(f32::from_le_bytes).collect()),
                1 => Values::U32(words.map(u32::from_le_bytes).collect()),
                other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
            };
            ck.entries.insert(name.clone(), Entry { shape, values });
            last = Some(name);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_decoder(w: &DecoderWeights<f32>) -> Result<Self> {
        let c = w.config;
        let mut ck = Checkpoint::new();
        let echo = [
            c.num_layers,
            c.model_dim,
            c.num_heads,
            c.ffn_dim,
            c.vocab_size,
            c.num_codebooks,
            c.max_seq_len,
        ];
        ck.insert(DECODER_CONFIG_ENTRY, vec![7], Values::U32(echo.iter().map(|&v| v as u32).collect()))?;
        for (name, t) in w.named() {
            ck.insert_tensor(&name, t)?;
        }
        Ok(ck)
    }

    pub fn decoder_config(&self) -> Result<DecoderConfig> {
        let e = self.u32s(DECODER_CONFIG_ENTRY)?;
        let [l, d, h, f, v, n, s] = e[..] else {
            return Err(Error::Format("decoder config echo must hold 7 values".into()));
        };
        let cfg = DecoderConfig {
            num_layers: l as usize,
            model_dim: d as usize,
            num_heads: h as usize,
            ffn_dim: f as usize,
            vocab_size: v as usize,
            num_codebooks: n as usize,
            max_seq_len: s as usize,
        };
        cfg.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_decoder(&self) -> Result<DecoderWeights<f32>> {
        let cfg = self.decoder_config()?;
        DecoderWeights::from_named(cfg, |name| self.tensor(name).ok())
    }

    pub fn from_adapters(model: &AdaptedModel<f32>) -> Result<Self> {
        let c = model.base.config;
        let mut ck = Checkpoint::new();
        let echo = vec![c.num_layers as u32, model.width() as u32, c.model_dim as u32];
        ck.insert(ADAPTER_CONFIG_ENTRY, vec![3], Values::U32(echo))?;
        for (name, t) in model.trainable() {
            ck.insert_tensor(&name, t)?;
        }
        Ok(ck)
    }

    /// Rebuilds an adapted model from a frozen base and this adapter checkpoint.
    pub fn attach_to(&self, mut base: DecoderWeights<f32>) -> Result<AdaptedModel<f32>> {
        let echo = self.u32s(ADAPTER_CONFIG_ENTRY)?;
        let [l, m, d] = echo[..] else {
            return Err(Error::Format("adapter config echo must hold 3 values".into()));
        };
        let (l, m, d) = (l as usize, m as usize, d as usize);
        contract!(
            l == base.config.num_layers && d == base.config.model_dim,
            "adapter checkpoint is for L={l}, d={d}; base has L={}, d={}",
            base.config.num_layers,
            base.config.model_dim
        );
        base.set_requires_grad(false);
        let mut banks = Vec::with_capacity(l);
        let mut gates = GateSet::zeros(l);
        for layer in 0..l {
            let mut bank = Vec::with_capacity(4);
            for r in 0..4 {
                let t = self.tensor(&adapter_name(layer, r))?;
                contract!(t.shape() == [m, d], "adapter {} has shape {:?}", adapter_name(layer, r), t.shape());
                bank.push(t.with_grad());
                let g = self.tensor(&gate_name(layer, r))?;
                contract!(g.numel() == 1 && g.shape().is_empty(), "gate {} is not a scalar", gate_name(layer, r));
                gates.gates[layer][r] = g.with_grad();
            }
            banks.push(bank.try_into().expect("four adapter types"));
        }
        Ok(AdaptedModel {
            base,
            adapters: AdapterBank { width: m, banks },
            gates,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
