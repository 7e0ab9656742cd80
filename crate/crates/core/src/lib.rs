//! Heterogeneous gated adapters for turning a frozen causal token decoder
//! into a conditioned inpainting model, together with the data, training
//! and evaluation machinery around it.

pub mod autodiff;
pub mod decoder;
pub mod error;
pub mod evalharness;
pub mod hetadapter;
pub mod rng;
pub mod sequence;
pub mod symbolic;
pub mod synthdata;
pub mod training;

pub use decoder::{argmax_frame, DecodeMode, DecoderConfig, DecoderWeights, Logits};
pub use error::{Error, Result};
pub use hetadapter::{attach, AdaptedModel, AdapterBank, GateSet};
pub use sequence::{AssembledSequence, FrameMask, TokenId, TokenSequence};
