//! Allocation-only core of the cm3 multimodal token pipeline.
//!
//! Everything here is pure computation over token ids, vectors and
//! caller-owned RNGs: the unified vocabulary and document framing, the
//! patch k-means image quantizer, the causal-masked infilling transform,
//! instruction-template rendering, dense retrieval over a memory bank,
//! the decoding strategies (temperature, nucleus, guidance, contrastive)
//! with candidate re-ranking, a back-off n-gram model and the evaluation
//! metrics. File formats, the experiment harness and the CLI live in the
//! `cm3-pipeline` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod decoding;
pub mod error;
pub mod eval;
pub mod math;
pub mod ngram;
pub mod objective;
pub mod retrieval;
pub mod seed;
pub mod sft;
pub mod vocab;
pub mod vq;

pub use error::{Error, Result};
pub use vocab::{Document, TokenId, TokenStream, VocabLayout};
