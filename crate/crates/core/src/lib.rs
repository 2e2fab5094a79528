//! A desk-scale laboratory for low-precision language-model adaptation:
//! bit-exact emulation of reduced float formats, a tiny decoder LM with
//! hand-derived gradients under configurable precision policies, AdamW with
//! pure/mixed/stochastic-rounding state handling, BPE tokenization with
//! byte fallback, embedding re-initialization, word-normalized evaluation,
//! and a GPU memory/throughput planner.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod embed_init;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod pack;
pub mod planner;
pub mod precision;
pub mod rng;
pub mod run;
pub mod schedule;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
