//! Bandit machine translation workbench.
//!
//! An attentional encoder-decoder trained by maximum likelihood, adapted to a
//! new domain from scalar rewards with advantage actor-critic, plus the
//! surrounding tooling: byte-pair encoding, cross-entropy-difference data
//! selection, BLEU metrics and a line-delimited JSON feedback service.

pub mod bandit;
pub mod bpe;
pub mod cli;
pub mod config;
pub mod error;
pub mod grad;
pub mod metrics;
pub mod net;
pub mod select;
pub mod seq2seq;
pub mod supervised;
pub mod synth;

pub use error::{Error, Result};
