//! Desk-scale neural machine translation with pluggable decoder output
//! layers: full softmax, weight tying, bilinear and single-nonlinearity joint
//! forms, and the structure-aware joint input-output embedding.
//!
//! Modules, bottom-up:
//! - [`ndmath`]: dense matrices, Adam, seeded RNG, finite differences.
//! - [`outlayer`]: the output-layer family, gradients and capacity accounting.
//! - [`sampler`]: negative-sampling softmax.
//! - [`seq2seq`]: stacked LSTM encoder-decoder with global attention.
//! - [`bpe`]: subword segmentation and vocabularies.
//! - [`eval`]: BLEU, paired bootstrap, frequency-binned token metrics.
//! - [`cli`]: configuration, checkpoints and the subcommands behind the `saol` binary.
//! - [`synth`]: synthetic corpora for tests and benchmarks.

pub mod bpe;
pub mod cli;
pub mod error;
pub mod eval;
pub mod ndmath;
pub mod outlayer;
pub mod sampler;
pub mod seq2seq;
pub mod synth;

pub use error::{Error, Result};
