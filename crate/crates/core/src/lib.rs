//! Abstractive headline generation: subword tokenization, a Universal
//! Transformer encoder-decoder with its own autodiff substrate, greedy and
//! beam decoding, baselines and ROUGE evaluation.

pub mod baselines;
pub mod checkpoint;
pub mod corpus;
pub mod decoding;
pub mod embeddings;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod rouge;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Gradients, Graph, ParamId, ParamStore, Tensor, Var};
