//! Encoder-decoder models sharing one training and decoding interface.

mod layers;
pub mod rnn;
pub mod ut;

use rand::RngCore;

pub use layers::{coordinate_embedding, sinusoid};
pub use rnn::{RnnConfig, RnnModel};
pub use ut::{UtConfig, UtModel};

use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Var};
use crate::tokenizer::TokenId;

/// A model trainable by teacher forcing.
pub trait Seq2Seq {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn vocab_size(&self) -> usize;
    fn max_src_len(&self) -> usize;

    /// Log-probabilities `[tgt_in.len(), vocab]` where row `t` is the
    /// distribution of the token following `tgt_in[..=t]`.
    fn log_probs(
        &self,
        g: &mut Graph,
        src: &[TokenId],
        tgt_in: &[TokenId],
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Var>;
}

/// Incremental next-token scoring used by the decoders.
pub trait NextToken {
    /// Per-source state computed once, such as encoder output.
    type Memory;

    fn vocab_size(&self) -> usize;
    fn encode_source(&self, src: &[TokenId]) -> Result<Self::Memory>;
    /// `log P(next | prefix, src)` for every vocabulary entry. `prefix` starts with BOS.
    fn next_log_probs(&self, memory: &Self::Memory, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

/// Rows of a log-probability matrix computed without dropout.
#[cfg(test)]
pub(crate) fn inference_rows<M: Seq2Seq + ?Sized>(
    model: &M,
    src: &[TokenId],
    tgt_in: &[TokenId],
) -> Result<crate::tensor::Tensor> {
    use rand::SeedableRng;
    let mut g = Graph::new();
    // dropout is off, so the stream is never drawn from
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let lp = model.log_probs(&mut g, src, tgt_in, false, &mut rng)?;
    Ok(g.value(lp).clone())
}

/// Either model kind behind one type, as stored in checkpoints.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Ut(UtModel),
    Rnn(RnnModel),
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Ut(_) => "ut",
            AnyModel::Rnn(_) => "rnn",
        }
    }
}

impl Seq2Seq for AnyModel {
    fn params(&self) -> &ParamStore {
        match self {
            AnyModel::Ut(m) => m.params(),
            AnyModel::Rnn(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyModel::Ut(m) => m.params_mut(),
            AnyModel::Rnn(m) => m.params_mut(),
        }
    }

    fn vocab_size(&self) -> usize {
        match self {
            AnyModel::Ut(m) => Seq2Seq::vocab_size(m),
            AnyModel::Rnn(m) => Seq2Seq::vocab_size(m),
        }
    }

    fn max_src_len(&self) -> usize {
        match self {
            AnyModel::Ut(m) => m.max_src_len(),
            AnyModel::Rnn(m) => m.max_src_len(),
        }
    }

    fn log_probs(
        &self,
        g: &mut Graph,
        src: &[TokenId],
        tgt_in: &[TokenId],
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        match self {
            AnyModel::Ut(m) => m.log_probs(g, src, tgt_in, training, rng),
            AnyModel::Rnn(m) => m.log_probs(g, src, tgt_in, training, rng),
        }
    }
}

pub enum AnyMemory {
    Ut(<UtModel as NextToken>::Memory),
    Rnn(<RnnModel as NextToken>::Memory),
}

impl NextToken for AnyModel {
    type Memory = AnyMemory;

    fn vocab_size(&self) -> usize {
        Seq2Seq::vocab_size(self)
    }

    fn encode_source(&self, src: &[TokenId]) -> Result<AnyMemory> {
        Ok(match self {
            AnyModel::Ut(m) => AnyMemory::Ut(m.encode_source(src)?),
            AnyModel::Rnn(m) => AnyMemory::Rnn(m.encode_source(src)?),
        })
    }

    fn next_log_probs(&self, memory: &AnyMemory, prefix: &[TokenId]) -> Result<Vec<f64>> {
        match (self, memory) {
            (AnyModel::Ut(m), AnyMemory::Ut(mem)) => m.next_log_probs(mem, prefix),
            (AnyModel::Rnn(m), AnyMemory::Rnn(mem)) => m.next_log_probs(mem, prefix),
            _ => Err(crate::Error::Contract("memory from a different model kind".into())),
        }
    }
}
