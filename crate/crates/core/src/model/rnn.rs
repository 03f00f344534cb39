//! GRU encoder-decoder with additive attention, the recurrent baseline.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};

use super::layers::{uniform_std, xavier, Linear};
use super::ut::get;
use super::{NextToken, Seq2Seq};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::tokenizer::{TokenId, PAD};

#[derive(Clone, Debug, PartialEq)]
pub struct RnnConfig {
    pub vocab_size: usize,
    /// Embedding width and hidden size of both GRUs.
    pub d_model: usize,
    pub dropout: f64,
    pub max_src_len: usize,
}

impl RnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 || self.d_model == 0 || self.max_src_len == 0 {
            return Err(Error::Config(format!("sizes must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("d_model", self.d_model.to_string()),
            ("dropout", self.dropout.to_string()),
            ("max_src_len", self.max_src_len.to_string()),
        ]
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let cfg = RnnConfig {
            vocab_size: get(kv, "vocab_size")?,
            d_model: get(kv, "d_model")?,
            dropout: get(kv, "dropout")?,
            max_src_len: get(kv, "max_src_len")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Gate order in the stacked matrices: update, reset, candidate.
#[derive(Clone, Debug)]
struct Gru {
    input: Linear,
    hidden: ParamId,
    d: usize,
}

impl Gru {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, din: usize, d: usize, rng: &mut R) -> Self {
        let hidden = [xavier(d, d, rng), xavier(d, d, rng), xavier(d, d, rng)];
        let mut data = vec![0.0; d * 3 * d];
        for (k, m) in hidden.iter().enumerate() {
            for r in 0..d {
                data[r * 3 * d + k * d..r * 3 * d + (k + 1) * d].copy_from_slice(m.row(r));
            }
        }
        Gru {
            input: Linear::new(store, &format!("{name}.input"), din, 3 * d, rng),
            hidden: store.add(format!("{name}.hidden"), Tensor::from_parts(vec![d, 3 * d], data)),
            d,
        }
    }

    /// One step from a precomputed input projection `[1, 3d]`.
    fn step(&self, g: &mut Graph, store: &ParamStore, x_proj: Var, h: Var) -> Result<Var> {
        let d = self.d;
        let u = g.param(store, self.hidden);
        let h_proj = g.matmul(h, u)?;
        let xz = g.slice_cols(x_proj, 0, d)?;
        let xr = g.slice_cols(x_proj, d, d)?;
        let xn = g.slice_cols(x_proj, 2 * d, d)?;
        let hz = g.slice_cols(h_proj, 0, d)?;
        let hr = g.slice_cols(h_proj, d, d)?;
        let hn = g.slice_cols(h_proj, 2 * d, d)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let gated = g.mul(r, hn)?;
        let n = g.add(xn, gated)?;
        let n = g.tanh(n);
        // h' = n + z * (h - n)
        let diff = g.sub(h, n)?;
        let kept = g.mul(z, diff)?;
        g.add(n, kept)
    }
}

#[derive(Clone, Debug)]
pub struct RnnModel {
    cfg: RnnConfig,
    params: ParamStore,
    embedding: ParamId,
    encoder: Gru,
    decoder: Gru,
    att_keys: ParamId,
    att_query: ParamId,
    att_score: ParamId,
    output: Linear,
}

/// Encoder states and their attention key projection.
#[derive(Clone, Debug)]
pub struct RnnMemory {
    pub states: Tensor,
    pub keys: Tensor,
}

impl RnnModel {
    pub fn new<R: Rng + ?Sized>(cfg: RnnConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut params = ParamStore::new();
        let embedding = params.add("embedding", uniform_std(&[cfg.vocab_size, d], 0.1, rng));
        let encoder = Gru::new(&mut params, "encoder.gru", d, d, rng);
        let decoder = Gru::new(&mut params, "decoder.gru", 2 * d, d, rng);
        let att_keys = params.add("attention.keys", xavier(d, d, rng));
        let att_query = params.add("attention.query", xavier(d, d, rng));
        let att_score = params.add("attention.score", xavier(d, 1, rng));
        let output = Linear::new(&mut params, "output", 2 * d, cfg.vocab_size, rng);
        Ok(RnnModel {
            cfg,
            params,
            embedding,
            encoder,
            decoder,
            att_keys,
            att_query,
            att_score,
            output,
        })
    }

    pub fn config(&self) -> &RnnConfig {
        &self.cfg
    }

    pub fn set_embedding(&mut self, table: Tensor) -> Result<()> {
        self.params.set(self.embedding, table)
    }

    fn embed(&self, g: &mut Graph, ids: &[TokenId], training: bool, rng: &mut dyn RngCore) -> Result<Var> {
        let table = g.param(&self.params, self.embedding);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let e = g.gather_rows(table, &idx)?;
        g.dropout(e, self.cfg.dropout, training, rng)
    }

    /// Encoder states `[n, d]` over the non-PAD source tokens, plus their key projection.
    fn encode(&self, g: &mut Graph, src: &[TokenId], training: bool, rng: &mut dyn RngCore) -> Result<(Var, Var)> {
        if src.len() > self.cfg.max_src_len {
            return Err(Error::Contract(format!(
                "source of {} tokens exceeds max_src_len {}; truncate before encoding",
                src.len(),
                self.cfg.max_src_len
            )));
        }
        let src: Vec<TokenId> = src.iter().copied().filter(|&t| t != PAD).collect();
        if src.is_empty() {
            return Err(Error::Input("empty source sequence".into()));
        }
        let x = self.embed(g, &src, training, rng)?;
        let proj = self.encoder.input.forward(g, &self.params, x)?;
        let mut h = g.constant(Tensor::zeros(&[1, self.cfg.d_model]));
        let mut states = Vec::with_capacity(src.len());
        for t in 0..src.len() {
            let xt = g.slice_rows(proj, t, 1)?;
            h = self.encoder.step(g, &self.params, xt, h)?;
            states.push(h);
        }
        let states = if states.len() == 1 { states[0] } else { g.concat_rows(&states)? };
        let keys = g.param(&self.params, self.att_keys);
        let keys = g.matmul(states, keys)?;
        Ok((states, keys))
    }

    /// Context vector `[1, d]` and attention weights `[n, 1]` for decoder state `s`.
    fn attend(&self, g: &mut Graph, states: Var, keys: Var, s: Var) -> Result<(Var, Var)> {
        let w = g.param(&self.params, self.att_query);
        let q = g.matmul(s, w)?;
        let e = g.add_row(keys, q)?;
        let e = g.tanh(e);
        let v = g.param(&self.params, self.att_score);
        let scores = g.matmul(e, v)?;
        let alpha = g.softmax(scores, 0)?;
        let alpha_t = g.transpose(alpha)?;
        Ok((g.matmul(alpha_t, states)?, alpha))
    }

    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        g: &mut Graph,
        states: Var,
        keys: Var,
        tgt_in: &[TokenId],
        training: bool,
        rng: &mut dyn RngCore,
        mut weights: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        if tgt_in.is_empty() {
            return Err(Error::Contract("decoder prefix must start with BOS".into()));
        }
        let n = g.shape(states)[0];
        let mut s = g.slice_rows(states, n - 1, 1)?;
        let emb = self.embed(g, tgt_in, training, rng)?;
        let mut rows = Vec::with_capacity(tgt_in.len());
        for t in 0..tgt_in.len() {
            let (c, alpha) = self.attend(g, states, keys, s)?;
            if let Some(w) = weights.as_deref_mut() {
                w.push(g.value(alpha).clone());
            }
            let y = g.slice_rows(emb, t, 1)?;
            let input = g.concat_cols(&[y, c])?;
            let proj = self.decoder.input.forward(g, &self.params, input)?;
            s = self.decoder.step(g, &self.params, proj, s)?;
            let out = g.concat_cols(&[s, c])?;
            let out = g.dropout(out, self.cfg.dropout, training, rng)?;
            rows.push(self.output.forward(g, &self.params, out)?);
        }
        let logits = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
        g.log_softmax(logits, 1)
    }

    /// Attention weights over the (PAD-free) source for every decoder step.
    pub fn attention_weights(&self, src: &[TokenId], tgt_in: &[TokenId]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let mut rng = rand_chacha::ChaCha8Rng::from_seed([0; 32]);
        let (states, keys) = self.encode(&mut g, src, false, &mut rng)?;
        let mut weights = Vec::new();
        self.decode(&mut g, states, keys, tgt_in, false, &mut rng, Some(&mut weights))?;
        Ok(weights)
    }
}

impl Seq2Seq for RnnModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn max_src_len(&self) -> usize {
        self.cfg.max_src_len
    }

    fn log_probs(
        &self,
        g: &mut Graph,
        src: &[TokenId],
        tgt_in: &[TokenId],
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let (states, keys) = self.encode(g, src, training, rng)?;
        self.decode(g, states, keys, tgt_in, training, rng, None)
    }
}

impl NextToken for RnnModel {
    type Memory = RnnMemory;

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn encode_source(&self, src: &[TokenId]) -> Result<RnnMemory> {
        let mut g = Graph::new();
        let mut rng = rand_chacha::ChaCha8Rng::from_seed([0; 32]);
        let (states, keys) = self.encode(&mut g, src, false, &mut rng)?;
        Ok(RnnMemory {
            states: g.value(states).clone(),
            keys: g.value(keys).clone(),
        })
    }

    fn next_log_probs(&self, memory: &RnnMemory, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut rng = rand_chacha::ChaCha8Rng::from_seed([0; 32]);
        let states = g.constant(memory.states.clone());
        let keys = g.constant(memory.keys.clone());
        let lp = self.decode(&mut g, states, keys, prefix, false, &mut rng, None)?;
        Ok(g.value(lp).row(prefix.len() - 1).to_vec())
    }
}
