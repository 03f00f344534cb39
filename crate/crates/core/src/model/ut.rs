//! Universal Transformer encoder-decoder.
//!
//! Each side owns one block of attention, feed-forward and normalization
//! parameters that is applied `n_steps` times. Before every step the sum of a
//! sinusoidal position embedding and a sinusoidal timestep embedding is added
//! to the state. Sublayers are `norm(x + dropout(sublayer(x)))`.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};

use super::layers::{coordinate_embedding, uniform_std, Attention, FeedForward, Linear, Norm};
use super::{NextToken, Seq2Seq};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::tokenizer::{TokenId, PAD};

#[derive(Clone, Debug, PartialEq)]
pub struct UtConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Depth steps of the shared block on each side.
    pub n_steps: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_src_len: usize,
    /// Output projection is the transposed embedding table.
    pub tie_output: bool,
    /// One block per depth step instead of a single shared block.
    pub untied_depth: bool,
}

impl UtConfig {
    /// Full-scale settings: 512-wide, 8 heads, 4 steps, dropout 0.3, 40k
    /// vocabulary and 2000-token sources.
    pub fn full_scale() -> Self {
        UtConfig {
            vocab_size: 40_000,
            d_model: 512,
            n_heads: 8,
            n_steps: 4,
            d_ff: 2048,
            dropout: 0.3,
            max_src_len: 2000,
            tie_output: true,
            untied_depth: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_steps == 0 {
            return fail("n_steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.vocab_size < 3 || self.d_ff == 0 || self.max_src_len == 0 {
            return fail(format!("vocab_size, d_ff and max_src_len must be positive: {self:?}"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_steps", self.n_steps.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("dropout", self.dropout.to_string()),
            ("max_src_len", self.max_src_len.to_string()),
            ("tie_output", self.tie_output.to_string()),
            ("untied_depth", self.untied_depth.to_string()),
        ]
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let cfg = UtConfig {
            vocab_size: get(kv, "vocab_size")?,
            d_model: get(kv, "d_model")?,
            n_heads: get(kv, "n_heads")?,
            n_steps: get(kv, "n_steps")?,
            d_ff: get(kv, "d_ff")?,
            dropout: get(kv, "dropout")?,
            max_src_len: get(kv, "max_src_len")?,
            tie_output: get(kv, "tie_output")?,
            untied_depth: get(kv, "untied_depth")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = kv
        .get(key)
        .ok_or_else(|| Error::Config(format!("missing model setting `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::Config(format!("bad value `{raw}` for model setting `{key}`")))
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    self_attn: Attention,
    attn_norm: Norm,
    ffn: FeedForward,
    ffn_norm: Norm,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    self_attn: Attention,
    self_norm: Norm,
    cross_attn: Attention,
    cross_norm: Norm,
    ffn: FeedForward,
    ffn_norm: Norm,
}

#[derive(Clone, Debug)]
pub struct UtModel {
    cfg: UtConfig,
    params: ParamStore,
    embedding: ParamId,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    output: Option<ParamId>,
    output_bias: ParamId,
}

/// Encoder states for one source, reused across decoding steps.
#[derive(Clone, Debug)]
pub struct UtMemory {
    pub states: Tensor,
    pub src_keep: Vec<bool>,
}

/// Attention weights recorded during a forward pass, per depth step and head.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub encoder_self: Vec<Vec<Tensor>>,
    pub decoder_self: Vec<Vec<Tensor>>,
    pub decoder_cross: Vec<Vec<Tensor>>,
}

impl UtModel {
    pub fn new<R: Rng + ?Sized>(cfg: UtConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut params = ParamStore::new();
        let embedding = params.add("embedding", uniform_std(&[cfg.vocab_size, d], (d as f64).powf(-0.5), rng));
        let blocks = if cfg.untied_depth { cfg.n_steps } else { 1 };
        let encoder = (0..blocks)
            .map(|b| {
                let p = format!("encoder.{b}");
                EncoderBlock {
                    self_attn: Attention::new(&mut params, &format!("{p}.self_attn"), d, cfg.n_heads, rng),
                    attn_norm: Norm::new(&mut params, &format!("{p}.self_attn_norm"), d),
                    ffn: FeedForward::new(&mut params, &format!("{p}.ffn"), d, cfg.d_ff, rng),
                    ffn_norm: Norm::new(&mut params, &format!("{p}.ffn_norm"), d),
                }
            })
            .collect();
        let decoder = (0..blocks)
            .map(|b| {
                let p = format!("decoder.{b}");
                DecoderBlock {
                    self_attn: Attention::new(&mut params, &format!("{p}.self_attn"), d, cfg.n_heads, rng),
                    self_norm: Norm::new(&mut params, &format!("{p}.self_attn_norm"), d),
                    cross_attn: Attention::new(&mut params, &format!("{p}.cross_attn"), d, cfg.n_heads, rng),
                    cross_norm: Norm::new(&mut params, &format!("{p}.cross_attn_norm"), d),
                    ffn: FeedForward::new(&mut params, &format!("{p}.ffn"), d, cfg.d_ff, rng),
                    ffn_norm: Norm::new(&mut params, &format!("{p}.ffn_norm"), d),
                }
            })
            .collect();
        let (output, output_bias) = if cfg.tie_output {
            (None, params.add("output.b", Tensor::zeros(&[cfg.vocab_size])))
        } else {
            let linear = Linear::new(&mut params, "output", d, cfg.vocab_size, rng);
            (Some(linear.w), linear.b)
        };
        Ok(UtModel {
            cfg,
            params,
            embedding,
            encoder,
            decoder,
            output,
            output_bias,
        })
    }

    pub fn config(&self) -> &UtConfig {
        &self.cfg
    }

    pub fn embedding(&self) -> &Tensor {
        self.params.get(self.embedding)
    }

    /// Replaces the shared input embedding (and tied output projection).
    pub fn set_embedding(&mut self, table: Tensor) -> Result<()> {
        self.params.set(self.embedding, table)
    }

    fn encoder_block(&self, step: usize) -> &EncoderBlock {
        &self.encoder[step.min(self.encoder.len() - 1)]
    }

    fn decoder_block(&self, step: usize) -> &DecoderBlock {
        &self.decoder[step.min(self.decoder.len() - 1)]
    }

    fn embed(&self, g: &mut Graph, ids: &[TokenId]) -> Result<Var> {
        let table = g.param(&self.params, self.embedding);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let e = g.gather_rows(table, &idx)?;
        Ok(g.scale(e, (self.cfg.d_model as f64).sqrt()))
    }

    fn add_coordinates(&self, g: &mut Graph, x: Var, step: usize) -> Result<Var> {
        let len = g.shape(x)[0];
        let coords = g.constant(coordinate_embedding(len, step + 1, self.cfg.d_model));
        g.add(x, coords)
    }

    fn residual(
        &self,
        g: &mut Graph,
        x: Var,
        sub: Var,
        norm: &Norm,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let dropped = g.dropout(sub, self.cfg.dropout, training, rng)?;
        let sum = g.add(x, dropped)?;
        norm.forward(g, &self.params, sum)
    }

    /// Encoder states `[src.len(), d_model]`.
    pub fn encode(
        &self,
        g: &mut Graph,
        src: &[TokenId],
        training: bool,
        rng: &mut dyn RngCore,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        if src.is_empty() {
            return Err(Error::Input("empty source sequence".into()));
        }
        if src.len() > self.cfg.max_src_len {
            return Err(Error::Contract(format!(
                "source of {} tokens exceeds max_src_len {}; truncate before encoding",
                src.len(),
                self.cfg.max_src_len
            )));
        }
        let n = src.len();
        let keep: Vec<bool> = (0..n * n).map(|i| src[i % n] != PAD).collect();
        let mut h = self.embed(g, src)?;
        for step in 0..self.cfg.n_steps {
            let block = self.encoder_block(step);
            h = self.add_coordinates(g, h, step)?;
            let att = block.self_attn.forward(g, &self.params, h, h, &keep)?;
            if let Some(t) = trace.as_deref_mut() {
                t.encoder_self.push(att.weights.iter().map(|&w| g.value(w).clone()).collect());
            }
            h = self.residual(g, h, att.output, &block.attn_norm, training, rng)?;
            let ff = block.ffn.forward(g, &self.params, h)?;
            h = self.residual(g, h, ff, &block.ffn_norm, training, rng)?;
        }
        Ok(h)
    }

    /// Log-probabilities `[tgt_in.len(), vocab]` given encoder states.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        g: &mut Graph,
        memory: Var,
        src_keep: &[bool],
        tgt_in: &[TokenId],
        training: bool,
        rng: &mut dyn RngCore,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        if tgt_in.is_empty() {
            return Err(Error::Contract("decoder prefix must start with BOS".into()));
        }
        let t = tgt_in.len();
        let s = src_keep.len();
        let self_keep: Vec<bool> = (0..t * t)
            .map(|i| {
                let (q, k) = (i / t, i % t);
                k <= q && tgt_in[k] != PAD
            })
            .collect();
        let cross_keep: Vec<bool> = (0..t * s).map(|i| src_keep[i % s]).collect();
        let mut h = self.embed(g, tgt_in)?;
        for step in 0..self.cfg.n_steps {
            let block = self.decoder_block(step);
            h = self.add_coordinates(g, h, step)?;
            let att = block.self_attn.forward(g, &self.params, h, h, &self_keep)?;
            h = self.residual(g, h, att.output, &block.self_norm, training, rng)?;
            let cross = block.cross_attn.forward(g, &self.params, h, memory, &cross_keep)?;
            h = self.residual(g, h, cross.output, &block.cross_norm, training, rng)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.decoder_self.push(att.weights.iter().map(|&w| g.value(w).clone()).collect());
                tr.decoder_cross.push(cross.weights.iter().map(|&w| g.value(w).clone()).collect());
            }
            let ff = block.ffn.forward(g, &self.params, h)?;
            h = self.residual(g, h, ff, &block.ffn_norm, training, rng)?;
        }
        let logits = match self.output {
            Some(w) => {
                let w = g.param(&self.params, w);
                g.matmul(h, w)?
            }
            None => {
                let table = g.param(&self.params, self.embedding);
                g.matmul_nt(h, table)?
            }
        };
        let bias = g.param(&self.params, self.output_bias);
        let logits = g.add_row(logits, bias)?;
        g.log_softmax(logits, 1)
    }

    /// Forward pass that also records every attention distribution.
    pub fn trace(&self, src: &[TokenId], tgt_in: &[TokenId]) -> Result<(Tensor, AttentionTrace)> {
        let mut g = Graph::new();
        let mut rng = rand_chacha::ChaCha8Rng::from_seed([0; 32]);
        let mut trace = AttentionTrace::default();
        let memory = self.encode(&mut g, src, false, &mut rng, Some(&mut trace))?;
        let keep: Vec<bool> = src.iter().map(|&t| t != PAD).collect();
        let lp = self.decode(&mut g, memory, &keep, tgt_in, false, &mut rng, Some(&mut trace))?;
        Ok((g.value(lp).clone(), trace))
    }
}

impl Seq2Seq for UtModel {
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
        let memory = self.encode(g, src, training, rng, None)?;
        let keep: Vec<bool> = src.iter().map(|&t| t != PAD).collect();
        self.decode(g, memory, &keep, tgt_in, training, rng, None)
    }
}

impl NextToken for UtModel {
    type Memory = UtMemory;

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn encode_source(&self, src: &[TokenId]) -> Result<UtMemory> {
        let mut g = Graph::new();
        let mut rng = rand_chacha::ChaCha8Rng::from_seed([0; 32]);
        let states = self.encode(&mut g, src, false, &mut rng, None)?;
        Ok(UtMemory {
            states: g.value(states).clone(),
            src_keep: src.iter().map(|&t| t != PAD).collect(),
        })
    }

    fn next_log_probs(&self, memory: &UtMemory, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut rng = rand_chacha::ChaCha8Rng::from_seed([0; 32]);
        let mem = g.constant(memory.states.clone());
        let lp = self.decode(&mut g, mem, &memory.src_keep, prefix, false, &mut rng, None)?;
        let value = g.value(lp);
        Ok(value.row(prefix.len() - 1).to_vec())
    }
}
