//! Greedy and beam-search generation over any [`NextToken`] model.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::NextToken;
use crate::tokenizer::{TokenId, TokenSequence, BOS, EOS};

/// Default generation budget in tokens after BOS, EOS included.
pub const DEFAULT_MAX_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Starts with BOS; ends with EOS when finished.
    pub ids: TokenSequence,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn root() -> Self {
        Hypothesis {
            ids: vec![BOS],
            log_prob: 0.0,
            finished: false,
        }
    }

    /// Generated tokens, without BOS and EOS.
    pub fn tokens(&self) -> &[TokenId] {
        let end = if self.finished { self.ids.len() - 1 } else { self.ids.len() };
        &self.ids[1..end]
    }

    /// Log-probability per generated token.
    pub fn normalized_score(&self) -> f64 {
        self.log_prob / (self.ids.len() - 1).max(1) as f64
    }
}

/// Index of the largest entry, ties to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::Param("max_len must be at least 1".into()));
    }
    Ok(())
}

/// Greedy search returning the full hypothesis.
pub fn greedy_hypothesis<M: NextToken + ?Sized>(model: &M, src: &[TokenId], max_len: usize) -> Result<Hypothesis> {
    check_max_len(max_len)?;
    let memory = model.encode_source(src)?;
    let mut hyp = Hypothesis::root();
    while hyp.ids.len() <= max_len {
        let lp = model.next_log_probs(&memory, &hyp.ids)?;
        let next = argmax(&lp);
        hyp.ids.push(next as TokenId);
        hyp.log_prob += lp[next];
        if next as TokenId == EOS {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Most probable next token at every step; at most `max_len` tokens are
/// produced, EOS included. Returns the tokens without BOS and EOS.
pub fn greedy_decode<M: NextToken + ?Sized>(model: &M, src: &[TokenId], max_len: usize) -> Result<TokenSequence> {
    Ok(greedy_hypothesis(model, src, max_len)?.tokens().to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
    /// Select the final hypothesis by log-probability per token instead of
    /// total log-probability.
    pub length_normalize: bool,
}

impl BeamConfig {
    pub fn new(beam: usize) -> Self {
        BeamConfig {
            beam,
            max_len: DEFAULT_MAX_LEN,
            length_normalize: true,
        }
    }

    fn score(&self, h: &Hypothesis) -> f64 {
        if self.length_normalize {
            h.normalized_score()
        } else {
            h.log_prob
        }
    }
}

struct Candidate {
    parent: usize,
    token: TokenId,
    log_prob: f64,
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Beam search. Each step expands every live hypothesis by every token,
/// keeps the `beam` best expansions by total log-probability (ties to the
/// better-ranked parent, then the lower token id), and moves those ending in
/// EOS to a finished pool that holds at most `beam` entries. The result is
/// the best finished hypothesis, or the best live one if none finished.
pub fn beam_search<M: NextToken + ?Sized>(model: &M, src: &[TokenId], cfg: &BeamConfig) -> Result<Hypothesis> {
    if cfg.beam == 0 {
        return Err(Error::Param("beam size must be at least 1".into()));
    }
    check_max_len(cfg.max_len)?;
    let memory = model.encode_source(src)?;
    let mut live = vec![Hypothesis::root()];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let mut candidates = Vec::with_capacity(live.len() * model.vocab_size());
        for (parent, hyp) in live.iter().enumerate() {
            let lp = model.next_log_probs(&memory, &hyp.ids)?;
            candidates.extend(lp.iter().enumerate().map(|(token, &l)| Candidate {
                parent,
                token: token as TokenId,
                log_prob: hyp.log_prob + l,
            }));
        }
        candidates.sort_by(|a, b| {
            by_score_desc(a.log_prob, b.log_prob)
                .then(a.parent.cmp(&b.parent))
                .then(a.token.cmp(&b.token))
        });
        candidates.truncate(cfg.beam);

        let mut next = Vec::with_capacity(cfg.beam);
        for c in candidates {
            let mut ids = live[c.parent].ids.clone();
            ids.push(c.token);
            let done = c.token == EOS;
            let hyp = Hypothesis {
                ids,
                log_prob: c.log_prob,
                finished: done,
            };
            if done {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        // stable sort keeps earlier (better-ranked) entries first on ties
        finished.sort_by(|a, b| by_score_desc(cfg.score(a), cfg.score(b)));
        finished.truncate(cfg.beam);
        live = next;
    }

    let pool = if finished.is_empty() { &live } else { &finished };
    let best = pool
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| by_score_desc(cfg.score(a), cfg.score(b)).then(i.cmp(j)))
        .map(|(_, h)| h.clone())
        .expect("beam search keeps at least one hypothesis");
    Ok(best)
}

/// Beam search returning the generated tokens without BOS and EOS.
pub fn beam_decode<M: NextToken + ?Sized>(model: &M, src: &[TokenId], cfg: &BeamConfig) -> Result<TokenSequence> {
    Ok(beam_search(model, src, cfg)?.tokens().to_vec())
}

/// Total log-probability of `ids` (starting with BOS) recomputed one step
/// at a time.
pub fn score_sequence<M: NextToken + ?Sized>(model: &M, src: &[TokenId], ids: &[TokenId]) -> Result<f64> {
    if ids.first() != Some(&BOS) {
        return Err(Error::Input("sequence must start with BOS".into()));
    }
    let memory = model.encode_source(src)?;
    let mut total = 0.0;
    for t in 1..ids.len() {
        let lp = model.next_log_probs(&memory, &ids[..t])?;
        total += lp[ids[t] as usize];
    }
    Ok(total)
}
