//! Skip-gram with negative sampling over BPE token streams, and the
//! embedding table handed to the models.

use std::io::{Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
}

impl EmbeddingTable {
    pub fn vocab_size(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// `emb-v1 <vocab> <dim>` line, then row-major little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format("embedding file", m);
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not UTF-8"))?;
        let fields: Vec<&str> = header.split(' ').collect();
        let (vocab, dim) = match fields.as_slice() {
            ["emb-v1", v, d] => (
                v.parse::<usize>().map_err(|_| bad("bad vocabulary size"))?,
                d.parse::<usize>().map_err(|_| bad("bad dimension"))?,
            ),
            _ => return Err(bad("expected `emb-v1 <vocab> <dim>`")),
        };
        let body = &bytes[nl + 1..];
        if body.len() != vocab * dim * 8 {
            return Err(bad(&format!("expected {} bytes of values, found {}", vocab * dim * 8, body.len())));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let matrix = Tensor::new(&[vocab, dim], data)?;
        if !matrix.is_finite() {
            return Err(bad("non-finite value"));
        }
        Ok(EmbeddingTable { matrix })
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "emb-v1 {} {}", self.vocab_size(), self.dim())?;
        for v in self.matrix.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgnsConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Starting learning rate, decayed linearly towards zero.
    pub learning_rate: f64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        SgnsConfig {
            dim: 512,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loss `−log σ(o₀·c) − Σₖ log σ(−oₖ·c)` for a center vector `c`, the
/// positive output vector `o₀` and negative output vectors `oₖ`, with its
/// gradient with respect to `c` and each `o`.
pub fn pair_loss(center: &[f64], outputs: &[&[f64]]) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let mut loss = 0.0;
    let mut grad_center = vec![0.0; center.len()];
    let mut grad_outputs = Vec::with_capacity(outputs.len());
    for (k, o) in outputs.iter().enumerate() {
        let label = if k == 0 { 1.0 } else { 0.0 };
        let s = dot(center, o);
        let p = sigmoid(s);
        // −log σ(s) for the positive, −log σ(−s) for negatives, computed stably
        loss += if k == 0 { softplus(-s) } else { softplus(s) };
        let coeff = p - label;
        for (g, &x) in grad_center.iter_mut().zip(o.iter()) {
            *g += coeff * x;
        }
        grad_outputs.push(center.iter().map(|&c| coeff * c).collect());
    }
    (loss, grad_center, grad_outputs)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Random input vectors `U(−0.5/d, 0.5/d)`, as in word2vec.
pub fn random_table(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> EmbeddingTable {
    let a = 0.5 / dim as f64;
    let data = (0..vocab_size * dim).map(|_| rng.random_range(-a..a)).collect();
    EmbeddingTable {
        matrix: Tensor::new(&[vocab_size, dim], data).expect("sizes match"),
    }
}

/// Trained table plus the mean loss per epoch.
pub struct SgnsOutcome {
    pub table: EmbeddingTable,
    pub epoch_losses: Vec<f64>,
}

pub fn train_sgns(
    corpus: &[TokenSequence],
    vocab_size: usize,
    cfg: &SgnsConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SgnsOutcome> {
    if cfg.dim == 0 || cfg.window == 0 {
        return Err(Error::Config("embedding dim and window must be positive".into()));
    }
    let total: usize = corpus.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Input("embedding corpus has no tokens".into()));
    }
    let mut counts = vec![0f64; vocab_size];
    for &t in corpus.iter().flatten() {
        let slot = counts
            .get_mut(t as usize)
            .ok_or(Error::Vocab { id: t, size: vocab_size })?;
        *slot += 1.0;
    }
    let noise = WeightedIndex::new(counts.iter().map(|c| c.powf(0.75))).expect("corpus has tokens");

    let d = cfg.dim;
    let mut input = random_table(vocab_size, d, rng).matrix.into_data();
    let mut output = vec![0.0; vocab_size * d];
    let pairs_per_epoch: usize = corpus
        .iter()
        .map(|s| (0..s.len()).map(|i| i.min(cfg.window) + (s.len() - 1 - i).min(cfg.window)).sum::<usize>())
        .sum();
    let total_pairs = (pairs_per_epoch * cfg.epochs).max(1);
    let mut seen = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut negs = Vec::with_capacity(cfg.negatives);

    for _ in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut n_pairs = 0usize;
        for sent in corpus {
            for (i, &center) in sent.iter().enumerate() {
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window + 1).min(sent.len());
                for (j, &context) in sent.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    let lr = (cfg.learning_rate * (1.0 - seen as f64 / total_pairs as f64)).max(cfg.learning_rate * 1e-4);
                    seen += 1;
                    negs.clear();
                    for _ in 0..cfg.negatives {
                        let n = noise.sample(rng);
                        if n != context as usize {
                            negs.push(n);
                        }
                    }
                    let c = center as usize * d;
                    let outputs: Vec<&[f64]> = std::iter::once(context as usize)
                        .chain(negs.iter().copied())
                        .map(|o| &output[o * d..(o + 1) * d])
                        .collect();
                    let (loss, gc, go) = pair_loss(&input[c..c + d], &outputs);
                    loss_sum += loss;
                    n_pairs += 1;
                    for (k, o) in std::iter::once(context as usize).chain(negs.iter().copied()).enumerate() {
                        for (w, g) in output[o * d..(o + 1) * d].iter_mut().zip(&go[k]) {
                            *w -= lr * g;
                        }
                    }
                    for (w, g) in input[c..c + d].iter_mut().zip(&gc) {
                        *w -= lr * g;
                    }
                }
            }
        }
        epoch_losses.push(if n_pairs > 0 { loss_sum / n_pairs as f64 } else { 0.0 });
    }
    let matrix = Tensor::new(&[vocab_size, d], input)?;
    if !matrix.is_finite() {
        return Err(Error::NonFinite("embedding table".into()));
    }
    Ok(SgnsOutcome {
        table: EmbeddingTable { matrix },
        epoch_losses,
    })
}

pub enum InitStrategy<'a> {
    Random,
    Pretrained(&'a EmbeddingTable),
}

/// The model's starting embedding table. Random tables use the model's own
/// scale `d^-0.5` (uniform with that standard deviation).
pub fn init_embeddings(
    strategy: InitStrategy<'_>,
    vocab_size: usize,
    d_model: usize,
    rng: &mut impl Rng,
) -> Result<EmbeddingTable> {
    match strategy {
        InitStrategy::Random => {
            let a = (3.0 / d_model as f64).sqrt();
            let data = (0..vocab_size * d_model).map(|_| rng.random_range(-a..a)).collect();
            Ok(EmbeddingTable {
                matrix: Tensor::new(&[vocab_size, d_model], data)?,
            })
        }
        InitStrategy::Pretrained(table) => {
            if table.vocab_size() != vocab_size || table.dim() != d_model {
                return Err(Error::Config(format!(
                    "embedding table is {}x{}, model expects {vocab_size}x{d_model}",
                    table.vocab_size(),
                    table.dim()
                )));
            }
            Ok(table.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg(dim: usize, epochs: usize) -> SgnsConfig {
        SgnsConfig {
            dim,
            window: 2,
            negatives: 3,
            epochs,
            learning_rate: 0.05,
        }
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let corpus = vec![vec![3, 4, 5, 6]];
        let out = train_sgns(&corpus, 8, &cfg(4, 0), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let init = random_table(8, 4, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(out.table, init);
    }

    #[test]
    fn empty_corpus_is_input_error() {
        let r = train_sgns(&[vec![]], 8, &cfg(4, 1), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(r, Err(Error::Input(_))));
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    }

    #[test]
    fn co_occurring_tokens_end_up_closer() {
        // A=3 always beside B=4; C=5 only ever beside D=6
        let mut corpus = Vec::new();
        for i in 0..200 {
            corpus.push(if i % 2 == 0 { vec![3, 4, 7, 3, 4] } else { vec![5, 6, 8, 6, 5] });
        }
        let out = train_sgns(&corpus, 9, &cfg(16, 5), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let m = &out.table.matrix;
        assert!(cosine(m.row(3), m.row(4)) > cosine(m.row(3), m.row(5)));
    }

    #[test]
    fn loss_falls_over_first_epochs() {
        let corpus: Vec<_> = (0..50u32).map(|i| vec![3 + i % 3, 6, 3 + (i + 1) % 3, 7, 8]).collect();
        let out = train_sgns(&corpus, 9, &cfg(8, 3), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let l = out.epoch_losses;
        assert!(l[0] > l[1] && l[1] > l[2], "{l:?}");
        assert!(out.table.matrix.is_finite());
    }

    #[test]
    fn pair_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // five-token vocabulary: center 0, positive 1, negatives 2..5
        let vecs: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let eval = |v: &[Vec<f64>]| {
            let outs: Vec<&[f64]> = v[1..].iter().map(Vec::as_slice).collect();
            pair_loss(&v[0], &outs).0
        };
        let outs: Vec<&[f64]> = vecs[1..].iter().map(Vec::as_slice).collect();
        let (_, gc, go) = pair_loss(&vecs[0], &outs);
        let analytic: Vec<Vec<f64>> = std::iter::once(gc).chain(go).collect();
        let h = 1e-5;
        let mut work = vecs.clone();
        for (i, grad) in analytic.iter().enumerate() {
            let mut numeric = vec![0.0; 4];
            for j in 0..4 {
                let orig = work[i][j];
                work[i][j] = orig + h;
                let plus = eval(&work);
                work[i][j] = orig - h;
                let minus = eval(&work);
                work[i][j] = orig;
                numeric[j] = (plus - minus) / (2.0 * h);
            }
            let diff: f64 = grad.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = dot(grad, grad).sqrt().max(dot(&numeric, &numeric).sqrt());
            assert!(diff / scale < 1e-4, "vector {i}");
        }
    }

    #[test]
    fn init_strategies() {
        let a = init_embeddings(InitStrategy::Random, 6, 4, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = init_embeddings(InitStrategy::Random, 6, 4, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        let passed = init_embeddings(InitStrategy::Pretrained(&a), 6, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(passed, a);
        let wrong = init_embeddings(InitStrategy::Pretrained(&a), 7, 4, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(wrong, Err(Error::Config(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let t = random_table(5, 3, &mut ChaCha8Rng::seed_from_u64(8));
        t.save(&path).unwrap();
        assert_eq!(EmbeddingTable::load(&path).unwrap(), t);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        assert!(matches!(EmbeddingTable::from_bytes(&bytes), Err(Error::Format { .. })));
    }
}
