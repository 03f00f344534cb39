//! End-to-end run: filter, split, tokenizer, embeddings, training,
//! generation and evaluation, all seeded from one root seed.

use rand::Rng;

use crate::baselines::first_sentence;
use crate::corpus::{apply_filters, split, Article, FilterSpec, SplitManifest};
use crate::decoding::{beam_decode, greedy_decode, BeamConfig};
use crate::embeddings::{init_embeddings, train_sgns, EmbeddingTable, InitStrategy, SgnsConfig};
use crate::error::{Error, Result};
use crate::model::{AnyModel, RnnConfig, RnnModel, UtConfig, UtModel};
use crate::rouge::{evaluate_corpus, RougeReport};
use crate::seed::rng_for;
use crate::tokenizer::{train_bpe, BpeModel};
use crate::training::{train, Example, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Ut,
    Rnn,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ut" => Ok(ModelKind::Ut),
            "rnn" => Ok(ModelKind::Rnn),
            other => Err(Error::Config(format!("unknown model `{other}` (expected ut or rnn)"))),
        }
    }
}

/// Architecture settings shared by both model kinds; the vocabulary size
/// comes from the trained tokenizer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub kind: ModelKind,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_steps: usize,
    pub dropout: f64,
    pub tie_output: bool,
    pub untied_depth: bool,
    /// Initialize the embedding table from skip-gram vectors.
    pub pretrained_embeddings: bool,
}

impl ModelSettings {
    pub fn build(&self, vocab_size: usize, max_src_len: usize, rng: &mut impl Rng) -> Result<AnyModel> {
        Ok(match self.kind {
            ModelKind::Ut => AnyModel::Ut(UtModel::new(
                UtConfig {
                    vocab_size,
                    d_model: self.d_model,
                    n_heads: self.n_heads,
                    n_steps: self.n_steps,
                    d_ff: 4 * self.d_model,
                    dropout: self.dropout,
                    max_src_len,
                    tie_output: self.tie_output,
                    untied_depth: self.untied_depth,
                },
                rng,
            )?),
            ModelKind::Rnn => AnyModel::Rnn(RnnModel::new(
                RnnConfig {
                    vocab_size,
                    d_model: self.d_model,
                    dropout: self.dropout,
                    max_src_len,
                },
                rng,
            )?),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub filter: FilterSpec,
    pub test_size: usize,
    pub val_fraction: f64,
    pub bpe_vocab: usize,
    pub sgns: SgnsConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
    /// Beam size; 1 decodes greedily.
    pub beam: usize,
    pub max_len: usize,
    pub length_normalize: bool,
}

impl PipelineConfig {
    /// Full-scale settings: 40k BPE vocabulary, 512-wide UT with 8 heads and
    /// 4 steps, dropout 0.3, 20k test articles, beam 10.
    pub fn full_scale() -> Self {
        PipelineConfig {
            seed: 0,
            filter: FilterSpec::default(),
            test_size: 20_000,
            val_fraction: 0.01,
            bpe_vocab: 40_000,
            sgns: SgnsConfig::default(),
            model: ModelSettings {
                kind: ModelKind::Ut,
                d_model: 512,
                n_heads: 8,
                n_steps: 4,
                dropout: 0.3,
                tie_output: true,
                untied_depth: false,
                pretrained_embeddings: true,
            },
            train: TrainConfig::default(),
            beam: 10,
            max_len: crate::decoding::DEFAULT_MAX_LEN,
            length_normalize: true,
        }
    }

    /// Laptop-sized bundle: 500-token vocabulary, 64-wide UT with 2 heads
    /// and 2 steps.
    pub fn micro() -> Self {
        let full = Self::full_scale();
        PipelineConfig {
            test_size: 100,
            val_fraction: 0.05,
            bpe_vocab: 500,
            sgns: SgnsConfig {
                dim: 64,
                epochs: 2,
                ..SgnsConfig::default()
            },
            model: ModelSettings {
                d_model: 64,
                n_heads: 2,
                n_steps: 2,
                dropout: 0.0,
                ..full.model
            },
            train: TrainConfig {
                warmup_steps: 200,
                lr_scale: 1.0,
                batch_tokens: 1500,
                max_src_tokens: 100,
                eval_every: 100,
                max_steps: 1500,
                patience: 3,
                ..TrainConfig::default()
            },
            beam: 4,
            // a 500-token vocabulary splits rare title words into many pieces
            max_len: 40,
            ..full
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.train.validate()?;
        if self.beam == 0 || self.max_len == 0 {
            return Err(Error::Config("beam and max_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig {
            beam: self.beam,
            max_len: self.max_len,
            length_normalize: self.length_normalize,
        }
    }
}

/// Tokenizer training text: every title and body.
pub fn bpe_corpus<'a>(articles: &'a [&'a Article]) -> impl Iterator<Item = &'a str> {
    articles.iter().flat_map(|a| [a.title.as_str(), a.body.as_str()])
}

impl ModelKind {
    pub fn of(model: &AnyModel) -> Self {
        match model {
            AnyModel::Ut(_) => ModelKind::Ut,
            AnyModel::Rnn(_) => ModelKind::Rnn,
        }
    }

    /// The text a model of this kind reads: the whole body for UT, the
    /// first sentence for the recurrent baseline.
    pub fn source<'a>(self, article: &'a Article) -> std::borrow::Cow<'a, str> {
        match self {
            ModelKind::Ut => article.body.as_str().into(),
            ModelKind::Rnn => first_sentence(&article.body).unwrap_or_default().into(),
        }
    }
}

pub fn examples(bpe: &BpeModel, articles: &[&Article], cfg: &TrainConfig, kind: ModelKind) -> Vec<Example> {
    articles
        .iter()
        .map(|a| {
            let source = Article::new(a.title.as_str(), kind.source(a));
            Example::from_article(bpe, &source, cfg.max_src_tokens, cfg.max_title_tokens)
        })
        .filter(|e| !e.src.is_empty())
        .collect()
}

/// Skip-gram vectors over the tokenized articles.
pub fn pretrain_embeddings(
    bpe: &BpeModel,
    articles: &[&Article],
    cfg: &SgnsConfig,
    seed: u64,
) -> Result<EmbeddingTable> {
    let streams: Vec<_> = bpe_corpus(articles).map(|t| bpe.encode(t)).collect();
    Ok(train_sgns(&streams, bpe.vocab_size(), cfg, &mut rng_for(seed, "embeddings"))?.table)
}

/// Builds a model and installs either pretrained or fresh embeddings.
pub fn initial_model(
    settings: &ModelSettings,
    vocab_size: usize,
    max_src_len: usize,
    pretrained: Option<&EmbeddingTable>,
    seed: u64,
) -> Result<AnyModel> {
    let mut rng = rng_for(seed, "model");
    let mut model = settings.build(vocab_size, max_src_len, &mut rng)?;
    let strategy = match pretrained {
        Some(t) => InitStrategy::Pretrained(t),
        None => InitStrategy::Random,
    };
    let table = init_embeddings(strategy, vocab_size, settings.d_model, &mut rng)?;
    match &mut model {
        AnyModel::Ut(m) => m.set_embedding(table.matrix)?,
        AnyModel::Rnn(m) => m.set_embedding(table.matrix)?,
    }
    Ok(model)
}

/// Headline for each article, from the source text the model was trained on
/// truncated to `max_src_tokens`.
pub fn generate_titles(
    model: &AnyModel,
    bpe: &BpeModel,
    articles: &[&Article],
    beam: &BeamConfig,
    max_src_tokens: usize,
) -> Result<Vec<String>> {
    articles
        .iter()
        .map(|a| {
            let mut src = bpe.encode(&ModelKind::of(model).source(a));
            src.truncate(max_src_tokens);
            if src.is_empty() {
                return Ok(String::new());
            }
            let ids = if beam.beam == 1 {
                greedy_decode(model, &src, beam.max_len)?
            } else {
                beam_decode(model, &src, beam)?
            };
            bpe.decode(&ids)
        })
        .collect()
}

pub fn first_sentence_titles(articles: &[&Article]) -> Result<Vec<String>> {
    articles.iter().map(|a| first_sentence(&a.body)).collect()
}

pub fn score(articles: &[&Article], hypotheses: &[String]) -> Result<RougeReport> {
    evaluate_corpus(articles.iter().map(|a| a.title.as_str()).zip(hypotheses))
}

pub struct PipelineOutput {
    pub manifest: SplitManifest,
    pub bpe: BpeModel,
    pub model: AnyModel,
    pub training: TrainReport,
    pub hypotheses: Vec<String>,
    pub report: RougeReport,
    pub first_sentence: RougeReport,
}

pub fn run(articles: Vec<Article>, cfg: &PipelineConfig, log: &mut dyn FnMut(&str)) -> Result<PipelineOutput> {
    cfg.validate()?;
    let articles: Vec<Article> = apply_filters(articles, &cfg.filter).collect();
    log(&format!("{} articles after filtering", articles.len()));
    let manifest = split(articles.len(), cfg.test_size, cfg.val_fraction, cfg.seed)?;
    let train_arts = SplitManifest::select(&manifest.train, &articles);
    let val_arts = SplitManifest::select(&manifest.val, &articles);
    let test_arts = SplitManifest::select(&manifest.test, &articles);

    let bpe = train_bpe(bpe_corpus(&train_arts), cfg.bpe_vocab)?;
    log(&format!("bpe vocabulary {}", bpe.vocab_size()));
    let pretrained = if cfg.model.pretrained_embeddings {
        let sgns = SgnsConfig {
            dim: cfg.model.d_model,
            ..cfg.sgns.clone()
        };
        Some(pretrain_embeddings(&bpe, &train_arts, &sgns, cfg.seed)?)
    } else {
        None
    };
    let mut model = initial_model(
        &cfg.model,
        bpe.vocab_size(),
        cfg.train.max_src_tokens,
        pretrained.as_ref(),
        cfg.seed,
    )?;
    let train_set = examples(&bpe, &train_arts, &cfg.train, cfg.model.kind);
    let val_set = examples(&bpe, &val_arts, &cfg.train, cfg.model.kind);
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let training = train(&mut model, &train_set, &val_set, &train_cfg, cfg.model.d_model, log)?;
    let hypotheses = generate_titles(&model, &bpe, &test_arts, &cfg.beam_config(), cfg.train.max_src_tokens)?;
    let report = score(&test_arts, &hypotheses)?;
    let first_sentence = score(&test_arts, &first_sentence_titles(&test_arts)?)?;
    Ok(PipelineOutput {
        manifest,
        bpe,
        model,
        training,
        hypotheses,
        report,
        first_sentence,
    })
}
