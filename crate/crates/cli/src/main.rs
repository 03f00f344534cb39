//! `headline`: tokenizer, embedding and model training, generation,
//! evaluation and baselines from the command line.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use headline_core::checkpoint;
use headline_core::corpus::{read_corpus, split, write_corpus, Article, SplitManifest};
use headline_core::decoding::BeamConfig;
use headline_core::embeddings::{EmbeddingTable, SgnsConfig};
use headline_core::model::Seq2Seq;
use headline_core::pipeline::{self, ModelKind};
use headline_core::rouge::{evaluate_corpus, RougeReport};
use headline_core::tokenizer::{train_bpe, BpeModel};
use headline_core::training::train;
use headline_core::{Error, Result};

use config::Preset;

#[derive(Parser)]
#[command(name = "headline", version, about = "Abstractive headline generation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Settings bundle the config file and overrides start from.
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    /// File of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` setting; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<pipeline::PipelineConfig> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        config::resolve(self.preset, self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Learn BPE merges from article titles and bodies.
    TrainBpe {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 40_000)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Skip-gram embeddings over the BPE-tokenized corpus.
    TrainEmbeddings {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        bpe: PathBuf,
        #[arg(long, default_value_t = 512)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 5)]
        window: usize,
        #[arg(long, default_value_t = 5)]
        negatives: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a headline model and write its best checkpoint.
    Train {
        /// `ut` or `rnn`; overrides the `model` config key (default ut).
        #[arg(long, value_parser = parse_kind)]
        model: Option<ModelKind>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        bpe: PathBuf,
        /// Pretrained embedding table; random initialization when absent.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one `{"title_hyp": ...}` line per input article.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bpe: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long, default_value_t = headline_core::decoding::DEFAULT_MAX_LEN)]
        max_len: usize,
        /// Pick the final hypothesis by total rather than per-token log-probability.
        #[arg(long)]
        no_length_norm: bool,
        /// Source tokens kept per article.
        #[arg(long)]
        max_src_tokens: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// ROUGE-1/2/L of hypotheses against reference titles.
    Evaluate {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        hyps: PathBuf,
        /// Report path; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a parameter-free baseline.
    Baseline {
        #[command(subcommand)]
        kind: BaselineKind,
    },
    /// Filter, split, tokenize, pretrain, train, generate and evaluate in one run.
    Pipeline {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write a synthetic corpus whose titles paraphrase the lead sentence.
    Synth {
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BaselineKind {
    /// The body's first sentence as the headline.
    FirstSentence {
        #[arg(long)]
        input: PathBuf,
        /// Hypotheses path; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn hypothesis_lines(titles: &[String]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in titles {
        serde_json::to_writer(&mut out, &serde_json::json!({ "title_hyp": t })).expect("strings serialize");
        out.push(b'\n');
    }
    out
}

fn report_json(report: &RougeReport) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(report).expect("report serializes");
    s.push(b'\n');
    s
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => write_file(p, bytes),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| io_error(Path::new("<stdout>"), e)),
    }
}

/// Hypothesis titles, one JSON object per line, from `title_hyp` or else `title`.
fn read_hypotheses(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| schema(format!("malformed record: {e}")))?;
        let title = value
            .get("title_hyp")
            .or_else(|| value.get("title"))
            .and_then(|v| v.as_str())
            .ok_or_else(|| schema("missing string field `title_hyp`".into()))?;
        out.push(title.to_lowercase());
    }
    Ok(out)
}

fn refs(articles: &[Article]) -> Vec<&Article> {
    articles.iter().collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainBpe { corpus, vocab_size, out } => {
            let articles = read_corpus(&corpus)?;
            let bpe = train_bpe(pipeline::bpe_corpus(&refs(&articles)), vocab_size)?;
            log(&format!("learned {} merges, vocabulary {}", bpe.num_merges(), bpe.vocab_size()));
            write_file(&out, bpe.to_vocab_string().as_bytes())
        }
        Command::TrainEmbeddings {
            corpus,
            bpe,
            dim,
            epochs,
            window,
            negatives,
            seed,
            out,
        } => {
            let articles = read_corpus(&corpus)?;
            let bpe = BpeModel::load(&bpe)?;
            let cfg = SgnsConfig {
                dim,
                window,
                negatives,
                epochs,
                ..SgnsConfig::default()
            };
            let table = pipeline::pretrain_embeddings(&bpe, &refs(&articles), &cfg, seed)?;
            let mut bytes = Vec::new();
            table.write_to(&mut bytes).expect("writing to memory");
            write_file(&out, &bytes)
        }
        Command::Train {
            model,
            corpus,
            bpe,
            embeddings,
            cfg,
            out,
        } => {
            let mut cfg = cfg.resolve()?;
            if let Some(kind) = model {
                cfg.model.kind = kind;
            }
            let model = cfg.model.kind;
            let articles = read_corpus(&corpus)?;
            let bpe = BpeModel::load(&bpe)?;
            let table = embeddings.as_deref().map(EmbeddingTable::load).transpose()?;
            // hold out a validation slice of the training file
            let manifest = split(articles.len(), 0, cfg.val_fraction, cfg.seed)?;
            let train_set = pipeline::examples(&bpe, &SplitManifest::select(&manifest.train, &articles), &cfg.train, model);
            let val_set = pipeline::examples(&bpe, &SplitManifest::select(&manifest.val, &articles), &cfg.train, model);
            let mut m = pipeline::initial_model(&cfg.model, bpe.vocab_size(), cfg.train.max_src_tokens, table.as_ref(), cfg.seed)?;
            let train_cfg = headline_core::training::TrainConfig {
                seed: cfg.seed,
                ..cfg.train.clone()
            };
            let report = train(&mut m, &train_set, &val_set, &train_cfg, cfg.model.d_model, &mut log)?;
            log(&format!("best validation loss {:.6} after {} steps", report.best_val_loss, report.steps));
            write_file(&out, &checkpoint::to_bytes(&m))
        }
        Command::Generate {
            ckpt,
            bpe,
            input,
            beam,
            max_len,
            no_length_norm,
            max_src_tokens,
            out,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let bpe = BpeModel::load(&bpe)?;
            if bpe.vocab_size() != model.vocab_size() {
                return Err(Error::Config(format!(
                    "tokenizer has {} tokens but the model expects {}",
                    bpe.vocab_size(),
                    model.vocab_size()
                )));
            }
            let articles = read_corpus(&input)?;
            let beam = BeamConfig {
                beam,
                max_len,
                length_normalize: !no_length_norm,
            };
            if beam.beam == 0 || beam.max_len == 0 {
                return Err(Error::Param("--beam and --max-len must be at least 1".into()));
            }
            let limit = max_src_tokens.unwrap_or_else(|| model.max_src_len()).min(model.max_src_len());
            let titles = pipeline::generate_titles(&model, &bpe, &refs(&articles), &beam, limit)?;
            write_file(&out, &hypothesis_lines(&titles))
        }
        Command::Evaluate { refs: r, hyps, out } => {
            let references = read_corpus(&r)?;
            let hypotheses = read_hypotheses(&hyps)?;
            if references.len() != hypotheses.len() {
                return Err(Error::Input(format!(
                    "{} references but {} hypotheses",
                    references.len(),
                    hypotheses.len()
                )));
            }
            let report = evaluate_corpus(references.iter().map(|a| a.title.as_str()).zip(&hypotheses))?;
            emit(out.as_deref(), &report_json(&report))
        }
        Command::Baseline {
            kind: BaselineKind::FirstSentence { input, out },
        } => {
            let articles = read_corpus(&input)?;
            let titles = pipeline::first_sentence_titles(&refs(&articles))?;
            emit(out.as_deref(), &hypothesis_lines(&titles))
        }
        Command::Pipeline { corpus, cfg, out_dir } => {
            let cfg = cfg.resolve()?;
            let articles = read_corpus(&corpus)?;
            let out = pipeline::run(articles, &cfg, &mut log)?;
            let dir = out_dir.as_path();
            let mut manifest = serde_json::to_vec_pretty(&out.manifest).expect("manifest serializes");
            manifest.push(b'\n');
            write_file(&dir.join("split.json"), &manifest)?;
            write_file(&dir.join("bpe.vocab"), out.bpe.to_vocab_string().as_bytes())?;
            write_file(&dir.join("model.ckpt"), &checkpoint::to_bytes(&out.model))?;
            write_file(&dir.join("hypotheses.jsonl"), &hypothesis_lines(&out.hypotheses))?;
            write_file(&dir.join("first_sentence_report.json"), &report_json(&out.first_sentence))?;
            write_file(&dir.join("report.json"), &report_json(&out.report))?;
            log(&format!(
                "{}: ROUGE-1 {:.4} ROUGE-2 {:.4} ROUGE-L {:.4} (first sentence ROUGE-L {:.4})",
                out.model.kind(),
                out.report.rouge1.f1,
                out.report.rouge2.f1,
                out.report.rouge_l.f1,
                out.first_sentence.rouge_l.f1
            ));
            Ok(())
        }
        Command::Synth { count, seed, out } => {
            let articles = headline_core::synth::synthetic_corpus(count, seed);
            write_corpus(&out, &articles)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
