//! News corpus ingestion: JSON-lines records, length/obituary filters and
//! seeded train/validation/test splits.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One news document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Article {
    pub title: String,
    #[serde(rename = "text")]
    pub body: String,
}

impl Article {
    pub fn new(title: impl Into<String>, body: impl Into<String>) -> Self {
        Article {
            title: title.into(),
            body: body.into(),
        }
    }

    /// Lowercasing is the only normalization applied to the text.
    pub fn lowercased(self) -> Self {
        Article {
            title: self.title.to_lowercase(),
            body: self.body.to_lowercase(),
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    title: Option<String>,
    text: Option<String>,
}

/// Streams lowercased articles from a JSONL file, in file order. Blank lines
/// are skipped.
pub fn load_corpus(path: &Path) -> Result<impl Iterator<Item = Result<Article>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let path = path.to_path_buf();
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .filter_map(move |(i, line)| parse_line(&path, i + 1, line).transpose()))
}

fn parse_line(path: &Path, line_no: usize, line: std::io::Result<String>) -> Result<Option<Article>> {
    let schema = |message: String| Error::Schema {
        path: path.to_path_buf(),
        line: line_no,
        message,
    };
    let line = line.map_err(|e| schema(e.to_string()))?;
    if line.trim().is_empty() {
        return Ok(None);
    }
    let raw: RawRecord = serde_json::from_str(&line).map_err(|e| schema(format!("malformed record: {e}")))?;
    let title = raw.title.ok_or_else(|| schema("missing string field `title`".into()))?;
    let body = raw.text.ok_or_else(|| schema("missing string field `text`".into()))?;
    Ok(Some(Article::new(title, body).lowercased()))
}

/// Reads a whole corpus file.
pub fn read_corpus(path: &Path) -> Result<Vec<Article>> {
    load_corpus(path)?.collect()
}

pub fn write_corpus(path: &Path, articles: &[Article]) -> Result<()> {
    let mut out = Vec::new();
    for a in articles {
        serde_json::to_writer(&mut out, a).expect("articles serialize");
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Number of maximal non-whitespace runs.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterSpec {
    pub min_title_words: usize,
    pub max_title_words: usize,
    pub min_body_words: usize,
    pub max_body_words: usize,
    pub skip_obituaries: bool,
    /// Title phrases marking an obituary, matched on whole words.
    pub obituary_keywords: Vec<String>,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            min_title_words: 3,
            max_title_words: 15,
            min_body_words: 20,
            max_body_words: 2000,
            skip_obituaries: false,
            obituary_keywords: vec!["obituary".into(), "dies".into(), "paid notice".into()],
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_title_words > self.max_title_words || self.min_body_words > self.max_body_words {
            return Err(Error::Config(format!("filter ranges must satisfy min <= max: {self:?}")));
        }
        Ok(())
    }

    pub fn is_obituary(&self, title: &str) -> bool {
        let words: Vec<String> = title
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .collect();
        self.obituary_keywords.iter().any(|k| {
            let phrase: Vec<&str> = k.split_whitespace().collect();
            !phrase.is_empty() && words.windows(phrase.len()).any(|w| w.iter().zip(&phrase).all(|(a, b)| a == b))
        })
    }

    pub fn accepts(&self, article: &Article) -> bool {
        let t = word_count(&article.title);
        let b = word_count(&article.body);
        (self.min_title_words..=self.max_title_words).contains(&t)
            && (self.min_body_words..=self.max_body_words).contains(&b)
            && !(self.skip_obituaries && self.is_obituary(&article.title))
    }
}

pub fn apply_filters<'a, I>(articles: I, spec: &'a FilterSpec) -> impl Iterator<Item = Article> + 'a
where
    I: IntoIterator<Item = Article>,
    I::IntoIter: 'a,
{
    articles.into_iter().filter(move |a| spec.accepts(a))
}

/// Record indices per split, plus the seed that produced them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(&mut file, self).expect("manifest serializes");
        writeln!(file).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("split manifest", e.to_string()))
    }

    pub fn select<'a, T>(indices: &[usize], items: &'a [T]) -> Vec<&'a T> {
        indices.iter().map(|&i| &items[i]).collect()
    }
}

/// Holds out `test_size` uniformly sampled records for test, then
/// `val_fraction` of the rest (rounded, at least one when the fraction is
/// positive) for validation. Index lists are sorted.
pub fn split(corpus_len: usize, test_size: usize, val_fraction: f64, seed: u64) -> Result<SplitManifest> {
    if test_size >= corpus_len {
        return Err(Error::Param(format!(
            "test size {test_size} must be smaller than the corpus ({corpus_len} articles)"
        )));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Param(format!("validation fraction must be in [0, 1), got {val_fraction}")));
    }
    let mut order: Vec<usize> = (0..corpus_len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let rest = corpus_len - test_size;
    let mut n_val = (val_fraction * rest as f64).round() as usize;
    if val_fraction > 0.0 {
        n_val = n_val.max(1);
    }
    n_val = n_val.min(rest.saturating_sub(1));

    let mut test = order[..test_size].to_vec();
    let mut val = order[test_size..test_size + n_val].to_vec();
    let mut train = order[test_size + n_val..].to_vec();
    test.sort_unstable();
    val.sort_unstable();
    train.sort_unstable();
    Ok(SplitManifest { seed, train, val, test })
}
