//! Character-level byte-pair encoding with an end-of-word marker and byte
//! fallback.
//!
//! Vocabulary layout:
//!
//! | ids        | tokens                                          |
//! |------------|-------------------------------------------------|
//! | 0, 1, 2    | `PAD`, `BOS`, `EOS`                             |
//! | 3..=258    | one token per byte value                        |
//! | 259        | the end-of-word marker `</w>`                   |
//! | 260..      | one token per merge, in merge order             |
//!
//! Multi-byte characters seen during training are assembled from their bytes
//! by the first merges, so the learned merges operate on characters. Text is
//! pre-segmented on ASCII whitespace; a single space between two words is
//! implied by the end-of-word marker and every other whitespace byte is
//! emitted as its own token, which makes decoding exact.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;
pub type TokenSequence = Vec<TokenId>;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const NUM_SPECIALS: usize = 3;
const FIRST_BYTE: TokenId = 3;
pub const END_OF_WORD: TokenId = FIRST_BYTE + 256;
/// Specials, byte tokens and the end-of-word marker.
pub const BASE_VOCAB: usize = END_OF_WORD as usize + 1;

const HEADER: &str = "bpe-v1";
const MARKER: &str = "</w>";
const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>"];

#[derive(Clone, Debug, PartialEq, Eq)]
struct Token {
    bytes: Vec<u8>,
    ends_word: bool,
}

impl Token {
    fn text(&self) -> String {
        let mut s = escape(&self.bytes);
        if self.ends_word {
            s.push_str(MARKER);
        }
        s
    }

    /// Ordering key for frequency ties: byte order, with the marker after every byte.
    fn sort_key(&self) -> Vec<u16> {
        let mut key: Vec<u16> = self.bytes.iter().map(|&b| u16::from(b)).collect();
        if self.ends_word {
            key.push(256);
        }
        key
    }

    fn is_whitespace(&self) -> bool {
        !self.ends_word && !self.bytes.is_empty() && self.bytes.iter().all(u8::is_ascii_whitespace)
    }
}

fn escape(bytes: &[u8]) -> String {
    let mut out = String::new();
    for chunk in bytes.utf8_chunks() {
        for c in chunk.valid().chars() {
            match c {
                '\\' => out.push_str("\\\\"),
                '<' => out.push_str("\\<"),
                c if c.is_whitespace() || c.is_control() => {
                    let mut buf = [0u8; 4];
                    for b in c.encode_utf8(&mut buf).bytes() {
                        let _ = write!(out, "\\x{b:02X}");
                    }
                }
                c => out.push(c),
            }
        }
        for b in chunk.invalid() {
            let _ = write!(out, "\\x{b:02X}");
        }
    }
    out
}

/// Learned merges plus the vocabulary they induce.
#[derive(Clone, Debug)]
pub struct BpeModel {
    merges: Vec<(TokenId, TokenId)>,
    tokens: Vec<Token>,
    texts: Vec<String>,
    vocab: HashMap<String, TokenId>,
    ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

impl PartialEq for BpeModel {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges && self.tokens == other.tokens
    }
}

impl BpeModel {
    /// Model with no merges: every word is split into bytes.
    pub fn base() -> Self {
        let mut tokens = Vec::with_capacity(BASE_VOCAB);
        for _ in 0..NUM_SPECIALS {
            tokens.push(Token {
                bytes: Vec::new(),
                ends_word: false,
            });
        }
        for b in 0..=255u8 {
            tokens.push(Token {
                bytes: vec![b],
                ends_word: false,
            });
        }
        tokens.push(Token {
            bytes: Vec::new(),
            ends_word: true,
        });
        let texts: Vec<String> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| match SPECIAL_NAMES.get(i) {
                Some(name) => (*name).to_string(),
                None => t.text(),
            })
            .collect();
        let vocab = texts
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        BpeModel {
            merges: Vec::new(),
            tokens,
            texts,
            vocab,
            ranks: HashMap::new(),
        }
    }

    /// Records a merge and returns the id of the combined token.
    fn push_merge(&mut self, left: TokenId, right: TokenId) -> TokenId {
        let l = &self.tokens[left as usize];
        let r = &self.tokens[right as usize];
        debug_assert!(!l.ends_word, "merge across a word boundary");
        let merged = Token {
            bytes: [l.bytes.as_slice(), r.bytes.as_slice()].concat(),
            ends_word: r.ends_word,
        };
        let text = merged.text();
        let id = match self.vocab.get(&text) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as TokenId;
                self.tokens.push(merged);
                self.texts.push(text.clone());
                self.vocab.insert(text, id);
                id
            }
        };
        self.ranks.insert((left, right), (self.merges.len(), id));
        self.merges.push((left, right));
        id
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.merges
            .iter()
            .map(|&(l, r)| (self.token_text(l), self.token_text(r)))
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    /// Printable form of a token, as used in vocab files.
    pub fn token_text(&self, id: TokenId) -> &str {
        &self.texts[id as usize]
    }

    pub fn token_id(&self, text: &str) -> Option<TokenId> {
        self.vocab.get(text).copied()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<TokenId>) {
        let mut symbols: Vec<TokenId> = word
            .bytes()
            .map(|b| FIRST_BYTE + TokenId::from(b))
            .chain(std::iter::once(END_OF_WORD))
            .collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, _)| (rank, (w[0], w[1]))))
                .min();
            let Some((_, pair)) = best else { break };
            let merged = self.ranks[&pair].1;
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = next;
        }
        out.extend(symbols);
    }

    /// Encodes text into token ids. Never fails and never needs an unknown
    /// token: anything the merges do not cover falls back to byte tokens.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut out = Vec::new();
        let mut prev_word_end: Option<usize> = None;
        for (start, piece) in segments(text) {
            match piece {
                Segment::Word(w) => {
                    self.encode_word(w, &mut out);
                    prev_word_end = Some(start + w.len());
                }
                Segment::Space(s) => {
                    let between_words = prev_word_end == Some(start)
                        && start + s.len() < text.len();
                    if !(between_words && s == " ") {
                        out.extend(s.bytes().map(|b| FIRST_BYTE + TokenId::from(b)));
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`encode`](Self::encode). Special tokens are skipped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut bytes = Vec::new();
        let mut pending_space = false;
        for &id in ids {
            let token = self.tokens.get(id as usize).ok_or(Error::Vocab {
                id,
                size: self.tokens.len(),
            })?;
            if (id as usize) < NUM_SPECIALS {
                continue;
            }
            if pending_space && !token.is_whitespace() {
                bytes.push(b' ');
            }
            bytes.extend_from_slice(&token.bytes);
            pending_space = token.ends_word;
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{HEADER} {}", self.vocab_size())?;
        for (l, r) in self.merges() {
            writeln!(w, "{l} {r}")?;
        }
        Ok(())
    }

    pub fn to_vocab_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("vocab text is UTF-8")
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("vocab", "empty file"))?
            .map_err(|e| Error::format("vocab", e.to_string()))?;
        let declared: usize = header
            .strip_prefix(HEADER)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| Error::format("vocab", format!("bad header `{header}`")))?;
        let mut model = BpeModel::base();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::format("vocab", e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (Some(l), Some(r), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::format("vocab", format!("line {}: expected `<left> <right>`", n + 2)));
            };
            let lookup = |t: &str| {
                model.token_id(t).filter(|&id| id as usize >= NUM_SPECIALS).ok_or_else(|| {
                    Error::format("vocab", format!("line {}: unknown token `{t}`", n + 2))
                })
            };
            let (left, right) = (lookup(l)?, lookup(r)?);
            if model.tokens[left as usize].ends_word {
                return Err(Error::format(
                    "vocab",
                    format!("line {}: merge continues past end of word", n + 2),
                ));
            }
            model.push_merge(left, right);
        }
        if model.vocab_size() != declared {
            return Err(Error::format(
                "vocab",
                format!("header declares {declared} tokens, merges produce {}", model.vocab_size()),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_vocab_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

enum Segment<'a> {
    Word(&'a str),
    Space(&'a str),
}

/// Splits text into maximal runs of ASCII whitespace and non-whitespace,
/// with their byte offsets.
fn segments(text: &str) -> impl Iterator<Item = (usize, Segment<'_>)> {
    let bytes = text.as_bytes();
    let mut pos = 0;
    std::iter::from_fn(move || {
        if pos >= bytes.len() {
            return None;
        }
        let start = pos;
        let space = bytes[pos].is_ascii_whitespace();
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() == space {
            pos += 1;
        }
        let piece = &text[start..pos];
        Some((start, if space { Segment::Space(piece) } else { Segment::Word(piece) }))
    })
}

type Pair = (TokenId, TokenId);

struct PairStats {
    counts: HashMap<Pair, u64>,
    words_with: HashMap<Pair, HashSet<usize>>,
}

impl PairStats {
    fn add_word(&mut self, idx: usize, symbols: &[TokenId], freq: u64, touched: &mut HashSet<Pair>) {
        for w in symbols.windows(2) {
            let pair = (w[0], w[1]);
            *self.counts.entry(pair).or_insert(0) += freq;
            self.words_with.entry(pair).or_default().insert(idx);
            touched.insert(pair);
        }
    }

    fn remove_word(&mut self, symbols: &[TokenId], freq: u64, touched: &mut HashSet<Pair>) {
        for w in symbols.windows(2) {
            let pair = (w[0], w[1]);
            if let Some(c) = self.counts.get_mut(&pair) {
                *c -= freq;
            }
            touched.insert(pair);
        }
    }
}

/// Learns merges from lowercased documents until the vocabulary reaches
/// `vocab_budget` tokens or no adjacent pair occurs at least twice.
///
/// Ties between equally frequent pairs go to the lexicographically smaller
/// pair, comparing token bytes with the end-of-word marker ordered last.
pub fn train_bpe<I, S>(corpus: I, vocab_budget: usize) -> Result<BpeModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if vocab_budget < BASE_VOCAB {
        return Err(Error::Param(format!(
            "vocabulary budget {vocab_budget} must be at least {BASE_VOCAB} (specials, bytes and end-of-word marker)"
        )));
    }
    let mut word_freqs: BTreeMap<String, u64> = BTreeMap::new();
    for doc in corpus {
        for word in doc.as_ref().split_ascii_whitespace() {
            *word_freqs.entry(word.to_string()).or_insert(0) += 1;
        }
    }
    if word_freqs.is_empty() {
        return Err(Error::Input("cannot train a tokenizer on an empty corpus".into()));
    }

    let mut model = BpeModel::base();

    // Assemble multi-byte characters first, most frequent first.
    let mut char_freqs: BTreeMap<char, u64> = BTreeMap::new();
    for (word, &f) in &word_freqs {
        for c in word.chars().filter(|c| !c.is_ascii()) {
            *char_freqs.entry(c).or_insert(0) += f;
        }
    }
    let mut chars: Vec<(char, u64)> = char_freqs.into_iter().collect();
    chars.sort_by_key(|&(c, f)| (Reverse(f), c));
    let mut char_ids: HashMap<char, TokenId> = HashMap::new();
    for (c, _) in chars {
        let mut buf = [0u8; 4];
        let encoded = c.encode_utf8(&mut buf).as_bytes();
        let steps = encoded.len() - 1;
        let existing = (1..encoded.len())
            .filter(|&k| model.token_id(&escape(&encoded[..=k])).is_none())
            .count();
        if model.vocab_size() + existing > vocab_budget {
            break;
        }
        let mut acc = FIRST_BYTE + TokenId::from(encoded[0]);
        for &b in &encoded[1..=steps] {
            let next = FIRST_BYTE + TokenId::from(b);
            acc = match model.ranks.get(&(acc, next)) {
                Some(&(_, id)) => id,
                None => model.push_merge(acc, next),
            };
        }
        char_ids.insert(c, acc);
    }

    let mut words: Vec<Vec<TokenId>> = Vec::with_capacity(word_freqs.len());
    let mut freqs: Vec<u64> = Vec::with_capacity(word_freqs.len());
    for (word, &f) in &word_freqs {
        let mut symbols = Vec::with_capacity(word.len() + 1);
        for c in word.chars() {
            match char_ids.get(&c) {
                Some(&id) => symbols.push(id),
                None => {
                    let mut buf = [0u8; 4];
                    symbols.extend(c.encode_utf8(&mut buf).bytes().map(|b| FIRST_BYTE + TokenId::from(b)));
                }
            }
        }
        symbols.push(END_OF_WORD);
        words.push(symbols);
        freqs.push(f);
    }

    let mut stats = PairStats {
        counts: HashMap::new(),
        words_with: HashMap::new(),
    };
    let mut touched = HashSet::new();
    for (i, w) in words.iter().enumerate() {
        stats.add_word(i, w, freqs[i], &mut touched);
    }

    let mut keys: Vec<Vec<u16>> = model.tokens.iter().map(Token::sort_key).collect();
    let pair_key = |keys: &[Vec<u16>], (l, r): Pair| (keys[l as usize].clone(), keys[r as usize].clone());
    let mut heap: BinaryHeap<(u64, Reverse<(Vec<u16>, Vec<u16>)>, Pair)> = stats
        .counts
        .iter()
        .map(|(&p, &c)| (c, Reverse(pair_key(&keys, p)), p))
        .collect();

    while model.vocab_size() < vocab_budget {
        let Some((count, _, pair)) = heap.pop() else { break };
        if stats.counts.get(&pair) != Some(&count) {
            continue;
        }
        if count < 2 {
            break;
        }
        let merged = model.push_merge(pair.0, pair.1);
        if keys.len() < model.vocab_size() {
            keys.push(model.tokens[merged as usize].sort_key());
        }

        let affected: Vec<usize> = stats.words_with.remove(&pair).into_iter().flatten().collect();
        touched.clear();
        for idx in affected {
            let symbols = &words[idx];
            if !symbols.windows(2).any(|w| (w[0], w[1]) == pair) {
                continue;
            }
            stats.remove_word(symbols, freqs[idx], &mut touched);
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(symbols[i]);
                    i += 1;
                }
            }
            stats.add_word(idx, &next, freqs[idx], &mut touched);
            words[idx] = next;
        }
        stats.counts.remove(&pair);
        for &p in &touched {
            if p == pair {
                continue;
            }
            match stats.counts.get(&p) {
                Some(&0) => {
                    stats.counts.remove(&p);
                }
                Some(&c) => heap.push((c, Reverse(pair_key(&keys, p)), p)),
                None => {}
            }
        }
    }
    Ok(model)
}
