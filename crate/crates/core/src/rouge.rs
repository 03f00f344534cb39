//! ROUGE-N and ROUGE-L on whitespace-separated words.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    /// Score from an overlap count and the hypothesis/reference unit counts.
    /// Empty sides contribute zero rather than NaN.
    pub fn from_counts(overlap: usize, hyp_total: usize, ref_total: usize) -> Self {
        let ratio = |total: usize| if total == 0 { 0.0 } else { overlap as f64 / total as f64 };
        let precision = ratio(hyp_total);
        let recall = ratio(ref_total);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore {
            precision,
            recall,
            f1,
        }
    }
}

/// Mean scores over an evaluation set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeScore,
    pub count: usize,
}

fn ngram_counts<'w, 'a>(words: &'w [&'a str], n: usize) -> HashMap<&'w [&'a str], usize> {
    let mut counts = HashMap::new();
    for gram in words.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap between a reference and a hypothesis.
pub fn rouge_n(reference: &[&str], hypothesis: &[&str], n: usize) -> RougeScore {
    assert!(n >= 1, "ROUGE-N needs n >= 1");
    let refs = ngram_counts(reference, n);
    let hyps = ngram_counts(hypothesis, n);
    let overlap = hyps
        .iter()
        .map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0)))
        .sum();
    let total = |len: usize| (len + 1).saturating_sub(n);
    RougeScore::from_counts(overlap, total(hypothesis.len()), total(reference.len()))
}

/// Longest common subsequence length, by dynamic programming in O(|a|·|b|)
/// time and O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(reference: &[&str], hypothesis: &[&str]) -> RougeScore {
    RougeScore::from_counts(lcs_len(reference, hypothesis), hypothesis.len(), reference.len())
}

/// Lowercases and splits on whitespace, as every title is scored.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_string).collect()
}

/// Per-pair scores for one (reference, hypothesis) pair of titles.
pub fn score_pair(reference: &str, hypothesis: &str) -> [RougeScore; 3] {
    let r = words(reference);
    let h = words(hypothesis);
    let r: Vec<&str> = r.iter().map(String::as_str).collect();
    let h: Vec<&str> = h.iter().map(String::as_str).collect();
    [rouge_n(&r, &h, 1), rouge_n(&r, &h, 2), rouge_l(&r, &h)]
}

/// Macro-averages per-pair ROUGE-1, ROUGE-2 and ROUGE-L.
pub fn evaluate_corpus<I, R, H>(pairs: I) -> Result<RougeReport>
where
    I: IntoIterator<Item = (R, H)>,
    R: AsRef<str>,
    H: AsRef<str>,
{
    let mut sums = [RougeScore::default(); 3];
    let mut count = 0usize;
    for (reference, hypothesis) in pairs {
        for (acc, s) in sums.iter_mut().zip(score_pair(reference.as_ref(), hypothesis.as_ref())) {
            acc.precision += s.precision;
            acc.recall += s.recall;
            acc.f1 += s.f1;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Input("cannot evaluate an empty set of title pairs".into()));
    }
    let mean = |s: RougeScore| RougeScore {
        precision: s.precision / count as f64,
        recall: s.recall / count as f64,
        f1: s.f1 / count as f64,
    };
    Ok(RougeReport {
        rouge1: mean(sums[0]),
        rouge2: mean(sums[1]),
        rouge_l: mean(sums[2]),
        count,
    })
}
