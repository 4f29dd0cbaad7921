//! Token-level overlap metrics used by the caption reward.
//!
//! Scores are sentence-level: every call compares one candidate against one
//! reference.

use std::collections::HashMap;

use crate::scalar::Scalar;

/// An ordered list of non-empty, whitespace-free tokens.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    /// Builds a sequence from pre-split tokens. Empty tokens are dropped and
    /// tokens containing whitespace are split further.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        TokenSeq(
            tokens
                .into_iter()
                .flat_map(|t| {
                    t.as_ref()
                        .split_whitespace()
                        .map(str::to_owned)
                        .collect::<Vec<_>>()
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    /// Number of tokens that are not single punctuation characters.
    pub fn word_count(&self) -> usize {
        self.0.iter().filter(|t| !is_punctuation_token(t)).count()
    }
}

impl<'a> IntoIterator for &'a TokenSeq {
    type Item = &'a String;
    type IntoIter = std::slice::Iter<'a, String>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '“' | '”' | '‘' | '’' | '…' | '–' | '—' | '«' | '»' | '¿' | '¡' | '。' | '，' | '、' | '；' | '：' | '？' | '！'
        )
}

fn is_punctuation_token(t: &str) -> bool {
    let mut chars = t.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if is_punct(c))
}

/// Lowercases, isolates punctuation characters as standalone tokens and
/// splits on unicode whitespace.
pub fn tokenize(text: &str) -> TokenSeq {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if is_punct(c) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    TokenSeq(tokens)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU-4 with add-one smoothing on every n-gram precision and the
/// standard brevity penalty. An empty candidate scores zero.
pub fn bleu4_smoothed<T: Scalar>(candidate: &TokenSeq, reference: &TokenSeq) -> T {
    let cand = candidate.as_slice();
    let refr = reference.as_slice();
    if cand.is_empty() {
        return T::zero();
    }
    let mut log_sum = T::zero();
    for n in 1..=4 {
        let cand_counts = ngram_counts(cand, n);
        let ref_counts = ngram_counts(refr, n);
        let clipped: usize = cand_counts
            .iter()
            .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
        let total = (cand.len() + 1).saturating_sub(n);
        let p = T::from_usize_lossy(clipped + 1) / T::from_usize_lossy(total + 1);
        log_sum += p.ln();
    }
    let ratio = T::from_usize_lossy(refr.len()) / T::from_usize_lossy(cand.len());
    let log_bp = (T::one() - ratio).min(T::zero());
    (log_bp + log_sum / T::lit(4.0)).exp()
}

/// Length of the longest common subsequence, O(|a|·|b|) time, O(|b|) space.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F1 (β = 1, no stemming).
pub fn rouge_l_f1<T: Scalar>(candidate: &TokenSeq, reference: &TokenSeq) -> T {
    if candidate.is_empty() || reference.is_empty() {
        return T::zero();
    }
    let l = lcs_len(candidate.as_slice(), reference.as_slice());
    if l == 0 {
        return T::zero();
    }
    let l = T::from_usize_lossy(l);
    let p = l / T::from_usize_lossy(candidate.len());
    let r = l / T::from_usize_lossy(reference.len());
    T::lit(2.0) * p * r / (p + r)
}

/// Mean of smoothed BLEU-4 and ROUGE-L F1 over the tokenized strings.
pub fn caption_reward<T: Scalar>(candidate: &str, reference: &str) -> T {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    (bleu4_smoothed::<T>(&c, &r) + rouge_l_f1::<T>(&c, &r)) / T::lit(2.0)
}
