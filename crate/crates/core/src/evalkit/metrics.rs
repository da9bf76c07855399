//! Corpus BLEU, ROUGE F1 and distinct-n over tokenized strings.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epsilon added to zero n-gram match counts.
pub const BLEU_EPSILON: f64 = 0.1;

fn ngrams<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

fn check_pairs<T>(hyps: &[T], refs: &[T]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::EmptyInput("no hypotheses".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Shape(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    Ok(())
}

/// Corpus BLEU with uniform weights over orders 1..=n, one reference per
/// hypothesis. Clipped match counts and n-gram totals are summed over the
/// corpus; an order with no matches uses `BLEU_EPSILON / total`; no unigram
/// matches at all gives 0. Orders for which no hypothesis has any n-gram
/// are left out and the weights spread over the rest.
pub fn bleu_n<T: AsRef<str>>(hyps: &[Vec<T>], refs: &[Vec<T>], n: usize) -> Result<f64> {
    check_pairs(hyps, refs)?;
    if n == 0 {
        return Err(Error::Domain("BLEU order must be positive".into()));
    }
    let mut matches = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        for k in 1..=n {
            let hc = ngrams(h, k);
            let rc = ngrams(r, k);
            matches[k - 1] += hc.iter().map(|(g, &c)| c.min(*rc.get(g).unwrap_or(&0))).sum::<usize>();
            totals[k - 1] += hc.values().sum::<usize>();
        }
        hyp_len += h.len();
        ref_len += r.len();
    }
    if matches[0] == 0 {
        return Ok(0.0);
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let live = totals.iter().filter(|&&t| t > 0).count();
    let w = 1.0 / live as f64;
    let log_sum: f64 = matches
        .iter()
        .zip(&totals)
        .filter(|(_, &t)| t > 0)
        .map(|(&m, &t)| {
            let p = if m == 0 { BLEU_EPSILON / t as f64 } else { m as f64 / t as f64 };
            w * p.ln()
        })
        .sum();
    Ok(bp * log_sum.exp())
}

fn f1(overlap: usize, hyp_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

/// n-gram overlap F1 for one pair. Two sequences without any n-gram count as
/// a perfect match when equal.
pub fn rouge_n_pair<T: AsRef<str>>(hyp: &[T], reference: &[T], n: usize) -> f64 {
    let hc = ngrams(hyp, n);
    let rc = ngrams(reference, n);
    let (ht, rt): (usize, usize) = (hc.values().sum(), rc.values().sum());
    if ht == 0 || rt == 0 {
        let same = hyp.iter().map(AsRef::as_ref).eq(reference.iter().map(AsRef::as_ref));
        return if ht == rt && same { 1.0 } else { 0.0 };
    }
    let overlap = hc.iter().map(|(g, &c)| c.min(*rc.get(g).unwrap_or(&0))).sum();
    f1(overlap, ht, rt)
}

pub fn lcs_len<T: AsRef<str>>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_pair<T: AsRef<str>>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return if hyp.is_empty() && reference.is_empty() { 1.0 } else { 0.0 };
    }
    f1(lcs_len(hyp, reference), hyp.len(), reference.len())
}

/// Mean per-pair F1 for ROUGE-1, ROUGE-2 and ROUGE-L.
pub fn rouge<T: AsRef<str>>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<(f64, f64, f64)> {
    check_pairs(hyps, refs)?;
    let n = hyps.len() as f64;
    let (mut r1, mut r2, mut rl) = (0.0, 0.0, 0.0);
    for (h, r) in hyps.iter().zip(refs) {
        r1 += rouge_n_pair(h, r, 1);
        r2 += rouge_n_pair(h, r, 2);
        rl += rouge_l_pair(h, r);
    }
    Ok((r1 / n, r2 / n, rl / n))
}

/// Unique n-grams across all hypotheses over total n-grams.
pub fn distinct_n<T: AsRef<str>>(hyps: &[Vec<T>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("distinct-n order must be positive".into()));
    }
    let mut seen: HashSet<Vec<&str>> = HashSet::new();
    let mut total = 0usize;
    for h in hyps {
        if h.len() >= n {
            for w in h.windows(n) {
                seen.insert(w.iter().map(AsRef::as_ref).collect());
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput(format!("no {n}-grams in hypotheses")));
    }
    Ok(seen.len() as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub corpus_size: usize,
    pub config_hash: String,
}

impl MetricReport {
    /// Distinct-n on hypotheses too short for bigrams reports 0.
    pub fn compute<T: AsRef<str>>(hyps: &[Vec<T>], refs: &[Vec<T>], config_hash: &str) -> Result<Self> {
        let (rouge_1, rouge_2, rouge_l) = rouge(hyps, refs)?;
        let distinct = |n| match distinct_n(hyps, n) {
            Ok(v) => Ok(v),
            Err(Error::EmptyInput(_)) => Ok(0.0),
            Err(e) => Err(e),
        };
        Ok(MetricReport {
            bleu_1: bleu_n(hyps, refs, 1)?,
            bleu_2: bleu_n(hyps, refs, 2)?,
            bleu_3: bleu_n(hyps, refs, 3)?,
            bleu_4: bleu_n(hyps, refs, 4)?,
            rouge_1,
            rouge_2,
            rouge_l,
            distinct_1: distinct(1)?,
            distinct_2: distinct(2)?,
            corpus_size: hyps.len(),
            config_hash: config_hash.to_string(),
        })
    }

    pub fn values(&self) -> [f64; 9] {
        [
            self.bleu_1,
            self.bleu_2,
            self.bleu_3,
            self.bleu_4,
            self.rouge_1,
            self.rouge_2,
            self.rouge_l,
            self.distinct_1,
            self.distinct_2,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identical_corpus_scores_one() {
        let c = vec![toks("the cat sat on the mat"), toks("hello"), toks("a b c d")];
        for n in 1..=4 {
            assert_eq!(bleu_n(&c, &c, n).unwrap(), 1.0);
        }
        assert_eq!(rouge(&c, &c).unwrap(), (1.0, 1.0, 1.0));
    }

    #[test]
    fn disjoint_is_zero() {
        assert_eq!(bleu_n(&[toks("a b")], &[toks("c d")], 4).unwrap(), 0.0);
    }

    #[test]
    fn hand_lcs() {
        assert_eq!(lcs_len(&toks("a b c"), &toks("a x c")), 2);
        assert!((rouge_l_pair(&toks("a b c"), &toks("a x c")) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn distinct_cases() {
        assert_eq!(distinct_n(&[toks("a b a b")], 1).unwrap(), 0.5);
        assert_eq!(distinct_n(&[toks("a b c d")], 1).unwrap(), 1.0);
        let doubled = vec![toks("a b c d"), toks("a b c d")];
        assert_eq!(distinct_n(&doubled, 1).unwrap(), 0.5);
        assert!(distinct_n(&[toks("a")], 2).is_err());
    }

    #[test]
    fn empty_inputs_error() {
        let e: Vec<Vec<String>> = vec![];
        assert!(bleu_n(&e, &e, 1).is_err());
        assert!(rouge(&e, &e).is_err());
    }
}
