//! Token accuracy, corpus BLEU and Masked BLEU.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::hash::Hash;

/// Floor applied to n-gram precisions with no matches.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Percentage of aligned positions where hypothesis equals reference.
pub fn token_accuracy<T: PartialEq>(references: &[Vec<T>], hypotheses: &[Vec<T>]) -> Result<f64> {
    check_pairs(references, hypotheses)?;
    let mut matches = 0usize;
    let mut total = 0usize;
    for (i, (r, h)) in references.iter().zip(hypotheses).enumerate() {
        if r.len() != h.len() {
            return Err(CoreError::Metric(format!(
                "pair {i}: reference has {} tokens, hypothesis {}",
                r.len(),
                h.len()
            )));
        }
        matches += r.iter().zip(h).filter(|(a, b)| a == b).count();
        total += r.len();
    }
    if total == 0 {
        return Err(CoreError::Empty("token accuracy over zero tokens".into()));
    }
    Ok(100.0 * matches as f64 / total as f64)
}

/// Accuracy restricted to the given positions of each reference.
pub fn masked_accuracy<T: PartialEq>(references: &[Vec<T>], hypotheses: &[Vec<T>], masks: &[Vec<usize>]) -> Result<f64> {
    check_pairs(references, hypotheses)?;
    let mut matches = 0usize;
    let mut total = 0usize;
    for ((r, h), m) in references.iter().zip(hypotheses).zip(masks) {
        for &p in m {
            total += 1;
            if p < r.len() && p < h.len() && r[p] == h[p] {
                matches += 1;
            }
        }
    }
    if total == 0 {
        return Err(CoreError::UndefinedMetric("masked accuracy with zero masked positions".into()));
    }
    Ok(100.0 * matches as f64 / total as f64)
}

fn check_pairs<T>(references: &[Vec<T>], hypotheses: &[Vec<T>]) -> Result<()> {
    if hypotheses.is_empty() {
        return Err(CoreError::Empty("empty hypothesis corpus".into()));
    }
    if references.len() != hypotheses.len() {
        return Err(CoreError::Metric(format!(
            "{} references vs {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    Ok(())
}

/// Per-order clipped match and candidate totals plus the length pair used
/// for the brevity penalty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    fn new(max_n: usize) -> Self {
        Self {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            hyp_len: 0,
            ref_len: 0,
        }
    }

    fn merge(&mut self, o: &BleuStats) {
        for n in 0..self.matches.len() {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// Score in `[0, 100]`.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let max_n = self.matches.len();
        let log_p: f64 = (0..max_n)
            .map(|n| {
                if self.matches[n] == 0 {
                    BLEU_EPSILON.ln()
                } else {
                    (self.matches[n] as f64 / self.totals[n] as f64).ln()
                }
            })
            .sum::<f64>()
            / max_n as f64;
        let bp = if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        (100.0 * bp * log_p.exp()).clamp(0.0, 100.0)
    }
}

/// n-grams starting at `i` with `keep(i, n)` true, counted.
fn ngram_counts<'a, T: Eq + Hash>(s: &'a [T], n: usize, keep: &impl Fn(usize, usize) -> bool) -> HashMap<&'a [T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for i in 0..=s.len() - n {
            if keep(i, n) {
                *m.entry(&s[i..i + n]).or_insert(0) += 1;
            }
        }
    }
    m
}

fn sentence_stats<T: Eq + Hash>(
    r: &[T],
    h: &[T],
    max_n: usize,
    keep: impl Fn(usize, usize) -> bool,
) -> BleuStats {
    let mut st = BleuStats::new(max_n);
    for n in 1..=max_n {
        let rc = ngram_counts(r, n, &keep);
        let hc = ngram_counts(h, n, &keep);
        for (g, &c) in &hc {
            st.matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            st.totals[n - 1] += c;
        }
        if n == 1 {
            st.hyp_len = hc.values().sum();
            st.ref_len = rc.values().sum();
        }
    }
    st
}

pub fn bleu_stats<T: Eq + Hash + Sync>(references: &[Vec<T>], hypotheses: &[Vec<T>], max_n: usize) -> Result<BleuStats> {
    check_pairs(references, hypotheses)?;
    if max_n == 0 {
        return Err(CoreError::Metric("max_n must be >= 1".into()));
    }
    let pairs: Vec<(&Vec<T>, &Vec<T>)> = references.iter().zip(hypotheses).collect();
    let per = crate::par::map_indexed(&pairs, |_, (r, h)| Ok(sentence_stats(r, h, max_n, |_, _| true)))?;
    let mut st = BleuStats::new(max_n);
    per.iter().for_each(|s| st.merge(s));
    Ok(st)
}

/// Corpus BLEU over orders `1..=max_n`.
pub fn bleu<T: Eq + Hash + Sync>(references: &[Vec<T>], hypotheses: &[Vec<T>], max_n: usize) -> Result<f64> {
    Ok(bleu_stats(references, hypotheses, max_n)?.score())
}

pub fn masked_bleu_stats<T: Eq + Hash + Sync>(
    references: &[Vec<T>],
    hypotheses: &[Vec<T>],
    masks: &[Vec<usize>],
    max_n: usize,
) -> Result<BleuStats> {
    check_pairs(references, hypotheses)?;
    if masks.len() != references.len() {
        return Err(CoreError::Metric(format!(
            "{} mask sets for {} sentences",
            masks.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(CoreError::Metric("max_n must be >= 1".into()));
    }
    if masks.iter().all(|m| m.is_empty()) {
        return Err(CoreError::UndefinedMetric("masked BLEU over a corpus with zero masked positions".into()));
    }
    let items: Vec<usize> = (0..references.len()).collect();
    let per = crate::par::map_indexed(&items, |_, &i| {
        let m = &masks[i];
        Ok(sentence_stats(&references[i], &hypotheses[i], max_n, |s, n| {
            m.iter().any(|&p| p >= s && p < s + n)
        }))
    })?;
    let mut st = BleuStats::new(max_n);
    per.iter().for_each(|s| st.merge(s));
    Ok(st)
}

/// BLEU over n-grams covering at least one masked position (reference
/// coordinates). The brevity penalty compares qualifying unigram counts.
pub fn masked_bleu<T: Eq + Hash + Sync>(
    references: &[Vec<T>],
    hypotheses: &[Vec<T>],
    masks: &[Vec<usize>],
    max_n: usize,
) -> Result<f64> {
    Ok(masked_bleu_stats(references, hypotheses, masks, max_n)?.score())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub token_accuracy: f64,
    pub bleu: f64,
    pub masked_bleu: Option<f64>,
    pub masked_accuracy: Option<f64>,
    pub sentences: usize,
    pub tokens: usize,
    pub masked_tokens: usize,
}

impl EvalReport {
    /// Fills every metric; `masked_bleu` is an error when no position is
    /// masked and `want_masked` is set, and omitted otherwise.
    pub fn compute<T: Eq + Hash + Sync>(
        references: &[Vec<T>],
        hypotheses: &[Vec<T>],
        masks: &[Vec<usize>],
        want_masked: bool,
    ) -> Result<Self> {
        let masked_tokens: usize = masks.iter().map(Vec::len).sum();
        let (masked_bleu, masked_accuracy) = if masked_tokens == 0 {
            if want_masked {
                return Err(CoreError::UndefinedMetric(
                    "masked BLEU requested on a corpus with zero masked positions".into(),
                ));
            }
            (None, None)
        } else {
            (
                Some(masked_bleu(references, hypotheses, masks, 4)?),
                Some(masked_accuracy(references, hypotheses, masks)?),
            )
        };
        Ok(Self {
            token_accuracy: token_accuracy(references, hypotheses)?,
            bleu: bleu(references, hypotheses, 4)?,
            masked_bleu,
            masked_accuracy,
            sentences: references.len(),
            tokens: references.iter().map(Vec::len).sum(),
            masked_tokens,
        })
    }

    pub const TSV_HEADER: &'static str = "token_accuracy\tbleu\tmasked_bleu\tmasked_accuracy\tsentences\ttokens\tmasked_tokens";

    pub fn to_tsv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        format!(
            "{:.6}\t{:.6}\t{}\t{}\t{}\t{}\t{}",
            self.token_accuracy,
            self.bleu,
            opt(self.masked_bleu),
            opt(self.masked_accuracy),
            self.sentences,
            self.tokens,
            self.masked_tokens
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &str) -> Vec<String> {
        x.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn accuracy_examples() {
        let r = vec![s("a b c d e")];
        assert_eq!(token_accuracy(&r, &r).unwrap(), 100.0);
        assert_eq!(token_accuracy(&r, &[s("a b x d e")]).unwrap(), 80.0);
        let e = token_accuracy(&[s("a b"), s("c")], &[s("a b"), s("c d")]).unwrap_err();
        assert!(e.to_string().contains("pair 1"));
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let r = vec![s("the cat sat on the mat"), s("a dog barked")];
        assert_eq!(bleu(&r, &r, 4).unwrap(), 100.0);
        let h = vec![s("x y z w v u"), s("q r s")];
        assert!(bleu(&r, &h, 4).unwrap() < 1e-6);
        assert!(bleu::<String>(&[], &[], 4).is_err());
    }

    #[test]
    fn masked_bleu_vacuous_restriction() {
        let r = vec![s("a b c d"), s("e f g")];
        let h = vec![s("a b x d"), s("e f g")];
        let all: Vec<Vec<usize>> = r.iter().map(|x| (0..x.len()).collect()).collect();
        let a = masked_bleu(&r, &h, &all, 4).unwrap();
        let b = bleu(&r, &h, 4).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn masked_bleu_zero_masks_is_error() {
        let r = vec![s("a b")];
        assert!(matches!(masked_bleu(&r, &r, &[vec![]], 4), Err(CoreError::UndefinedMetric(_))));
    }

    #[test]
    fn single_mask_matches_enumeration() {
        let r = s("the small dog ran home");
        let h = s("the big dog ran home");
        let m = 2usize;
        // qualifying n-grams: all windows [i, i+n) containing position 2
        let mut matches = [0usize; 4];
        let mut totals = [0usize; 4];
        for n in 1..=4 {
            for i in 0..=(r.len() - n) {
                if i <= m && m < i + n {
                    totals[n - 1] += 1;
                    if r[i..i + n] == h[i..i + n] {
                        matches[n - 1] += 1;
                    }
                }
            }
        }
        assert_eq!(totals, [1, 2, 3, 2]);
        let log_p: f64 = (0..4)
            .map(|n| {
                if matches[n] == 0 {
                    BLEU_EPSILON.ln()
                } else {
                    (matches[n] as f64 / totals[n] as f64).ln()
                }
            })
            .sum::<f64>()
            / 4.0;
        // one qualifying unigram on each side, so no brevity penalty
        let want = 100.0 * log_p.exp();
        let got = masked_bleu(&[r.clone()], &[h.clone()], &[vec![m]], 4).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert_eq!(masked_bleu(&[r.clone()], &[r], &[vec![m]], 4).unwrap(), 100.0);
    }

    #[test]
    fn report_requires_masks_when_requested() {
        let r = vec![s("a b")];
        assert!(EvalReport::compute(&r, &r, &[vec![]], true).is_err());
        let rep = EvalReport::compute(&r, &r, &[vec![]], false).unwrap();
        assert_eq!(rep.masked_bleu, None);
        assert_eq!(rep.to_tsv_line().split('\t').count(), EvalReport::TSV_HEADER.split('\t').count());
    }
}
