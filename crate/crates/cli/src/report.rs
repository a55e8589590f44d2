//! Side-by-side imputation records.
//!
//! Each record is three lines: the original sentence with masked tokens
//! written `_tok_`, then the baseline and spliced outputs with every token
//! that differs from the original written `[tok]`.

/// Original tokens, masked positions underlined.
pub fn mark_masked(original: &[String], positions: &[usize]) -> String {
    original
        .iter()
        .enumerate()
        .map(|(i, t)| if positions.contains(&i) { format!("_{t}_") } else { t.clone() })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Hypothesis tokens, bracketed where they differ from the original at the
/// same index (extra tokens always differ).
pub fn mark_mismatches(original: &[String], hyp: &[String]) -> String {
    hyp.iter()
        .enumerate()
        .map(|(i, t)| if original.get(i) == Some(t) { t.clone() } else { format!("[{t}]") })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn record(original: &[String], positions: &[usize], baseline: &[String], spliced: &[String]) -> String {
    format!(
        "{}\n{}\n{}\n",
        mark_masked(original, positions),
        mark_mismatches(original, baseline),
        mark_mismatches(original, spliced)
    )
}
