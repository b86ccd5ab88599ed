//! Corpus-level tokenized BLEU and exact-match accuracy.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    pub bleu: f64,
    /// Clipped n-gram precision for n = 1..=max_n.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    /// Clipped n-gram matches and hypothesis n-gram totals per order.
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Single-reference corpus BLEU without smoothing.
pub fn corpus_bleu<T, H, R>(hypotheses: &[H], references: &[R], max_n: usize) -> Result<BleuReport>
where
    T: Eq + Hash,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    if hypotheses.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if references.is_empty() || max_n == 0 {
        return Err(Error::invalid(
            "BLEU needs at least one reference and max_n >= 1",
        ));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len <= ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        matches,
        totals,
        hyp_len,
        ref_len,
    })
}

/// Fraction of hypotheses identical to their reference.
pub fn sequence_accuracy<T: PartialEq, H: AsRef<[T]>, R: AsRef<[T]>>(
    hypotheses: &[H],
    references: &[R],
) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Ok(0.0);
    }
    let hits = hypotheses
        .iter()
        .zip(references)
        .filter(|(h, r)| h.as_ref() == r.as_ref())
        .count();
    Ok(hits as f64 / hypotheses.len() as f64)
}
