//! BLEU at corpus and sentence level, and windowed averages of score streams.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{invalid, Result};

const MAX_ORDER: usize = 4;

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and hypothesis n-gram totals for orders 1..=4.
fn match_stats<S: AsRef<str>, T: AsRef<str>>(hyp: &[S], reference: &[T]) -> [(usize, usize); MAX_ORDER] {
    let mut stats = [(0, 0); MAX_ORDER];
    for (k, slot) in stats.iter_mut().enumerate() {
        let n = k + 1;
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        *slot = (matched, hyp.len().saturating_sub(n - 1));
    }
    stats
}

/// Smoothed sentence BLEU in `[0, 1]`: order 4, uniform weights, add-one
/// smoothing on the 2..4-gram precisions, brevity penalty when the hypothesis
/// is shorter than the reference.
pub fn sentence_reward<S: AsRef<str>, T: AsRef<str>>(hyp: &[S], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(invalid("empty reference"));
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let stats = match_stats(hyp, reference);
    let (m1, t1) = stats[0];
    if m1 == 0 {
        return Ok(0.0);
    }
    let mut log_sum = (m1 as f64 / t1 as f64).ln();
    for &(m, t) in &stats[1..] {
        log_sum += ((m + 1) as f64 / (t + 1) as f64).ln();
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c < r { 1.0 - r / c } else { 0.0 };
    Ok((log_sum / MAX_ORDER as f64 + bp).exp().clamp(0.0, 1.0))
}

/// Corpus BLEU on a 0..100 scale.
pub fn corpus_bleu<S: AsRef<str>, T: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(invalid(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if refs.iter().any(Vec::is_empty) {
        return Err(invalid("empty reference"));
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        for (k, (m, t)) in match_stats(h, rf).into_iter().enumerate() {
            matched[k] += m;
            total[k] += t;
        }
        c += h.len();
        r += rf.len();
    }
    if c == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / MAX_ORDER as f64;
    let bp = if c < r { 1.0 - r as f64 / c as f64 } else { 0.0 };
    Ok(100.0 * (log_p + bp).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WindowMean {
    pub index: usize,
    pub mean: f64,
    pub count: usize,
    /// Set on a trailing window with fewer than `window` scores.
    pub partial: bool,
}

/// Means of consecutive non-overlapping windows.
pub fn windowed_means(scores: &[f64], window: usize) -> Result<Vec<WindowMean>> {
    if window == 0 {
        return Err(invalid("window must be at least 1"));
    }
    Ok(scores
        .chunks(window)
        .enumerate()
        .map(|(index, chunk)| WindowMean {
            index,
            mean: chunk.iter().sum::<f64>() / chunk.len() as f64,
            count: chunk.len(),
            partial: chunk.len() < window,
        })
        .collect())
}
