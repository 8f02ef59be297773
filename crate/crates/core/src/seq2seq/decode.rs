use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{NoRng, TapeState};
use super::params::NmtParams;
use super::vocab::{BOS, EOS};
use crate::error::{invalid, Result};
use crate::grad::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// Sampling temperature; ignored by greedy and beam search.
    pub tau: f64,
    pub beam_width: usize,
    /// Fixed output cap; `None` uses `min(2|x| + 10, 100)`.
    pub max_len: Option<usize>,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            tau: 1.0,
            beam_width: 5,
            max_len: None,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn sample(tau: f64, seed: u64) -> Self {
        Self {
            mode: DecodeMode::Sample,
            tau,
            seed,
            ..Self::default()
        }
    }

    pub fn beam(width: usize) -> Self {
        Self {
            mode: DecodeMode::Beam,
            beam_width: width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if self.beam_width == 0 {
            return Err(invalid("beam width must be at least 1"));
        }
        if self.max_len == Some(0) {
            return Err(invalid("max_len must be at least 1"));
        }
        Ok(())
    }

    pub fn max_len_for(&self, source_len: usize) -> usize {
        self.max_len.unwrap_or_else(|| (2 * source_len + 10).min(100))
    }
}

/// A decoded sequence: chosen ids (including a final EOS when produced) and
/// the log-probability of each chosen token.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
}

impl Decoded {
    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Decodes with the rng seeded from `config.seed`.
pub fn decode(params: &NmtParams, source: &[usize], config: &DecodeConfig) -> Result<Decoded> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    decode_with_rng(params, source, config, &mut rng)
}

pub fn decode_with_rng<R: Rng>(
    params: &NmtParams,
    source: &[usize],
    config: &DecodeConfig,
    rng: &mut R,
) -> Result<Decoded> {
    config.validate()?;
    let max_len = config.max_len_for(source.len());
    match config.mode {
        DecodeMode::Greedy => step_decode(params, source, max_len, 1.0, argmax),
        DecodeMode::Sample => step_decode(params, source, max_len, config.tau, |d| sample(d, rng)),
        DecodeMode::Beam => beam_search(params, source, max_len, config.beam_width),
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn sample<R: Rng>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver of mass past the end
    log_probs.len() - 1
}

fn step_decode(
    params: &NmtParams,
    source: &[usize],
    max_len: usize,
    tau: f64,
    mut choose: impl FnMut(&[f64]) -> usize,
) -> Result<Decoded> {
    let mut tape = Tape::new();
    let trunk = params.trunk();
    let enc = trunk.encode::<NoRng>(&mut tape, source, None)?;
    let mut state = trunk.initial_state(&mut tape, &enc);
    let mut prev = BOS;
    let mut out = Decoded {
        tokens: Vec::new(),
        log_probs: Vec::new(),
    };
    for _ in 0..max_len {
        state = trunk.step::<NoRng>(&mut tape, &enc, &state, prev, None)?;
        let lp = params.log_dist::<NoRng>(&mut tape, state.feed, tau, None);
        let dist = tape.value(lp).data();
        let y = choose(dist);
        out.tokens.push(y);
        out.log_probs.push(dist[y]);
        if y == EOS {
            break;
        }
        prev = y;
    }
    Ok(out)
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<usize>,
    log_probs: Vec<f64>,
    score: f64,
    state: Option<TapeState>,
}

/// Higher score first; equal scores ordered by token sequence.
fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn beam_search(params: &NmtParams, source: &[usize], max_len: usize, width: usize) -> Result<Decoded> {
    let mut tape = Tape::new();
    let trunk = params.trunk();
    let enc = trunk.encode::<NoRng>(&mut tape, source, None)?;
    let init = trunk.initial_state(&mut tape, &enc);
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        log_probs: Vec::new(),
        score: 0.0,
        state: Some(init),
    }];
    let mut finished: Vec<Hyp> = Vec::new();

    for _ in 0..max_len {
        let mut candidates = Vec::new();
        for hyp in &live {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let state = trunk.step::<NoRng>(&mut tape, &enc, hyp.state.as_ref().expect("live state"), prev, None)?;
            let lp = params.log_dist::<NoRng>(&mut tape, state.feed, 1.0, None);
            for (y, &l) in tape.value(lp).data().iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(y);
                let mut log_probs = hyp.log_probs.clone();
                log_probs.push(l);
                candidates.push(Hyp {
                    tokens,
                    log_probs,
                    score: hyp.score + l,
                    state: Some(state.clone()),
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(width);
        live.clear();
        for c in candidates {
            if c.tokens.last() == Some(&EOS) {
                finished.push(Hyp { state: None, ..c });
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
        // scores only decrease, so a finished hypothesis that beats every
        // live one cannot be overtaken
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if finished.len() >= width && finished.iter().any(|f| f.score >= best_live) {
            break;
        }
    }
    // hypotheses cut by max_len count as complete
    finished.extend(live);
    finished.sort_by(rank);
    let best = finished.into_iter().next().expect("beam produced a hypothesis");
    Ok(Decoded {
        tokens: best.tokens,
        log_probs: best.log_probs,
    })
}
