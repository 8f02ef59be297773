//! Byte-pair encoding: learning a merge table, segmenting words into
//! subword units, and joining units back into words.
//!
//! Every non-final unit of a word carries the `@@` suffix, so `low` split as
//! `lo` + `w` is written `lo@@ w`. Merges file:
//!
//! ```text
//! banditmt-bpe-1
//! l o
//! lo w</w>
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{invalid, Error, Result};

pub const MERGES_TAG: &str = "banditmt-bpe-1";
pub const MARKER: &str = "@@";
const END_OF_WORD: &str = "</w>";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

fn symbols(word: &str) -> Vec<String> {
    word.chars()
        .map(String::from)
        .chain(std::iter::once(END_OF_WORD.to_string()))
        .collect()
}

/// Rejects lines that already contain the continuation marker.
pub fn check_line<S: AsRef<str>>(tokens: &[S]) -> Result<()> {
    match tokens.iter().find(|t| t.as_ref().contains(MARKER)) {
        Some(t) => Err(invalid(format!(
            "token {:?} contains the reserved marker {MARKER}",
            t.as_ref()
        ))),
        None => Ok(()),
    }
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, m) in merges.iter().enumerate() {
            if ranks.insert(m.clone(), i).is_some() {
                return Err(invalid(format!("duplicate merge {m:?}")));
            }
        }
        Ok(Self { merges, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Learns up to `num_merges` merges from whitespace-tokenized lines.
    ///
    /// Each step merges the most frequent adjacent pair, breaking count ties
    /// by the lexicographically smallest pair, and stops once no pair occurs
    /// at least twice.
    pub fn learn<S: AsRef<str>>(lines: &[Vec<S>], num_merges: usize) -> Result<Self> {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for line in lines {
            check_line(line)?;
            for w in line {
                *freq.entry(w.as_ref()).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, usize)> = freq.into_iter().map(|(w, c)| (symbols(w), c)).collect();

        let mut pair_counts: HashMap<(String, String), usize> = HashMap::new();
        let mut where_: HashMap<(String, String), HashSet<usize>> = HashMap::new();
        for (i, (syms, c)) in words.iter().enumerate() {
            for p in syms.windows(2) {
                let key = (p[0].clone(), p[1].clone());
                *pair_counts.entry(key.clone()).or_default() += c;
                where_.entry(key).or_default().insert(i);
            }
        }

        let mut merges = Vec::new();
        while merges.len() < num_merges {
            let best = pair_counts
                .iter()
                .filter(|(_, &c)| c >= 2)
                .max_by(|(a, ca), (b, cb)| ca.cmp(cb).then_with(|| b.cmp(a)))
                .map(|(k, _)| k.clone());
            let Some(best) = best else { break };
            let merged = format!("{}{}", best.0, best.1);
            let mut affected: Vec<usize> = where_
                .get(&best)
                .map(|s| s.iter().copied().collect())
                .unwrap_or_default();
            affected.sort_unstable();
            for i in affected {
                let (syms, c) = &mut words[i];
                for p in syms.windows(2) {
                    let key = (p[0].clone(), p[1].clone());
                    if let Some(v) = pair_counts.get_mut(&key) {
                        *v -= *c;
                        if *v == 0 {
                            pair_counts.remove(&key);
                        }
                    }
                    if let Some(s) = where_.get_mut(&key) {
                        s.remove(&i);
                    }
                }
                *syms = merge_pair(syms, &best.0, &best.1, &merged);
                for p in syms.windows(2) {
                    let key = (p[0].clone(), p[1].clone());
                    *pair_counts.entry(key.clone()).or_default() += *c;
                    where_.entry(key).or_default().insert(i);
                }
            }
            merges.push(best);
        }
        Self::from_merges(merges)
    }

    /// Internal units of one word, including the end-of-word sentinel.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        // Equivalent to replaying every merge in order: the next merge with
        // any effect is the lowest-ranked present pair above the last one
        // applied.
        let mut syms = symbols(word);
        let mut floor = None;
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).copied())
                .filter(|&r| floor.is_none_or(|f| r > f))
                .min();
            let Some(rank) = best else { break };
            let (a, b) = &self.merges[rank];
            syms = merge_pair(&syms, a, b, &format!("{a}{b}"));
            floor = Some(rank);
        }
        syms
    }

    /// Splits every token into marked subword units.
    pub fn apply<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        let mut out = Vec::new();
        for tok in tokens {
            let mut units = self.segment_word(tok.as_ref());
            match units.last_mut() {
                Some(last) if last == END_OF_WORD => {
                    units.pop();
                }
                Some(last) => {
                    last.truncate(last.len() - END_OF_WORD.len());
                }
                None => {}
            }
            let n = units.len();
            for (k, u) in units.into_iter().enumerate() {
                if k + 1 < n {
                    out.push(format!("{u}{MARKER}"));
                } else {
                    out.push(u);
                }
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(MERGES_TAG);
        s.push('\n');
        for (a, b) in &self.merges {
            s.push_str(a);
            s.push(' ');
            s.push_str(b);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MERGES_TAG) {
            return Err(Error::Format {
                what: "merges file",
                message: format!("missing header {MERGES_TAG}"),
            });
        }
        let merges = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let mut parts = l.split(' ');
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
                    _ => Err(Error::Format {
                        what: "merges file",
                        message: format!("bad merge line {l:?}"),
                    }),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_merges(merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

fn merge_pair(syms: &[String], a: &str, b: &str, merged: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

/// Joins marked units with their successors and strips the markers.
pub fn restore_words<S: AsRef<str>>(units: &[S]) -> Vec<String> {
    let mut out = Vec::new();
    let mut pending = String::new();
    for u in units {
        let u = u.as_ref();
        match u.strip_suffix(MARKER) {
            Some(stem) => pending.push_str(stem),
            None => {
                pending.push_str(u);
                out.push(std::mem::take(&mut pending));
            }
        }
    }
    if !pending.is_empty() {
        warn!("dangling subword marker at end of sequence");
        out.push(pending);
    }
    out
}
