//! Cross-entropy-difference data selection with interpolated Kneser–Ney
//! n-gram language models.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::supervised::ParallelCorpus;

pub const BOS_SYM: &str = "<s>";
pub const EOS_SYM: &str = "</s>";
pub const UNK_SYM: &str = "<unk>";

const BOS_ID: u32 = 0;
const EOS_ID: u32 = 1;
const UNK_ID: u32 = 2;

/// Corpora shorter than this get singleton words folded into `<unk>` when
/// [`LmOptions::singletons_to_unk`] is set.
pub const SMALL_CORPUS_LINES: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmOptions {
    pub order: usize,
    pub discount: f64,
    pub singletons_to_unk: bool,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            order: 4,
            discount: 0.75,
            singletons_to_unk: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Context {
    /// Sum of adjusted counts of all continuations.
    total: f64,
    /// Number of distinct continuations.
    types: f64,
}

/// Interpolated Kneser–Ney model with a fixed discount and a uniform
/// distribution over the vocabulary at the bottom.
///
/// Each sentence is padded with one `<s>` and one `</s>`. The highest order
/// and n-grams starting with `<s>` use raw counts; other lower orders use
/// the number of distinct left extensions.
#[derive(Clone, Debug)]
pub struct NgramModel {
    order: usize,
    discount: f64,
    ids: HashMap<String, u32>,
    /// Adjusted counts per order, indexed by `order - 1`.
    counts: Vec<HashMap<Vec<u32>, f64>>,
    /// Continuation statistics per history, indexed by history length.
    contexts: Vec<HashMap<Vec<u32>, Context>>,
}

impl NgramModel {
    pub fn train<S: AsRef<str>>(corpus: &[Vec<S>], options: &LmOptions) -> Result<Self> {
        if corpus.is_empty() {
            return Err(invalid("empty language-model corpus"));
        }
        if options.order == 0 {
            return Err(invalid("n-gram order must be at least 1"));
        }
        if !(options.discount > 0.0 && options.discount < 1.0) {
            return Err(invalid(format!("discount {} outside (0, 1)", options.discount)));
        }
        let n = options.order;
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for line in corpus {
            for w in line {
                *freq.entry(w.as_ref()).or_default() += 1;
            }
        }
        let fold = options.singletons_to_unk && corpus.len() < SMALL_CORPUS_LINES;
        let mut ids: HashMap<String, u32> = HashMap::new();
        ids.insert(BOS_SYM.into(), BOS_ID);
        ids.insert(EOS_SYM.into(), EOS_ID);
        ids.insert(UNK_SYM.into(), UNK_ID);
        let mut words: Vec<&str> = freq
            .iter()
            .filter(|(_, &c)| !(fold && c == 1))
            .map(|(w, _)| *w)
            .collect();
        words.sort_unstable();
        for w in words {
            let next = ids.len() as u32;
            ids.entry(w.to_string()).or_insert(next);
        }

        let mut raw: Vec<HashMap<Vec<u32>, f64>> = vec![HashMap::new(); n];
        for line in corpus {
            let padded = pad(&ids, line);
            for end in 1..padded.len() {
                for len in 1..=n.min(end + 1) {
                    let g = padded[end + 1 - len..=end].to_vec();
                    *raw[len - 1].entry(g).or_default() += 1.0;
                }
            }
        }
        // unigram table never holds <s>: it is not predicted
        let mut counts: Vec<HashMap<Vec<u32>, f64>> = vec![HashMap::new(); n];
        counts[n - 1] = raw[n - 1].clone();
        for k in (0..n - 1).rev() {
            let mut adj: HashMap<Vec<u32>, f64> = raw[k]
                .iter()
                .filter(|(g, _)| g[0] == BOS_ID)
                .map(|(g, &c)| (g.clone(), c))
                .collect();
            for g in raw[k + 1].keys() {
                if g[1] != BOS_ID {
                    *adj.entry(g[1..].to_vec()).or_default() += 1.0;
                }
            }
            counts[k] = adj;
        }
        let mut contexts: Vec<HashMap<Vec<u32>, Context>> = vec![HashMap::new(); n];
        for (k, table) in counts.iter().enumerate() {
            for (g, &c) in table {
                let ctx = contexts[k].entry(g[..k].to_vec()).or_default();
                ctx.total += c;
                ctx.types += 1.0;
            }
        }
        Ok(Self {
            order: n,
            discount: options.discount,
            ids,
            counts,
            contexts,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of predictable types: every known word plus `</s>` and `<unk>`.
    pub fn vocab_size(&self) -> usize {
        self.ids.len() - 1
    }

    fn id(&self, w: &str) -> u32 {
        self.ids.get(w).copied().filter(|&i| i != BOS_ID).unwrap_or(UNK_ID)
    }

    /// Known words with `</s>` and `<unk>`, excluding `<s>`.
    pub fn vocabulary(&self) -> Vec<&str> {
        let mut v: Vec<(&str, u32)> = self
            .ids
            .iter()
            .filter(|(_, &i)| i != BOS_ID)
            .map(|(w, &i)| (w.as_str(), i))
            .collect();
        v.sort_by_key(|&(_, i)| i);
        v.into_iter().map(|(w, _)| w).collect()
    }

    fn prob_ids(&self, history: &[u32], w: u32) -> f64 {
        let h = &history[history.len().saturating_sub(self.order - 1)..];
        self.interpolate(h, w)
    }

    fn interpolate(&self, h: &[u32], w: u32) -> f64 {
        let lower = if h.is_empty() {
            1.0 / self.vocab_size() as f64
        } else {
            self.interpolate(&h[1..], w)
        };
        let k = h.len();
        match self.contexts[k].get(h) {
            None => lower,
            Some(ctx) => {
                let mut g = h.to_vec();
                g.push(w);
                let c = self.counts[k].get(&g).copied().unwrap_or(0.0);
                (c - self.discount).max(0.0) / ctx.total + self.discount * ctx.types / ctx.total * lower
            }
        }
    }

    /// `P(w | history)`; unknown words count as `<unk>`. The history may
    /// start with `<s>`.
    pub fn prob<S: AsRef<str>>(&self, history: &[S], w: &str) -> f64 {
        let h: Vec<u32> = history
            .iter()
            .map(|t| {
                if t.as_ref() == BOS_SYM {
                    BOS_ID
                } else {
                    self.id(t.as_ref())
                }
            })
            .collect();
        self.prob_ids(&h, self.id(w))
    }

    /// Every history with at least one observed continuation, as symbols.
    pub fn histories(&self) -> Vec<Vec<String>> {
        let names: HashMap<u32, &str> = self.ids.iter().map(|(w, &i)| (i, w.as_str())).collect();
        let mut out: Vec<Vec<String>> = self
            .contexts
            .iter()
            .flat_map(|t| t.keys())
            .map(|h| h.iter().map(|i| names[i].to_string()).collect())
            .collect();
        out.sort();
        out
    }
}

fn pad<S: AsRef<str>>(ids: &HashMap<String, u32>, line: &[S]) -> Vec<u32> {
    let mut p = Vec::with_capacity(line.len() + 2);
    p.push(BOS_ID);
    p.extend(line.iter().map(|w| ids.get(w.as_ref()).copied().unwrap_or(UNK_ID)));
    p.push(EOS_ID);
    p
}

/// Mean negative natural-log probability per token, counting `</s>` and not
/// `<s>`.
pub fn cross_entropy<S: AsRef<str>>(sentence: &[S], lm: &NgramModel) -> Result<f64> {
    if sentence.is_empty() {
        return Err(invalid("cross-entropy of an empty sentence"));
    }
    let mut p = Vec::with_capacity(sentence.len() + 2);
    p.push(BOS_ID);
    p.extend(sentence.iter().map(|w| lm.id(w.as_ref())));
    p.push(EOS_ID);
    let nll: f64 = (1..p.len()).map(|i| -lm.prob_ids(&p[..i], p[i]).ln()).sum();
    Ok(nll / (p.len() - 1) as f64)
}

/// `H_in(s) − H_out(s)`; lower means more like the in-domain text.
pub fn moore_lewis_score<S: AsRef<str>>(sentence: &[S], lm_in: &NgramModel, lm_out: &NgramModel) -> Result<f64> {
    Ok(cross_entropy(sentence, lm_in)? - cross_entropy(sentence, lm_out)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSentence {
    pub index: usize,
    pub score: f64,
}

/// Scores every sentence, in input order.
pub fn score_all<S: AsRef<str> + Sync>(
    sentences: &[Vec<S>],
    lm_in: &NgramModel,
    lm_out: &NgramModel,
) -> Result<Vec<ScoredSentence>> {
    sentences
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            let score = moore_lewis_score(s, lm_in, lm_out)?;
            if !score.is_finite() {
                return Err(invalid(format!("non-finite score for sentence {index}")));
            }
            Ok(ScoredSentence { index, score })
        })
        .collect()
}

/// Sorts ascending by score; equal scores keep corpus order.
pub fn rank(mut scored: Vec<ScoredSentence>) -> Vec<ScoredSentence> {
    scored.sort_by(|a, b| a.score.total_cmp(&b.score));
    scored
}

/// `⌈fraction · n⌉`.
pub fn selection_size(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    Ok(((fraction * n as f64).ceil() as usize).min(n))
}

/// Picks the best-scoring share of `corpus` by its source side. Returns the
/// selected pairs in rank order and the full ranking.
pub fn select(
    corpus: &ParallelCorpus,
    lm_in: &NgramModel,
    lm_out: &NgramModel,
    fraction: f64,
) -> Result<(ParallelCorpus, Vec<ScoredSentence>)> {
    let k = selection_size(corpus.len(), fraction)?;
    let sources: Vec<&[String]> = corpus.sources().collect();
    let scored = sources
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            Ok(ScoredSentence {
                index,
                score: moore_lewis_score(s, lm_in, lm_out)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ranked = rank(scored);
    let pairs = ranked[..k].iter().map(|s| corpus.pairs[s.index].clone()).collect();
    Ok((ParallelCorpus { pairs }, ranked))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Share of the out-of-domain corpus to keep.
    pub fraction: f64,
    /// Number of in-domain lines used, from the top of the file.
    pub in_domain_cap: usize,
    pub order: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            fraction: 0.3,
            in_domain_cap: 40_000,
            order: 4,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config {
                key: "selection.fraction".into(),
                message: format!("must lie in (0, 1], got {}", self.fraction),
            });
        }
        if self.in_domain_cap == 0 {
            return Err(Error::Config {
                key: "selection.in_domain_cap".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.order == 0 {
            return Err(Error::Config {
                key: "selection.order".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Trains both language models and selects. The in-domain model folds
/// singletons into `<unk>` for small corpora; the out-of-domain model is
/// trained on the source side of `corpus`.
pub fn select_data(
    in_domain: &[Vec<String>],
    corpus: &ParallelCorpus,
    config: &SelectionConfig,
) -> Result<(ParallelCorpus, Vec<ScoredSentence>)> {
    config.validate()?;
    let cap = config.in_domain_cap.min(in_domain.len());
    let lm_in = NgramModel::train(
        &in_domain[..cap],
        &LmOptions {
            order: config.order,
            singletons_to_unk: true,
            ..LmOptions::default()
        },
    )?;
    let out_src: Vec<Vec<String>> = corpus.sources().map(<[String]>::to_vec).collect();
    let lm_out = NgramModel::train(
        &out_src,
        &LmOptions {
            order: config.order,
            ..LmOptions::default()
        },
    )?;
    select(corpus, &lm_in, &lm_out, config.fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lines(ls: &[&str]) -> Vec<Vec<String>> {
        ls.iter()
            .map(|l| l.split_whitespace().map(String::from).collect())
            .collect()
    }

    fn check_normalized(lm: &NgramModel) {
        let vocab = lm.vocabulary();
        for h in lm.histories() {
            let s: f64 = vocab.iter().map(|w| lm.prob(&h, w)).sum();
            assert!((s - 1.0).abs() < 1e-6, "history {h:?} sums to {s}");
        }
        let s: f64 = vocab.iter().map(|w| lm.prob::<&str>(&[], w)).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn one_sentence_corpus() {
        let lm = NgramModel::train(&lines(&["a b"]), &LmOptions::default()).unwrap();
        check_normalized(&lm);
        let pa = lm.prob(&["<s>"], "a");
        for w in lm.vocabulary() {
            assert!(w == "a" || pa > 2.0 * lm.prob(&["<s>"], w), "{w}");
        }
        assert!(NgramModel::train::<String>(&[], &LmOptions::default()).is_err());
    }

    #[test]
    fn unigram_counts_order() {
        let opts = LmOptions {
            order: 1,
            ..LmOptions::default()
        };
        let lm = NgramModel::train(&lines(&["a a a b"]), &opts).unwrap();
        assert!(lm.prob::<&str>(&[], "a") > lm.prob::<&str>(&[], "b"));
        check_normalized(&lm);
    }

    #[test]
    fn every_word_has_mass() {
        let lm = NgramModel::train(&lines(&["x y z", "y z"]), &LmOptions::default()).unwrap();
        for w in lm.vocabulary() {
            assert!(lm.prob(&["<s>", "x", "y"], w) > 0.0);
        }
        assert!(lm.prob(&["x"], "never-seen") > 0.0);
    }

    #[test]
    fn singletons_fold_into_unknown() {
        let opts = LmOptions {
            singletons_to_unk: true,
            ..LmOptions::default()
        };
        let lm = NgramModel::train(&lines(&["a b", "a c"]), &opts).unwrap();
        assert_eq!(lm.vocabulary(), vec!["</s>", "<unk>", "a"]);
        assert_eq!(lm.prob(&["a"], "b"), lm.prob(&["a"], "zzz"));
        check_normalized(&lm);
    }

    #[test]
    fn equal_counts_give_equal_token_costs() {
        // a single-order model whose continuation counts are all equal
        let opts = LmOptions {
            order: 1,
            ..LmOptions::default()
        };
        let lm = NgramModel::train(&lines(&["p q r"]), &opts).unwrap();
        // counts: p, q, r, </s> each once; <unk> only through the backstop
        let v = lm.vocab_size() as f64;
        let known = (1.0 - 0.75) / 4.0 + 0.75 / v;
        let h = cross_entropy(&["q", "p"], &lm).unwrap();
        assert!((h + known.ln()).abs() < 1e-12);
        assert!(cross_entropy::<&str>(&[], &lm).is_err());
    }

    #[test]
    fn memorized_sentence_is_most_likely() {
        let lm = NgramModel::train(&lines(&["the cat sat"]), &LmOptions::default()).unwrap();
        let words = ["the", "cat", "sat"];
        let best = cross_entropy(&words, &lm).unwrap();
        for a in words {
            for b in words {
                for c in words {
                    let s = [a, b, c];
                    if s != words {
                        assert!(cross_entropy(&s, &lm).unwrap() > best);
                    }
                }
            }
        }
    }

    #[test]
    fn score_identities() {
        let c = lines(&["a b c", "b c d", "a a d"]);
        let lm = NgramModel::train(&c, &LmOptions::default()).unwrap();
        let other = NgramModel::train(&lines(&["d d a", "c b"]), &LmOptions::default()).unwrap();
        for s in &c {
            assert_eq!(moore_lewis_score(s, &lm, &lm).unwrap(), 0.0);
            let ab = moore_lewis_score(s, &lm, &other).unwrap();
            let ba = moore_lewis_score(s, &other, &lm).unwrap();
            assert_eq!(ab, -ba);
        }
    }

    #[test]
    fn disjoint_lexicons_separate() {
        let lm_in = NgramModel::train(&lines(&["a b a", "b a b b"]), &LmOptions::default()).unwrap();
        let lm_out = NgramModel::train(&lines(&["x y x", "y y x"]), &LmOptions::default()).unwrap();
        let s_in = moore_lewis_score(&["a", "b"], &lm_in, &lm_out).unwrap();
        let s_out = moore_lewis_score(&["x", "y"], &lm_in, &lm_out).unwrap();
        assert!(s_in < s_out);
    }

    fn pc(src: &[&str]) -> ParallelCorpus {
        let tgt: Vec<String> = (0..src.len()).map(|i| format!("t{i}")).collect();
        ParallelCorpus::from_lines(&src.iter().map(|s| s.to_string()).collect::<Vec<_>>(), &tgt).unwrap()
    }

    #[test]
    fn selection_contract() {
        let corpus = pc(&["a b", "x y", "a a b", "y x x", "b a"]);
        let lm_in = NgramModel::train(&lines(&["a b a", "b b a"]), &LmOptions::default()).unwrap();
        let lm_out = NgramModel::train(
            &corpus.sources().map(<[String]>::to_vec).collect::<Vec<_>>(),
            &LmOptions::default(),
        )
        .unwrap();
        let (all, ranked) = select(&corpus, &lm_in, &lm_out, 1.0).unwrap();
        assert_eq!(all.len(), 5);
        let mut idx: Vec<usize> = ranked.iter().map(|s| s.index).collect();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        let (one, _) = select(&corpus, &lm_in, &lm_out, 0.2).unwrap();
        let min = ranked.iter().map(|s| s.score).fold(f64::INFINITY, f64::min);
        assert_eq!(one.pairs[0], corpus.pairs[ranked[0].index]);
        assert_eq!(ranked[0].score, min);
        assert!(select(&corpus, &lm_in, &lm_out, 0.0).is_err());
        // the target side travels with its source
        assert!(one.pairs[0].1[0].starts_with('t'));
    }

    #[test]
    fn ties_keep_corpus_order() {
        let r = rank(vec![
            ScoredSentence { index: 0, score: 1.0 },
            ScoredSentence { index: 1, score: 0.5 },
            ScoredSentence { index: 2, score: 1.0 },
            ScoredSentence { index: 3, score: 0.5 },
        ]);
        assert_eq!(r.iter().map(|s| s.index).collect::<Vec<_>>(), vec![1, 3, 0, 2]);
    }

    fn corpus_strategy() -> impl Strategy<Value = Vec<Vec<String>>> {
        prop::collection::vec(
            prop::collection::vec(
                prop::sample::select(vec!["a", "b", "c", "d"]).prop_map(String::from),
                1..7,
            ),
            1..8,
        )
    }

    proptest! {
        #[test]
        fn distributions_normalize(c in corpus_strategy(), order in 1usize..5, fold in any::<bool>()) {
            let opts = LmOptions { order, singletons_to_unk: fold, ..LmOptions::default() };
            let lm = NgramModel::train(&c, &opts).unwrap();
            check_normalized(&lm);
        }

        #[test]
        fn selection_is_prefix_monotone(c in corpus_strategy(), f1 in 0.05f64..1.0, f2 in 0.05f64..1.0) {
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let tgt: Vec<Vec<String>> = c.iter().map(|_| vec!["t".to_string()]).collect();
            let corpus = ParallelCorpus::new(c.iter().cloned().zip(tgt).collect()).unwrap();
            let lm_in = NgramModel::train(&c[..1], &LmOptions::default()).unwrap();
            let lm_out = NgramModel::train(&c, &LmOptions::default()).unwrap();
            let (_, ranked) = select(&corpus, &lm_in, &lm_out, hi).unwrap();
            let a = selection_size(c.len(), lo).unwrap();
            let b = selection_size(c.len(), hi).unwrap();
            let (sa, _) = select(&corpus, &lm_in, &lm_out, lo).unwrap();
            let (sb, _) = select(&corpus, &lm_in, &lm_out, hi).unwrap();
            prop_assert!(a <= b);
            prop_assert_eq!(&sa.pairs[..], &sb.pairs[..a]);
            prop_assert_eq!(ranked.len(), c.len());
        }
    }
}
