//! Synthetic parallel corpora for experiments and tests.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::supervised::ParallelCorpus;

fn words(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn corpus(pairs: Vec<(Vec<String>, Vec<String>)>) -> ParallelCorpus {
    ParallelCorpus::new(pairs).expect("generated sides are never empty")
}

/// Target equals source over `vocab` words `w0..`.
pub fn copy_task(n: usize, vocab: usize, min_len: usize, max_len: usize, seed: u64) -> ParallelCorpus {
    let v = words("w", vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus(
        (0..n)
            .map(|_| {
                let len = rng.gen_range(min_len..=max_len);
                let s: Vec<String> = (0..len).map(|_| v[rng.gen_range(0..vocab)].clone()).collect();
                (s.clone(), s)
            })
            .collect(),
    )
}

/// Word-for-word translation with ambiguous source words whose preferred
/// sense differs between two domains.
///
/// Source words are `s0..` (plain) and `a0..` (ambiguous). Word `sK`
/// translates to `tK`, or in domain A to the synonym `uK` with probability
/// `synonym_prob`. Word `aK` translates to `xK` (major sense) or `yK` (minor
/// sense). In domain A every ambiguous word takes its major sense with
/// probability `major_prob`. In domain B synonyms never occur, the first
/// `shifted` ambiguous words always take the minor sense and the rest always
/// the major sense.
#[derive(Clone, Debug)]
pub struct LexiconShift {
    pub plain: usize,
    pub ambiguous: usize,
    pub shifted: usize,
    pub major_prob: f64,
    pub synonym_prob: f64,
    /// Chance that a position holds an ambiguous word.
    pub ambiguous_rate_a: f64,
    pub ambiguous_rate_b: f64,
    /// Relative frequency of each ambiguous word in domain B.
    pub weights_b: Vec<f64>,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for LexiconShift {
    fn default() -> Self {
        Self {
            plain: 16,
            ambiguous: 4,
            shifted: 1,
            major_prob: 0.7,
            synonym_prob: 0.15,
            ambiguous_rate_a: 0.3,
            ambiguous_rate_b: 0.4,
            weights_b: vec![1.0, 1.0, 1.0, 1.0],
            min_len: 3,
            max_len: 6,
        }
    }
}

impl LexiconShift {
    fn sentence<R: Rng>(&self, rng: &mut R, domain_b: bool) -> (Vec<String>, Vec<String>) {
        let len = rng.gen_range(self.min_len..=self.max_len);
        let rate = if domain_b {
            self.ambiguous_rate_b
        } else {
            self.ambiguous_rate_a
        };
        let amb = WeightedIndex::new(if domain_b {
            self.weights_b.clone()
        } else {
            vec![1.0; self.ambiguous]
        })
        .expect("positive weights");
        let (mut src, mut tgt) = (Vec::with_capacity(len), Vec::with_capacity(len));
        for _ in 0..len {
            if rng.gen::<f64>() < rate {
                let k = amb.sample(rng);
                src.push(format!("a{k}"));
                let minor = if domain_b {
                    k < self.shifted
                } else {
                    rng.gen::<f64>() >= self.major_prob
                };
                tgt.push(if minor { format!("y{k}") } else { format!("x{k}") });
            } else {
                let k = rng.gen_range(0..self.plain);
                src.push(format!("s{k}"));
                let synonym = !domain_b && rng.gen::<f64>() < self.synonym_prob;
                tgt.push(if synonym { format!("u{k}") } else { format!("t{k}") });
            }
        }
        (src, tgt)
    }

    pub fn domain_a(&self, n: usize, seed: u64) -> ParallelCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        corpus((0..n).map(|_| self.sentence(&mut rng, false)).collect())
    }

    pub fn domain_b(&self, n: usize, seed: u64) -> ParallelCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        corpus((0..n).map(|_| self.sentence(&mut rng, true)).collect())
    }

    /// Every source and target word type, for building vocabularies.
    pub fn lexicon(&self) -> (Vec<String>, Vec<String>) {
        let mut src = words("s", self.plain);
        src.extend(words("a", self.ambiguous));
        let mut tgt = words("t", self.plain);
        tgt.extend(words("u", self.plain));
        tgt.extend(words("x", self.ambiguous));
        tgt.extend(words("y", self.ambiguous));
        (src, tgt)
    }
}

/// A general-domain corpus with a minority of in-domain-like pairs mixed in,
/// plus separate in-domain text.
#[derive(Clone, Debug)]
pub struct MixedDomain {
    /// The pool to select from.
    pub pool: ParallelCorpus,
    /// Whether each pool pair was drawn from the in-domain distribution.
    pub in_domain: Vec<bool>,
    /// In-domain source sentences for the in-domain language model.
    pub monolingual: Vec<Vec<String>>,
    /// Held-out in-domain pairs for evaluation.
    pub test: ParallelCorpus,
}

/// Parameters of [`MixedDomain::generate`].
///
/// Each domain is a sparse first-order Markov chain: general sentences walk
/// over words `g0..` translated to `G0..`, in-domain sentences over `d0..`
/// translated to `D0..`. Every word has `branching` successors, drawn with
/// Zipf weights, and the first word of a sentence is Zipf-distributed too.
/// With probability `general_in_domain` (resp. `domain_in_general`) a
/// position holds a uniformly drawn word of the other domain instead.
#[derive(Clone, Debug)]
pub struct MixedDomainConfig {
    pub pool_size: usize,
    pub in_pool: usize,
    pub monolingual: usize,
    pub test: usize,
    pub general_words: usize,
    pub domain_words: usize,
    pub branching: usize,
    pub general_in_domain: f64,
    pub domain_in_general: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for MixedDomainConfig {
    fn default() -> Self {
        Self {
            pool_size: 10_000,
            in_pool: 1_000,
            monolingual: 2_000,
            test: 300,
            general_words: 40,
            domain_words: 60,
            branching: 4,
            general_in_domain: 0.1,
            domain_in_general: 0.02,
            min_len: 3,
            max_len: 7,
        }
    }
}

struct Chain {
    start: WeightedIndex<f64>,
    next: Vec<Vec<usize>>,
    step: WeightedIndex<f64>,
}

impl Chain {
    fn new<R: Rng>(words: usize, branching: usize, rng: &mut R) -> Self {
        let zipf = |n: usize| WeightedIndex::new((1..=n).map(|r| 1.0 / r as f64)).expect("positive weights");
        Self {
            start: zipf(words),
            next: (0..words)
                .map(|_| (0..branching).map(|_| rng.gen_range(0..words)).collect())
                .collect(),
            step: zipf(branching),
        }
    }
}

impl MixedDomain {
    pub fn generate(config: &MixedDomainConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let general = Chain::new(config.general_words, config.branching, &mut rng);
        let domain = Chain::new(config.domain_words, config.branching, &mut rng);
        let sentence = |rng: &mut ChaCha8Rng, in_domain: bool| {
            let len = rng.gen_range(config.min_len..=config.max_len);
            let (chain, own, other, mix, other_words) = if in_domain {
                (
                    &domain,
                    ("d", "D"),
                    ("g", "G"),
                    config.general_in_domain,
                    config.general_words,
                )
            } else {
                (
                    &general,
                    ("g", "G"),
                    ("d", "D"),
                    config.domain_in_general,
                    config.domain_words,
                )
            };
            let (mut s, mut t) = (Vec::with_capacity(len), Vec::with_capacity(len));
            let mut state = chain.start.sample(rng);
            for i in 0..len {
                if i > 0 {
                    state = chain.next[state][chain.step.sample(rng)];
                }
                if rng.gen::<f64>() < mix {
                    let k = rng.gen_range(0..other_words);
                    s.push(format!("{}{k}", other.0));
                    t.push(format!("{}{k}", other.1));
                } else {
                    s.push(format!("{}{state}", own.0));
                    t.push(format!("{}{state}", own.1));
                }
            }
            (s, t)
        };
        let mut flags: Vec<bool> = (0..config.pool_size).map(|i| i < config.in_pool).collect();
        rand::seq::SliceRandom::shuffle(&mut flags[..], &mut rng);
        let pool = flags.iter().map(|&f| sentence(&mut rng, f)).collect();
        let monolingual = (0..config.monolingual).map(|_| sentence(&mut rng, true).0).collect();
        let test = (0..config.test).map(|_| sentence(&mut rng, true)).collect();
        Self {
            pool: corpus(pool),
            in_domain: flags,
            monolingual,
            test: corpus(test),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_targets_equal_sources() {
        let c = copy_task(20, 5, 2, 4, 1);
        assert!(c.pairs.iter().all(|(s, t)| s == t && (2..=4).contains(&s.len())));
    }

    #[test]
    fn domains_differ_only_on_shifted_words() {
        let task = LexiconShift::default();
        let b = task.domain_b(500, 2);
        for (s, t) in &b.pairs {
            for (w, u) in s.iter().zip(t) {
                match w.as_str() {
                    "a0" => assert_eq!(u, "y0"),
                    w if w.starts_with('a') => assert_eq!(u[1..], w[1..]),
                    w => assert_eq!(u[1..], w[1..]),
                }
                assert!(!u.starts_with('y') || u == "y0");
                assert!(!u.starts_with('u'));
            }
        }
        let a = task.domain_a(2000, 3);
        let (mut major, mut minor) = (0, 0);
        for t in a.targets() {
            major += t.iter().filter(|w| w.starts_with('x')).count();
            minor += t.iter().filter(|w| w.starts_with('y')).count();
        }
        let share = major as f64 / (major + minor) as f64;
        assert!((share - 0.7).abs() < 0.03, "{share}");
    }

    #[test]
    fn mixed_domain_shape() {
        let config = MixedDomainConfig {
            pool_size: 200,
            in_pool: 20,
            monolingual: 30,
            test: 10,
            ..MixedDomainConfig::default()
        };
        let m = MixedDomain::generate(&config, 4);
        assert_eq!(m.pool.len(), 200);
        assert_eq!(m.in_domain.iter().filter(|&&f| f).count(), 20);
        assert_eq!((m.monolingual.len(), m.test.len()), (30, 10));
        let again = MixedDomain::generate(&config, 4);
        assert_eq!(again.pool, m.pool);
    }
}
