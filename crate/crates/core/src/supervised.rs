//! Maximum-likelihood training of the translation model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grad::{sgd_step, Grads, NodeId, SgdConfig, Tape};
use crate::metrics::corpus_bleu;
use crate::seq2seq::{DecodeConfig, Dropout, ModelDims, NmtParams, NoRng, TranslationModel, Vocabulary, EOS};

/// Parallel text as token sequences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<(Vec<String>, Vec<String>)>) -> Result<Self> {
        if let Some(i) = pairs.iter().position(|(s, t)| s.is_empty() || t.is_empty()) {
            return Err(invalid(format!("pair {i} has an empty side")));
        }
        Ok(Self { pairs })
    }

    /// Pairs whitespace-tokenized lines.
    pub fn from_lines<S: AsRef<str>>(src: &[S], tgt: &[S]) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(invalid(format!(
                "{} source lines but {} target lines",
                src.len(),
                tgt.len()
            )));
        }
        let split = |l: &S| l.as_ref().split_whitespace().map(String::from).collect::<Vec<_>>();
        Self::new(src.iter().zip(tgt).map(|(s, t)| (split(s), split(t))).collect())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|(s, _)| s.as_slice())
    }

    pub fn targets(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|(_, t)| t.as_slice())
    }

    pub fn encode(&self, src: &Vocabulary, tgt: &Vocabulary) -> Vec<Example> {
        self.pairs
            .iter()
            .map(|(s, t)| Example::new(src.encode(s), tgt.encode(t)))
            .collect()
    }
}

/// One id-encoded training pair; the target ends with EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl Example {
    pub fn new(source: Vec<usize>, mut target: Vec<usize>) -> Self {
        target.push(EOS);
        Self { source, target }
    }
}

/// Divisor of the summed batch log-likelihood.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossNormalization {
    #[default]
    PerToken,
    PerSentence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub embed: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub sgd: SgdConfig,
    pub bpe_merges: usize,
    /// Share of the corpus held out when no development set is given.
    pub heldout_fraction: f64,
    pub init_scale: f64,
    #[serde(default)]
    pub normalization: LossNormalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 13,
            embed: 500,
            hidden: 500,
            layers: 2,
            dropout: 0.3,
            sgd: SgdConfig::default(),
            bpe_merges: 20000,
            heldout_fraction: 0.05,
            init_scale: 0.1,
            normalization: LossNormalization::PerToken,
        }
    }
}

impl TrainConfig {
    /// Settings sized for a laptop CPU and vocabularies of a few dozen types.
    pub fn desk_scale() -> Self {
        Self {
            batch_size: 16,
            epochs: 13,
            embed: 16,
            hidden: 32,
            layers: 1,
            dropout: 0.0,
            sgd: SgdConfig {
                learning_rate: 1.0,
                decay_factor: 0.5,
                decay_start_epoch: 9,
                clip_norm: 5.0,
            },
            bpe_merges: 200,
            heldout_fraction: 0.05,
            init_scale: 0.3,
            normalization: LossNormalization::PerToken,
        }
    }

    pub fn dims(&self, src_vocab: usize, tgt_vocab: usize) -> ModelDims {
        ModelDims {
            src_vocab,
            tgt_vocab,
            embed: self.embed,
            hidden: self.hidden,
            layers: self.layers,
        }
    }
}

/// Loss of one batch with the tape that produced it.
pub struct BatchLoss {
    /// The normalized objective: mean negative log-likelihood per target
    /// token (or per sentence), in nats.
    pub loss: f64,
    /// Summed negative log-likelihood of the batch.
    pub total_nll: f64,
    pub tokens: usize,
    pub tape: Tape,
    pub node: NodeId,
}

impl BatchLoss {
    pub fn gradients(&self, params: &NmtParams) -> Result<Grads> {
        Ok(self.tape.backward(self.node)?.to_dense(&params.store))
    }
}

/// Per-token negative log-likelihood of a batch, with dropout masks drawn
/// from `seed` when `dropout > 0`.
pub fn batch_nll(params: &NmtParams, batch: &[Example], dropout: f64, seed: u64) -> Result<BatchLoss> {
    batch_nll_with(params, batch, dropout, seed, LossNormalization::PerToken)
}

pub fn batch_nll_with(
    params: &NmtParams,
    batch: &[Example],
    dropout: f64,
    seed: u64,
    normalization: LossNormalization,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(invalid(format!("dropout {dropout} outside [0, 1)")));
    }
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drop = Dropout {
        rate: dropout,
        rng: &mut rng,
    };
    let mut terms = Vec::new();
    for ex in batch {
        let d = if dropout > 0.0 { Some(&mut drop) } else { None };
        terms.extend(params.token_log_probs_on(&mut tape, &ex.source, &ex.target, 1.0, d)?);
    }
    let tokens = terms.len();
    let total = tape.add_all(&terms);
    let denom = match normalization {
        LossNormalization::PerToken => tokens,
        LossNormalization::PerSentence => batch.len(),
    };
    let node = tape.scale(total, -1.0 / denom as f64);
    Ok(BatchLoss {
        loss: tape.value(node).item(),
        total_nll: -tape.value(total).item(),
        tokens,
        tape,
        node,
    })
}

/// `exp` of the mean per-token negative log-likelihood, dropout off.
pub fn perplexity(params: &NmtParams, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("perplexity of an empty corpus"));
    }
    let (mut nll, mut tokens) = (0.0, 0usize);
    for ex in data {
        let mut tape = Tape::new();
        let lp = params.token_log_probs_on::<NoRng>(&mut tape, &ex.source, &ex.target, 1.0, None)?;
        nll -= lp.iter().map(|&n| tape.value(n).item()).sum::<f64>();
        tokens += lp.len();
    }
    Ok((nll / tokens as f64).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_ppl: f64,
    pub heldout_ppl: f64,
    pub lr: f64,
}

/// Splits off a held-out share; always keeps at least one training example.
pub fn split_heldout(data: &[Example], fraction: f64, seed: u64) -> (Vec<Example>, Vec<Example>) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_held = ((data.len() as f64 * fraction).round() as usize).min(data.len().saturating_sub(1));
    let held = idx[..n_held].iter().map(|&i| data[i].clone()).collect();
    let train = idx[n_held..].iter().map(|&i| data[i].clone()).collect();
    (train, held)
}

/// Length-bucketed batches in shuffled order.
fn make_batches<R: Rng>(data: &[Example], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    // stable sort keeps the shuffled order inside each length bucket
    idx.sort_by_key(|&i| (data[i].source.len(), data[i].target.len()));
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

/// Trains from scratch. With `heldout` absent, a share of `train` set by
/// `config.heldout_fraction` is held out for monitoring.
pub fn train_supervised(
    train: &[Example],
    heldout: Option<&[Example]>,
    dims: ModelDims,
    config: &TrainConfig,
    seed: u64,
) -> Result<(NmtParams, Vec<EpochMetrics>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = NmtParams::init(dims, config.init_scale, &mut rng)?;
    continue_supervised(params, train, heldout, config, seed)
}

/// Supervised training starting from existing parameters.
pub fn continue_supervised(
    mut params: NmtParams,
    train: &[Example],
    heldout: Option<&[Example]>,
    config: &TrainConfig,
    seed: u64,
) -> Result<(NmtParams, Vec<EpochMetrics>)> {
    if train.is_empty() {
        return Err(invalid("empty training corpus"));
    }
    if config.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let (train, held) = match heldout {
        Some(h) => (train.to_vec(), h.to_vec()),
        None => split_heldout(train, config.heldout_fraction, seed ^ 0x5eed),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let (mut nll, mut tokens) = (0.0, 0usize);
        let mut lr = config.sgd.rate_at(epoch);
        for batch in make_batches(&train, config.batch_size, &mut rng) {
            let examples: Vec<Example> = batch.iter().map(|&i| train[i].clone()).collect();
            let loss = batch_nll_with(&params, &examples, config.dropout, rng.gen(), config.normalization)?;
            let grads = loss.gradients(&params)?;
            lr = sgd_step(&mut params.store, &grads, &config.sgd, epoch)?;
            nll += loss.total_nll;
            tokens += loss.tokens;
        }
        let heldout_ppl = if held.is_empty() {
            f64::NAN
        } else {
            perplexity(&params, &held)?
        };
        let m = EpochMetrics {
            epoch,
            train_ppl: (nll / tokens as f64).exp(),
            heldout_ppl,
            lr,
        };
        log::info!(
            "epoch {epoch}: train ppl {:.3}, held-out ppl {:.3}, lr {lr}",
            m.train_ppl,
            m.heldout_ppl
        );
        metrics.push(m);
    }
    Ok((params, metrics))
}

/// Builds vocabularies from `train`, trains a model and bundles them.
pub fn train_translation_model(
    train: &ParallelCorpus,
    heldout: Option<&ParallelCorpus>,
    config: &TrainConfig,
    seed: u64,
) -> Result<(TranslationModel, Vec<EpochMetrics>)> {
    let src_vocab = Vocabulary::build(train.sources().map(|l| l.iter().map(String::as_str)), None);
    let tgt_vocab = Vocabulary::build(train.targets().map(|l| l.iter().map(String::as_str)), None);
    let data = train.encode(&src_vocab, &tgt_vocab);
    let held = heldout.map(|h| h.encode(&src_vocab, &tgt_vocab));
    let dims = config.dims(src_vocab.len(), tgt_vocab.len());
    let (params, metrics) = train_supervised(&data, held.as_deref(), dims, config, seed)?;
    Ok((
        TranslationModel {
            params,
            src_vocab,
            tgt_vocab,
        },
        metrics,
    ))
}

/// Corpus BLEU of the model's translations of `corpus` against its targets.
pub fn evaluate_bleu(model: &TranslationModel, corpus: &ParallelCorpus, config: &DecodeConfig) -> Result<f64> {
    let hyps = corpus
        .sources()
        .map(|s| model.translate(s, config))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Vec<String>> = corpus.targets().map(<[String]>::to_vec).collect();
    corpus_bleu(&hyps, &refs)
}

pub fn write_metrics_csv<W: std::io::Write>(metrics: &[EpochMetrics], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for m in metrics {
        out.serialize(m)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::{decode, DecodeConfig};

    fn dims(v: usize) -> ModelDims {
        ModelDims {
            src_vocab: v,
            tgt_vocab: v,
            embed: 8,
            hidden: 8,
            layers: 1,
        }
    }

    fn init(v: usize, seed: u64) -> NmtParams {
        NmtParams::init(dims(v), 0.3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn data() -> Vec<Example> {
        vec![
            Example::new(vec![4, 5, 6], vec![6, 5]),
            Example::new(vec![7], vec![4, 4, 8]),
            Example::new(vec![5, 9], vec![9]),
        ]
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let mut p = init(10, 1);
        let id = p.output_projection();
        p.store.get_mut(id).fill(0.0);
        let l = batch_nll(&p, &data(), 0.0, 0).unwrap();
        assert!((l.loss - 10f64.ln()).abs() < 1e-12);
        assert!((perplexity(&p, &data()).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn no_dropout_is_deterministic() {
        let p = init(10, 2);
        let a = batch_nll(&p, &data(), 0.0, 7).unwrap().loss;
        let b = batch_nll(&p, &data(), 0.0, 7).unwrap().loss;
        assert_eq!(a, b);
        assert!(batch_nll(&p, &[], 0.0, 7).is_err());
    }

    #[test]
    fn perplexity_matches_batch_loss() {
        let p = init(10, 3);
        let l = batch_nll(&p, &data(), 0.0, 0).unwrap();
        let ppl = perplexity(&p, &data()).unwrap();
        assert!((ppl - l.loss.exp()).abs() < 1e-9);
        assert!(ppl >= 1.0);
    }

    #[test]
    fn loss_does_not_depend_on_batch_layout() {
        let p = init(10, 4);
        let d = data();
        let whole = batch_nll(&p, &d, 0.0, 0).unwrap();
        let mut reordered = d.clone();
        reordered.reverse();
        let other = batch_nll(&p, &reordered, 0.0, 0).unwrap();
        assert!((whole.loss - other.loss).abs() < 1e-12);
        // token-weighted combination of separate batches equals the joint batch
        let a = batch_nll(&p, &d[..1], 0.0, 0).unwrap();
        let b = batch_nll(&p, &d[1..], 0.0, 0).unwrap();
        let joint = (a.loss * a.tokens as f64 + b.loss * b.tokens as f64) / (a.tokens + b.tokens) as f64;
        assert!((joint - whole.loss).abs() < 1e-12);
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let p = NmtParams::init(
            ModelDims {
                src_vocab: 8,
                tgt_vocab: 8,
                embed: 3,
                hidden: 4,
                layers: 2,
            },
            0.5,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let batch = vec![Example::new(vec![4, 5], vec![6, 7]), Example::new(vec![7], vec![4])];
        let l = batch_nll(&p, &batch, 0.0, 0).unwrap();
        let g = l.gradients(&p).unwrap().flatten();
        let base = p.store.flatten();
        let h = 1e-5;
        let mut q = p.clone();
        // every 7th coordinate keeps this quick; the acceptance suite checks all
        for k in (0..base.len()).step_by(7) {
            let mut x = base.clone();
            x[k] += h;
            q.store.set_flat(&x).unwrap();
            let fp = batch_nll(&q, &batch, 0.0, 0).unwrap().loss;
            x[k] -= 2.0 * h;
            q.store.set_flat(&x).unwrap();
            let fm = batch_nll(&q, &batch, 0.0, 0).unwrap().loss;
            let num = (fp - fm) / (2.0 * h);
            let rel = (g[k] - num).abs() / g[k].abs().max(num.abs()).max(1e-6);
            assert!(rel <= 1e-4, "coord {k}: {} vs {num}", g[k]);
        }
    }

    #[test]
    fn memorizes_single_pair() {
        let pair = vec![Example::new(vec![4, 5, 6], vec![7, 8])];
        let cfg = TrainConfig {
            batch_size: 1,
            epochs: 200,
            embed: 8,
            hidden: 8,
            layers: 1,
            dropout: 0.0,
            sgd: SgdConfig {
                decay_start_epoch: 1000,
                ..SgdConfig::default()
            },
            heldout_fraction: 0.0,
            ..TrainConfig::default()
        };
        let (p, m) = train_supervised(&pair, Some(&pair), dims(10), &cfg, 1).unwrap();
        assert_eq!(m.len(), 200);
        assert!(m.last().unwrap().heldout_ppl < 1.05, "{:?}", m.last());
        let out = decode(&p, &[4, 5, 6], &DecodeConfig::greedy()).unwrap();
        assert_eq!(out.tokens, vec![7, 8, EOS]);
    }

    #[test]
    fn loss_falls_on_small_corpus() {
        let d: Vec<Example> = (0..10)
            .map(|i| Example::new(vec![4 + i % 6, 4 + (i * 3) % 6], vec![4 + (i * 5) % 6]))
            .collect();
        let cfg = TrainConfig {
            batch_size: 5,
            epochs: 12,
            embed: 8,
            hidden: 8,
            layers: 1,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        let (_, m) = train_supervised(&d, Some(&d), dims(10), &cfg, 2).unwrap();
        let rises = m.windows(2).filter(|w| w[1].heldout_ppl > w[0].heldout_ppl).count();
        assert!(rises <= 1, "{m:?}");
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 2,
            embed: 4,
            hidden: 4,
            layers: 1,
            dropout: 0.3,
            ..TrainConfig::default()
        };
        let (a, _) = train_supervised(&data(), None, dims(10), &cfg, 9).unwrap();
        let (b, _) = train_supervised(&data(), None, dims(10), &cfg, 9).unwrap();
        assert_eq!(a.store, b.store);
    }
}
