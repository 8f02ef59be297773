//! Policy-gradient adaptation from scalar sentence rewards.
//!
//! The actor is an [`NmtParams`] policy; the critic is a separate
//! encoder-decoder whose scalar head estimates the expected reward of a
//! translation prefix. Gradients returned by [`reinforce_gradient`] and
//! [`a2c_gradient`] point uphill on expected reward; [`critic_gradient`]
//! points uphill on the squared error, so both are applied with opposite
//! signs by the optimizer.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{Read, Write};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bpe::{restore_words, BpeModel};
use crate::error::{invalid, Error, Result};
use crate::grad::{adam_step, AdamState, Grads, NodeId, Tape};
use crate::metrics::sentence_reward;
use crate::seq2seq::{decode_with_rng, CriticParams, DecodeConfig, NmtParams, NoRng, TranslationModel, Trunk, EOS};

/// One logged interaction: source ids, sampled output ids (ending in EOS
/// when the sample stopped) and the reward it earned.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTriple {
    pub source: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub reward: f64,
}

impl RewardTriple {
    pub fn new(source: Vec<usize>, hypothesis: Vec<usize>, reward: f64) -> Result<Self> {
        if source.is_empty() || hypothesis.is_empty() {
            return Err(invalid("triple with empty source or hypothesis"));
        }
        if !(0.0..=1.0).contains(&reward) {
            return Err(invalid(format!("reward {reward} outside [0, 1]")));
        }
        Ok(Self {
            source,
            hypothesis,
            reward,
        })
    }
}

fn value_nodes(critic: &CriticParams, tape: &mut Tape, source: &[usize], hyp: &[usize]) -> Result<Vec<NodeId>> {
    if hyp.is_empty() {
        return Err(invalid("empty hypothesis"));
    }
    if let Some(&bad) = hyp.iter().find(|&&t| t >= critic.dims.tgt_vocab) {
        return Err(invalid(format!("hypothesis id {bad} outside vocabulary")));
    }
    let trunk = Trunk::of_critic(critic);
    let enc = trunk.encode::<NoRng>(tape, source, None)?;
    let mut state = trunk.initial_state(tape, &enc);
    let w = tape.param(&critic.store, critic.value_w);
    let b = tape.param(&critic.store, critic.value_b);
    let mut prev = crate::seq2seq::BOS;
    let mut out = Vec::with_capacity(hyp.len());
    for &y in hyp {
        state = trunk.step::<NoRng>(tape, &enc, &state, prev, None)?;
        let d = tape.dot(w, state.feed);
        out.push(tape.add(d, b));
        prev = y;
    }
    Ok(out)
}

/// `V_t` for every prefix `ŷ_<t`, `t = 1..=|ŷ|`.
pub fn critic_values(critic: &CriticParams, source: &[usize], hyp: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let v = value_nodes(critic, &mut tape, source, hyp)?;
    Ok(v.iter().map(|&n| tape.value(n).item()).collect())
}

/// Squared-error loss `Σ_t (R − V_t)²` and its gradient, formed from the
/// residuals as `−2 Σ_t (R − V_t) ∇V_t`.
pub fn critic_gradient(critic: &CriticParams, triple: &RewardTriple) -> Result<(f64, Grads)> {
    let mut tape = Tape::new();
    let v = value_nodes(critic, &mut tape, &triple.source, &triple.hypothesis)?;
    let mut loss = 0.0;
    let seeds: Vec<(NodeId, f64)> = v
        .iter()
        .map(|&n| {
            let resid = triple.reward - tape.value(n).item();
            loss += resid * resid;
            (n, -2.0 * resid)
        })
        .collect();
    Ok((loss, tape.backward_weighted(&seeds).to_dense(&critic.store)))
}

/// The same loss differentiated through the tape.
pub fn critic_loss_autodiff(critic: &CriticParams, triple: &RewardTriple) -> Result<(f64, Grads)> {
    let mut tape = Tape::new();
    let v = value_nodes(critic, &mut tape, &triple.source, &triple.hypothesis)?;
    let r = tape.scalar(triple.reward);
    let sq: Vec<NodeId> = v
        .iter()
        .map(|&n| {
            let d = tape.sub(r, n);
            tape.square(d)
        })
        .collect();
    let loss = tape.add_all(&sq);
    let g = tape.backward(loss)?.to_dense(&critic.store);
    Ok((tape.value(loss).item(), g))
}

/// One Adam step on a single triple; returns the loss before the step.
pub fn critic_update(critic: &mut CriticParams, triple: &RewardTriple, adam: &mut AdamState) -> Result<f64> {
    let (loss, g) = critic_gradient(critic, triple)?;
    adam_step(&mut critic.store, &g, adam)?;
    Ok(loss)
}

/// Builds `Σ_t c_t log P_τ(ŷ_t | ŷ_<t, x)` with the coefficients recorded as
/// constant nodes, then differentiates it.
fn weighted_score_gradient(
    params: &NmtParams,
    source: &[usize],
    hyp: &[usize],
    coeffs: &[f64],
    tau: f64,
) -> Result<Grads> {
    let mut tape = Tape::new();
    let lp = params.token_log_probs_on::<NoRng>(&mut tape, source, hyp, tau, None)?;
    let terms: Vec<NodeId> = lp
        .iter()
        .zip(coeffs)
        .map(|(&l, &c)| {
            let k = tape.scalar(c);
            tape.mul(k, l)
        })
        .collect();
    let obj = tape.add_all(&terms);
    Ok(tape.backward(obj)?.to_dense(&params.store))
}

/// Single-sample estimate `R ∇θ Σ_t log P_τ(ŷ_t | ŷ_<t, x)`.
pub fn reinforce_gradient(params: &NmtParams, source: &[usize], hyp: &[usize], reward: f64, tau: f64) -> Result<Grads> {
    weighted_score_gradient(params, source, hyp, &vec![reward; hyp.len()], tau)
}

/// Single-sample estimate `Σ_t ∇θ log P_τ(ŷ_t | ŷ_<t, x) (R − V_t)` with the
/// critic's values held fixed.
pub fn a2c_gradient(
    params: &NmtParams,
    critic: &CriticParams,
    source: &[usize],
    hyp: &[usize],
    reward: f64,
    tau: f64,
) -> Result<Grads> {
    let values = critic_values(critic, source, hyp)?;
    a2c_gradient_with_values(params, source, hyp, reward, &values, tau)
}

pub fn a2c_gradient_with_values(
    params: &NmtParams,
    source: &[usize],
    hyp: &[usize],
    reward: f64,
    values: &[f64],
    tau: f64,
) -> Result<Grads> {
    if values.len() != hyp.len() {
        return Err(invalid(format!("{} values for {} tokens", values.len(), hyp.len())));
    }
    let adv: Vec<f64> = values.iter().map(|v| reward - v).collect();
    weighted_score_gradient(params, source, hyp, &adv, tau)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticPretrainConfig {
    pub epochs: usize,
    pub heldout_fraction: f64,
    pub learning_rate: f64,
}

impl Default for CriticPretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            heldout_fraction: 0.1,
            learning_rate: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Per-token mean squared error on the held-out triples after each epoch.
    pub heldout_mse: Vec<f64>,
    /// The same error for a critic that always predicts zero.
    pub zero_mse: f64,
    pub train_size: usize,
    pub heldout_size: usize,
}

/// Per-token mean of `(R − V_t)²` over `triples`.
pub fn critic_mse(critic: &CriticParams, triples: &[RewardTriple]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for t in triples {
        for v in critic_values(critic, &t.source, &t.hypothesis)? {
            sum += (t.reward - v).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(invalid("no triples to score"));
    }
    Ok(sum / n as f64)
}

/// Regression of the critic onto logged rewards, one Adam step per triple.
pub fn pretrain_critic(
    mut critic: CriticParams,
    triples: &[RewardTriple],
    config: &CriticPretrainConfig,
    seed: u64,
) -> Result<(CriticParams, PretrainReport)> {
    if triples.is_empty() {
        return Err(invalid("no triples for critic pretraining"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..triples.len()).collect();
    order.shuffle(&mut rng);
    let n_held = ((triples.len() as f64 * config.heldout_fraction).round() as usize).min(triples.len() - 1);
    let held: Vec<RewardTriple> = order[..n_held].iter().map(|&i| triples[i].clone()).collect();
    let mut train: Vec<usize> = order[n_held..].to_vec();
    let monitor = if held.is_empty() { triples } else { &held[..] };
    let zero_mse = {
        let (s, n) = monitor.iter().fold((0.0, 0usize), |(s, n), t| {
            (s + t.reward.powi(2) * t.hypothesis.len() as f64, n + t.hypothesis.len())
        });
        s / n as f64
    };
    let mut adam = AdamState::new(&critic.store, config.learning_rate);
    let mut heldout_mse = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        train.shuffle(&mut rng);
        for &i in &train {
            critic_update(&mut critic, &triples[i], &mut adam)?;
        }
        let mse = critic_mse(&critic, monitor)?;
        info!("critic epoch {epoch}: held-out mse {mse:.5} (zero predictor {zero_mse:.5})");
        heldout_mse.push(mse);
    }
    Ok((
        critic,
        PretrainReport {
            heldout_mse,
            zero_mse,
            train_size: train.len(),
            heldout_size: held.len(),
        },
    ))
}

/// Order in which a block of translations is sent to the feedback channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubmitOrder {
    #[default]
    InOrder,
    Reversed,
    Shuffled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct A2cConfig {
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    /// Number of logged triples used to pretrain the critic.
    pub pretrain_triples: usize,
    pub pretrain: CriticPretrainConfig,
    /// Cap on translated sentences; `None` runs to the end of the stream.
    pub rounds: Option<usize>,
    pub max_len: Option<usize>,
    pub submit_order: SubmitOrder,
}

impl Default for A2cConfig {
    fn default() -> Self {
        Self {
            tau: 2.0 / 3.0,
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            batch_size: 64,
            pretrain_triples: 20_000,
            pretrain: CriticPretrainConfig::default(),
            rounds: None,
            max_len: None,
            submit_order: SubmitOrder::InOrder,
        }
    }
}

impl A2cConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config {
                key: "a2c.tau".into(),
                message: format!("must be positive, got {}", self.tau),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config {
                key: "a2c.batch_size".into(),
                message: "must be at least 1".into(),
            });
        }
        for (key, v) in [("a2c.actor_lr", self.actor_lr), ("a2c.critic_lr", self.critic_lr)] {
            if !(v > 0.0) {
                return Err(Error::Config {
                    key: key.into(),
                    message: format!("must be positive, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Translations awaiting a reward, and rewarded ones awaiting an update.
#[derive(Debug, Default)]
pub struct RewardCache {
    pending: BTreeMap<u64, (Vec<usize>, Vec<usize>)>,
    completed: BTreeMap<u64, RewardTriple>,
    resolved: BTreeSet<u64>,
}

impl RewardCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn submit(&mut self, id: u64, source: Vec<usize>, hyp: Vec<usize>) -> Result<()> {
        if self.pending.contains_key(&id) || self.resolved.contains(&id) {
            return Err(Error::Protocol(format!("duplicate id {id}")));
        }
        self.pending.insert(id, (source, hyp));
        Ok(())
    }

    /// Attaches a reward to a pending translation.
    pub fn resolve(&mut self, id: u64, reward: f64) -> Result<()> {
        if self.resolved.contains(&id) {
            return Err(Error::Protocol(format!("duplicate id {id}")));
        }
        let Some((source, hyp)) = self.pending.remove(&id) else {
            return Err(Error::Protocol(format!("unknown id {id}")));
        };
        let triple = match RewardTriple::new(source.clone(), hyp.clone(), reward) {
            Ok(t) => t,
            Err(e) => {
                self.pending.insert(id, (source, hyp));
                return Err(Error::Protocol(format!("id {id}: {e}")));
            }
        };
        self.resolved.insert(id);
        self.completed.insert(id, triple);
        Ok(())
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn completed_len(&self) -> usize {
        self.completed.len()
    }

    /// Removes the `b` lowest-id rewarded entries, or nothing if fewer exist.
    pub fn take_batch(&mut self, b: usize) -> Option<Vec<(u64, RewardTriple)>> {
        if b == 0 || self.completed.len() < b {
            return None;
        }
        let ids: Vec<u64> = self.completed.keys().take(b).copied().collect();
        Some(
            ids.into_iter()
                .map(|id| (id, self.completed.remove(&id).unwrap()))
                .collect(),
        )
    }

    /// Removes every rewarded entry regardless of count.
    pub fn drain_completed(&mut self) -> Vec<(u64, RewardTriple)> {
        std::mem::take(&mut self.completed).into_iter().collect()
    }
}

/// Source of sentences and sink of translations that answers with rewards.
pub trait FeedbackChannel {
    /// Next source sentence as word tokens, or `None` at end of stream.
    fn next_source(&mut self) -> Result<Option<(u64, Vec<String>)>>;
    fn submit(&mut self, id: u64, translation: &[String]) -> Result<()>;
    /// Next `(id, reward)`; `None` when the channel closed.
    fn next_reward(&mut self) -> Result<Option<(u64, f64)>>;
}

/// In-process channel scoring against held references with [`sentence_reward`].
#[derive(Clone, Debug)]
pub struct LocalFeedback {
    sources: Vec<Vec<String>>,
    references: Vec<Vec<String>>,
    next: usize,
    queue: VecDeque<(u64, f64)>,
    /// Deliver rewards newest first.
    pub lifo: bool,
}

impl LocalFeedback {
    pub fn new(sources: Vec<Vec<String>>, references: Vec<Vec<String>>) -> Result<Self> {
        if sources.len() != references.len() {
            return Err(invalid("sources and references differ in length"));
        }
        Ok(Self {
            sources,
            references,
            next: 0,
            queue: VecDeque::new(),
            lifo: false,
        })
    }
}

impl FeedbackChannel for LocalFeedback {
    fn next_source(&mut self) -> Result<Option<(u64, Vec<String>)>> {
        let i = self.next;
        if i >= self.sources.len() {
            return Ok(None);
        }
        self.next += 1;
        Ok(Some((i as u64, self.sources[i].clone())))
    }

    fn submit(&mut self, id: u64, translation: &[String]) -> Result<()> {
        let reference = self
            .references
            .get(id as usize)
            .filter(|_| (id as usize) < self.next)
            .ok_or_else(|| Error::Protocol(format!("unknown id {id}")))?;
        let r = sentence_reward(translation, reference)?;
        if self.lifo {
            self.queue.push_front((id, r));
        } else {
            self.queue.push_back((id, r));
        }
        Ok(())
    }

    fn next_reward(&mut self) -> Result<Option<(u64, f64)>> {
        Ok(self.queue.pop_front())
    }
}

/// A logged interaction in text form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleRecord {
    pub id: u64,
    pub source: String,
    pub hypothesis: String,
    pub reward: f64,
}

pub fn write_triples_csv<W: Write>(records: &[TripleRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_triples_csv<R: Read>(r: R) -> Result<Vec<TripleRecord>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|rec| rec.map_err(Error::from))
        .collect()
}

/// Id-level triples from text records, as the critic sees them.
pub fn encode_records(
    model: &TranslationModel,
    bpe: Option<&BpeModel>,
    records: &[TripleRecord],
) -> Result<Vec<RewardTriple>> {
    records
        .iter()
        .map(|r| {
            let (src, mut hyp) = model_ids(model, bpe, &r.source, &r.hypothesis);
            hyp.push(EOS);
            RewardTriple::new(src, hyp, r.reward)
        })
        .collect()
}

fn split_subwords(bpe: Option<&BpeModel>, words: &[String]) -> Vec<String> {
    match bpe {
        Some(b) => b.apply(words),
        None => words.to_vec(),
    }
}

fn model_ids(model: &TranslationModel, bpe: Option<&BpeModel>, source: &str, hyp: &str) -> (Vec<usize>, Vec<usize>) {
    let words = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    (
        model.src_vocab.encode(&split_subwords(bpe, &words(source))),
        model.tgt_vocab.encode(&split_subwords(bpe, &words(hyp))),
    )
}

/// Seed for the sample drawn for sentence `id`.
fn sample_seed(seed: u64, id: u64) -> u64 {
    seed ^ id.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Samples the given sentences (as words) and scores them against
/// references, producing critic pretraining data.
pub fn collect_triples(
    model: &TranslationModel,
    bpe: Option<&BpeModel>,
    pairs: &[(Vec<String>, Vec<String>)],
    tau: f64,
    seed: u64,
) -> Result<Vec<RewardTriple>> {
    let config = DecodeConfig::sample(tau, 0);
    pairs
        .iter()
        .enumerate()
        .map(|(i, (src, reference))| {
            let src_ids = model.src_vocab.encode(&split_subwords(bpe, src));
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, i as u64));
            let out = decode_with_rng(&model.params, &src_ids, &config, &mut rng)?;
            let words = to_words(model, bpe, out.content());
            RewardTriple::new(src_ids, out.tokens, sentence_reward(&words, reference)?)
        })
        .collect()
}

fn to_words(model: &TranslationModel, bpe: Option<&BpeModel>, ids: &[usize]) -> Vec<String> {
    let units = model.tgt_vocab.decode(ids);
    match bpe {
        Some(_) => restore_words(&units),
        None => units,
    }
}

/// State of an adapting system: actor, critic and their optimizers.
#[derive(Clone, Debug)]
pub struct BanditLearner {
    pub model: TranslationModel,
    pub critic: CriticParams,
    pub bpe: Option<BpeModel>,
    pub config: A2cConfig,
    actor_adam: AdamState,
    critic_adam: AdamState,
    pub updates: usize,
}

impl BanditLearner {
    pub fn new(
        model: TranslationModel,
        critic: CriticParams,
        bpe: Option<BpeModel>,
        config: A2cConfig,
    ) -> Result<Self> {
        config.validate()?;
        let actor_adam = AdamState::new(&model.params.store, config.actor_lr);
        let critic_adam = AdamState::new(&critic.store, config.critic_lr);
        Ok(Self {
            model,
            critic,
            bpe,
            config,
            actor_adam,
            critic_adam,
            updates: 0,
        })
    }

    /// Samples a translation for sentence `id` at the configured temperature.
    /// Returns source ids, sampled ids and the output words.
    pub fn sample(&self, id: u64, source: &[String], seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<String>)> {
        let src_ids = self.model.src_vocab.encode(&split_subwords(self.bpe.as_ref(), source));
        let config = DecodeConfig {
            max_len: self.config.max_len,
            ..DecodeConfig::sample(self.config.tau, 0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, id));
        let out = decode_with_rng(&self.model.params, &src_ids, &config, &mut rng)?;
        let words = to_words(&self.model, self.bpe.as_ref(), out.content());
        Ok((src_ids, out.tokens, words))
    }

    /// One averaged Adam step for each of actor and critic over `batch`,
    /// visited in id order.
    pub fn update(&mut self, batch: &[(u64, RewardTriple)]) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let scale = 1.0 / batch.len() as f64;
        let mut actor_g = self.model.params.store.zero_grads();
        let mut critic_g = self.critic.store.zero_grads();
        let mut sorted: Vec<&(u64, RewardTriple)> = batch.iter().collect();
        sorted.sort_by_key(|(id, _)| *id);
        for (_, t) in sorted {
            let values = critic_values(&self.critic, &t.source, &t.hypothesis)?;
            let g = a2c_gradient_with_values(
                &self.model.params,
                &t.source,
                &t.hypothesis,
                t.reward,
                &values,
                self.config.tau,
            )?;
            // ascent on reward is descent on its negation
            actor_g.add_scaled(&g, -scale);
            let (_, cg) = critic_gradient(&self.critic, t)?;
            critic_g.add_scaled(&cg, scale);
        }
        adam_step(&mut self.model.params.store, &actor_g, &mut self.actor_adam)?;
        adam_step(&mut self.critic.store, &critic_g, &mut self.critic_adam)?;
        self.updates += 1;
        Ok(())
    }
}

/// Outcome of one pass over a feedback stream.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BanditRun {
    /// Every rewarded interaction, in id order.
    pub log: Vec<TripleRecord>,
    pub updates: usize,
    pub protocol_errors: usize,
}

impl BanditRun {
    pub fn rewards(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.reward).collect()
    }
}

/// Runs the sample/submit/reward/update loop until the stream ends.
///
/// Sentences are taken in blocks of `batch_size`. Each block is sampled
/// under the same parameters, with a per-sentence seed derived from `seed`
/// and the sentence id, and the update waits until every reward of the
/// block has arrived. A trailing block shorter than `batch_size` is logged
/// but not used for an update.
pub fn run_bandit_loop<C: FeedbackChannel>(
    learner: &mut BanditLearner,
    channel: &mut C,
    seed: u64,
) -> Result<BanditRun> {
    let mut run = BanditRun::default();
    run_bandit_loop_into(learner, channel, seed, &mut run)?;
    Ok(run)
}

/// [`run_bandit_loop`] writing into `run` as it goes, so that the blocks
/// completed before a failure stay logged.
pub fn run_bandit_loop_into<C: FeedbackChannel>(
    learner: &mut BanditLearner,
    channel: &mut C,
    seed: u64,
    run: &mut BanditRun,
) -> Result<()> {
    let b = learner.config.batch_size;
    let limit = learner.config.rounds.unwrap_or(usize::MAX);
    let mut cache = RewardCache::new();
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0bde);
    let mut seen = 0usize;
    loop {
        let mut block = Vec::with_capacity(b);
        while block.len() < b && seen < limit {
            match channel.next_source()? {
                Some(s) => {
                    block.push(s);
                    seen += 1;
                }
                None => break,
            }
        }
        if block.is_empty() {
            break;
        }
        let mut texts = BTreeMap::new();
        let mut outgoing = Vec::with_capacity(block.len());
        for (id, words) in &block {
            let (src, hyp, out_words) = learner.sample(*id, words, seed)?;
            cache.submit(*id, src, hyp)?;
            texts.insert(*id, (words.join(" "), out_words.join(" ")));
            outgoing.push((*id, out_words));
        }
        match learner.config.submit_order {
            SubmitOrder::InOrder => {}
            SubmitOrder::Reversed => outgoing.reverse(),
            SubmitOrder::Shuffled => outgoing.shuffle(&mut order_rng),
        }
        for (id, words) in &outgoing {
            channel.submit(*id, words)?;
        }
        while cache.pending_len() > 0 {
            let Some((id, reward)) = channel.next_reward()? else {
                return Err(Error::Protocol(format!(
                    "channel closed with {} translations unrewarded",
                    cache.pending_len()
                )));
            };
            if let Err(e) = cache.resolve(id, reward) {
                warn!("{e}; reward skipped");
                run.protocol_errors += 1;
            }
        }
        let batch = if block.len() == b {
            cache
                .take_batch(b)
                .expect("every translation of the block was rewarded")
        } else {
            cache.drain_completed()
        };
        if block.len() == b {
            learner.update(&batch)?;
        }
        for (id, t) in &batch {
            let (source, hypothesis) = texts.remove(id).expect("id was sampled in this block");
            run.log.push(TripleRecord {
                id: *id,
                source,
                hypothesis,
                reward: t.reward,
            });
        }
        run.updates = learner.updates;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::{sequence_log_prob, ModelDims, Vocabulary};

    fn dims() -> ModelDims {
        ModelDims {
            src_vocab: 9,
            tgt_vocab: 9,
            embed: 4,
            hidden: 6,
            layers: 1,
        }
    }

    fn actor(seed: u64) -> NmtParams {
        NmtParams::init(dims(), 0.4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn critic(seed: u64) -> CriticParams {
        CriticParams::init(dims(), 0.4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn triple() -> RewardTriple {
        RewardTriple::new(vec![4, 5, 6], vec![7, 4, EOS], 0.6).unwrap()
    }

    #[test]
    fn zero_critic_predicts_zero() {
        let c = CriticParams::zeros(dims()).unwrap();
        assert_eq!(critic_values(&c, &[4, 5], &[6, 7, 8]).unwrap(), vec![0.0; 3]);
        assert!(critic_values(&c, &[4], &[]).is_err());
    }

    #[test]
    fn one_value_per_token() {
        let c = critic(1);
        for n in 1..6 {
            assert_eq!(critic_values(&c, &[4, 5], &vec![6; n]).unwrap().len(), n);
        }
    }

    #[test]
    fn closed_form_critic_gradient_matches_autodiff() {
        let c = critic(2);
        let (l1, g1) = critic_gradient(&c, &triple()).unwrap();
        let (l2, g2) = critic_loss_autodiff(&c, &triple()).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert!(g1.max_abs_diff(&g2) < 1e-9);
    }

    #[test]
    fn exact_critic_has_zero_loss_and_gradient() {
        let mut c = CriticParams::zeros(dims()).unwrap();
        c.store.get_mut(c.value_b).fill(0.6);
        let (loss, g) = critic_gradient(&c, &triple()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.is_zero());
        let before = c.store.clone();
        let mut adam = AdamState::new(&c.store, 1e-3);
        critic_update(&mut c, &triple(), &mut adam).unwrap();
        assert_eq!(c.store, before);
    }

    #[test]
    fn reinforce_is_reward_times_log_prob_gradient() {
        let p = actor(3);
        let t = triple();
        assert!(reinforce_gradient(&p, &t.source, &t.hypothesis, 0.0, 1.0)
            .unwrap()
            .is_zero());
        let g = reinforce_gradient(&p, &t.source, &t.hypothesis, 0.7, 1.0).unwrap();
        let mut tape = Tape::new();
        let lp = p
            .token_log_probs_on::<NoRng>(&mut tape, &t.source, &t.hypothesis, 1.0, None)
            .unwrap();
        let total = tape.add_all(&lp);
        assert!((tape.value(total).item() - sequence_log_prob(&p, &t.source, &t.hypothesis).unwrap()).abs() < 1e-12);
        let mut base = tape.backward(total).unwrap().to_dense(&p.store);
        base.scale(0.7);
        assert!(g.max_abs_diff(&base) < 1e-9);
    }

    #[test]
    fn a2c_reduces_to_reinforce_with_zero_critic() {
        let p = actor(4);
        let z = CriticParams::zeros(dims()).unwrap();
        let t = triple();
        let a = a2c_gradient(&p, &z, &t.source, &t.hypothesis, t.reward, 2.0 / 3.0).unwrap();
        let r = reinforce_gradient(&p, &t.source, &t.hypothesis, t.reward, 2.0 / 3.0).unwrap();
        assert!(a.max_abs_diff(&r) < 1e-9);
        let v = vec![t.reward; t.hypothesis.len()];
        assert!(
            a2c_gradient_with_values(&p, &t.source, &t.hypothesis, t.reward, &v, 1.0)
                .unwrap()
                .is_zero()
        );
    }

    #[test]
    fn cache_contract() {
        let mut c = RewardCache::new();
        c.submit(0, vec![4], vec![5, EOS]).unwrap();
        c.submit(1, vec![4], vec![6, EOS]).unwrap();
        assert!(c.submit(1, vec![4], vec![6]).is_err());
        assert!(matches!(c.resolve(7, 0.5), Err(Error::Protocol(_))));
        c.resolve(1, 0.2).unwrap();
        assert!(c.resolve(1, 0.3).unwrap_err().to_string().contains("duplicate id"));
        assert!(c.take_batch(2).is_none());
        assert!(c.resolve(0, 1.5).is_err());
        c.resolve(0, 0.5).unwrap();
        let batch = c.take_batch(2).unwrap();
        assert_eq!(batch.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(c.completed_len(), 0);
    }

    fn toy_model(seed: u64) -> TranslationModel {
        let words = ["a", "b", "c", "d", "e"];
        let v = Vocabulary::build([words.to_vec()], None);
        let d = ModelDims {
            src_vocab: v.len(),
            tgt_vocab: v.len(),
            embed: 4,
            hidden: 6,
            layers: 1,
        };
        TranslationModel {
            params: NmtParams::init(d, 0.3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap(),
            src_vocab: v.clone(),
            tgt_vocab: v,
        }
    }

    fn stream(n: usize) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
        let w = ["a", "b", "c", "d", "e"];
        let s: Vec<Vec<String>> = (0..n)
            .map(|i| vec![w[i % 5].to_string(), w[(i + 2) % 5].to_string()])
            .collect();
        (s.clone(), s)
    }

    fn learner(order: SubmitOrder, batch: usize) -> BanditLearner {
        let m = toy_model(5);
        let c = CriticParams::init(m.params.dims, 0.3, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let cfg = A2cConfig {
            batch_size: batch,
            actor_lr: 1e-2,
            critic_lr: 1e-2,
            max_len: Some(4),
            submit_order: order,
            ..A2cConfig::default()
        };
        BanditLearner::new(m, c, None, cfg).unwrap()
    }

    #[test]
    fn one_block_gives_one_update() {
        let mut l = learner(SubmitOrder::InOrder, 4);
        let (s, r) = stream(4);
        let run = run_bandit_loop(&mut l, &mut LocalFeedback::new(s, r).unwrap(), 1).unwrap();
        assert_eq!(run.updates, 1);
        assert_eq!(run.log.len(), 4);
    }

    #[test]
    fn partial_block_is_logged_without_update() {
        let mut l = learner(SubmitOrder::InOrder, 4);
        let before = l.model.params.store.clone();
        let (s, r) = stream(3);
        let run = run_bandit_loop(&mut l, &mut LocalFeedback::new(s, r).unwrap(), 1).unwrap();
        assert_eq!((run.updates, run.log.len()), (0, 3));
        assert_eq!(l.model.params.store, before);
    }

    #[test]
    fn delivery_order_does_not_change_result() {
        let (s, r) = stream(12);
        let mut a = learner(SubmitOrder::InOrder, 4);
        let ra = run_bandit_loop(&mut a, &mut LocalFeedback::new(s.clone(), r.clone()).unwrap(), 3).unwrap();
        let mut b = learner(SubmitOrder::Shuffled, 4);
        let mut ch = LocalFeedback::new(s, r).unwrap();
        ch.lifo = true;
        let rb = run_bandit_loop(&mut b, &mut ch, 3).unwrap();
        assert_eq!(a.model.params.store, b.model.params.store);
        assert_eq!(a.critic.store, b.critic.store);
        assert_eq!(ra.log, rb.log);
    }

    #[test]
    fn pretraining_is_deterministic_and_beats_zero() {
        let triples: Vec<RewardTriple> = (0..30)
            .map(|i| RewardTriple::new(vec![4 + i % 4], vec![5, EOS], 0.7).unwrap())
            .collect();
        let cfg = CriticPretrainConfig {
            epochs: 3,
            learning_rate: 1e-2,
            ..CriticPretrainConfig::default()
        };
        let (a, rep) = pretrain_critic(critic(7), &triples, &cfg, 11).unwrap();
        let (b, _) = pretrain_critic(critic(7), &triples, &cfg, 11).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(rep.heldout_size, 3);
        assert!(*rep.heldout_mse.last().unwrap() < rep.zero_mse);
    }

    #[test]
    fn triple_csv_round_trip() {
        let recs = vec![TripleRecord {
            id: 3,
            source: "a b".into(),
            hypothesis: "c, d".into(),
            reward: 0.25,
        }];
        let mut buf = Vec::new();
        write_triples_csv(&recs, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("id,source,hypothesis,reward\n"));
        assert_eq!(read_triples_csv(&buf[..]).unwrap(), recs);
    }
}
