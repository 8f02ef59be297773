//! Forward computation of the bidirectional encoder and the input-feeding
//! attentional decoder, recorded on a [`Tape`].

use rand::Rng;

use super::params::{CriticParams, NmtParams, TrunkLayout};
use super::vocab::{BOS, EOS};
use crate::error::{invalid, Result};
use crate::grad::{lstm_cell, Array, LstmWeights, NodeId, ParamStore, Tape};

/// Inverted dropout applied while recording a training graph.
pub struct Dropout<'r, R: Rng> {
    pub rate: f64,
    pub rng: &'r mut R,
}

impl<R: Rng> Dropout<'_, R> {
    fn apply(&mut self, tape: &mut Tape, x: NodeId) -> NodeId {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let n = tape.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = tape.constant(Array::vector(mask));
        tape.mul(x, m)
    }
}

pub(crate) type NoRng = rand::rngs::mock::StepRng;

fn maybe_drop<R: Rng>(drop: &mut Option<&mut Dropout<'_, R>>, tape: &mut Tape, x: NodeId) -> NodeId {
    match drop {
        Some(d) => d.apply(tape, x),
        None => x,
    }
}

/// Encoder result as tape nodes.
#[derive(Clone, Debug)]
pub(crate) struct TapeEncoding {
    /// `[n, H]` top-layer annotations.
    pub states: NodeId,
    /// `[n, H]` attention keys, `W_enc h_i` per row.
    pub keys: NodeId,
    pub init: Vec<(NodeId, NodeId)>,
}

/// Decoder recurrent state as tape nodes.
#[derive(Clone, Debug)]
pub(crate) struct TapeState {
    pub layers: Vec<(NodeId, NodeId)>,
    pub feed: NodeId,
}

/// Borrowed view of one trunk plus its store.
#[derive(Clone, Copy)]
pub(crate) struct Trunk<'a> {
    pub store: &'a ParamStore,
    pub layout: &'a TrunkLayout,
    pub hidden: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl<'a> Trunk<'a> {
    pub fn of_nmt(p: &'a NmtParams) -> Self {
        Self {
            store: &p.store,
            layout: &p.trunk,
            hidden: p.dims.hidden,
            src_vocab: p.dims.src_vocab,
            tgt_vocab: p.dims.tgt_vocab,
        }
    }

    pub fn of_critic(p: &'a CriticParams) -> Self {
        Self {
            store: &p.store,
            layout: &p.trunk,
            hidden: p.dims.hidden,
            src_vocab: p.dims.src_vocab,
            tgt_vocab: p.dims.tgt_vocab,
        }
    }

    fn weights(&self, tape: &mut Tape, ids: super::params::LstmIds) -> LstmWeights {
        LstmWeights {
            w: tape.param(self.store, ids.w),
            b: tape.param(self.store, ids.b),
        }
    }

    /// Encodes `source` followed by EOS.
    pub fn encode<R: Rng>(
        &self,
        tape: &mut Tape,
        source: &[usize],
        mut drop: Option<&mut Dropout<'_, R>>,
    ) -> Result<TapeEncoding> {
        if source.is_empty() {
            return Err(invalid("cannot encode an empty source sentence"));
        }
        if let Some(&bad) = source.iter().find(|&&t| t >= self.src_vocab) {
            return Err(invalid(format!(
                "source id {bad} outside vocabulary of {}",
                self.src_vocab
            )));
        }
        let emb = tape.param(self.store, self.layout.src_emb);
        let mut inputs: Vec<NodeId> = source
            .iter()
            .chain(std::iter::once(&EOS))
            .map(|&t| tape.row(emb, t))
            .collect();
        let n = inputs.len();
        let half = self.hidden / 2;
        let mut init = Vec::with_capacity(self.layout.enc.len());
        for (l, &(fwd, bwd)) in self.layout.enc.iter().enumerate() {
            let fw = self.weights(tape, fwd);
            let bw = self.weights(tape, bwd);
            let zero = tape.constant(Array::zeros(&[half]));
            let (mut h, mut c) = (zero, zero);
            let mut fwd_h = Vec::with_capacity(n);
            let mut fwd_last = (zero, zero);
            for &x in &inputs {
                (h, c) = lstm_cell(tape, fw, x, h, c)?;
                fwd_h.push(h);
                fwd_last = (h, c);
            }
            let (mut h, mut c) = (zero, zero);
            let mut bwd_h = vec![zero; n];
            let mut bwd_first = (zero, zero);
            for t in (0..n).rev() {
                (h, c) = lstm_cell(tape, bw, inputs[t], h, c)?;
                bwd_h[t] = h;
                bwd_first = (h, c);
            }
            let h0 = tape.concat(&[fwd_last.0, bwd_first.0]);
            let c0 = tape.concat(&[fwd_last.1, bwd_first.1]);
            init.push((h0, c0));
            let last = l + 1 == self.layout.enc.len();
            inputs = (0..n)
                .map(|t| {
                    let o = tape.concat(&[fwd_h[t], bwd_h[t]]);
                    if last {
                        o
                    } else {
                        maybe_drop(&mut drop, tape, o)
                    }
                })
                .collect();
        }
        let states = tape.stack_rows(&inputs);
        let w_enc = tape.param(self.store, self.layout.attn_enc);
        let keys = tape.matmul_bt(states, w_enc);
        Ok(TapeEncoding { states, keys, init })
    }

    pub fn initial_state(&self, tape: &mut Tape, enc: &TapeEncoding) -> TapeState {
        let feed = tape.constant(Array::zeros(&[self.hidden]));
        TapeState {
            layers: enc.init.clone(),
            feed,
        }
    }

    /// Concat attention over `enc`; returns `(alpha, context)`.
    pub fn attend(&self, tape: &mut Tape, enc: &TapeEncoding, query: NodeId) -> (NodeId, NodeId) {
        let w_dec = tape.param(self.store, self.layout.attn_dec);
        let v = tape.param(self.store, self.layout.attn_v);
        let q = tape.matvec(w_dec, query);
        let pre = tape.add_row(enc.keys, q);
        let act = tape.tanh(pre);
        let scores = tape.matvec(act, v);
        let alpha = tape.softmax(scores);
        let ctx = tape.matvec_t(enc.states, alpha);
        (alpha, ctx)
    }

    /// One decoder step consuming `y_prev`; returns the new state, whose
    /// `feed` is the attentional output of this step.
    pub fn step<R: Rng>(
        &self,
        tape: &mut Tape,
        enc: &TapeEncoding,
        state: &TapeState,
        y_prev: usize,
        mut drop: Option<&mut Dropout<'_, R>>,
    ) -> Result<TapeState> {
        if y_prev >= self.tgt_vocab {
            return Err(invalid(format!(
                "target id {y_prev} outside vocabulary of {}",
                self.tgt_vocab
            )));
        }
        let emb = tape.param(self.store, self.layout.tgt_emb);
        let e = tape.row(emb, y_prev);
        let mut input = tape.concat(&[state.feed, e]);
        let mut layers = Vec::with_capacity(state.layers.len());
        for (l, (&ids, &(h, c))) in self.layout.dec.iter().zip(&state.layers).enumerate() {
            if l > 0 {
                input = maybe_drop(&mut drop, tape, input);
            }
            let w = self.weights(tape, ids);
            let (h, c) = lstm_cell(tape, w, input, h, c)?;
            layers.push((h, c));
            input = h;
        }
        let (_, ctx) = self.attend(tape, enc, input);
        let hc = tape.concat(&[input, ctx]);
        let combine = tape.param(self.store, self.layout.combine);
        let pre = tape.matvec(combine, hc);
        let feed = tape.tanh(pre);
        Ok(TapeState { layers, feed })
    }
}

impl NmtParams {
    pub(crate) fn trunk(&self) -> Trunk<'_> {
        Trunk::of_nmt(self)
    }

    /// Log-probabilities over the target vocabulary from an attentional
    /// output, at temperature `tau`.
    pub(crate) fn log_dist<R: Rng>(
        &self,
        tape: &mut Tape,
        feed: NodeId,
        tau: f64,
        drop: Option<&mut Dropout<'_, R>>,
    ) -> NodeId {
        let x = match drop {
            Some(d) => d.apply(tape, feed),
            None => feed,
        };
        let w = tape.param(&self.store, self.out_proj);
        let logits = tape.matvec(w, x);
        tape.log_softmax(logits, tau)
    }

    /// Teacher-forced per-token log-probability nodes of `target`.
    pub(crate) fn token_log_probs_on<R: Rng>(
        &self,
        tape: &mut Tape,
        source: &[usize],
        target: &[usize],
        tau: f64,
        mut drop: Option<&mut Dropout<'_, R>>,
    ) -> Result<Vec<NodeId>> {
        if target.is_empty() {
            return Err(invalid("empty target sequence"));
        }
        if let Some(&bad) = target.iter().find(|&&t| t >= self.dims.tgt_vocab) {
            return Err(invalid(format!("target id {bad} outside vocabulary")));
        }
        let trunk = self.trunk();
        let enc = trunk.encode(tape, source, drop.as_deref_mut())?;
        let mut state = trunk.initial_state(tape, &enc);
        let mut prev = BOS;
        let mut out = Vec::with_capacity(target.len());
        for &y in target {
            state = trunk.step(tape, &enc, &state, prev, drop.as_deref_mut())?;
            let logp = self.log_dist(tape, state.feed, tau, drop.as_deref_mut());
            out.push(tape.pick(logp, y));
            prev = y;
        }
        Ok(out)
    }
}

/// Encoder output as plain arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `[n, H]`, one row per source position including the appended EOS.
    pub states: Array,
    /// Per decoder layer `(h, c)`, each of length `H`.
    pub init: Vec<(Array, Array)>,
}

/// Decoder recurrent state as plain arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub layers: Vec<(Array, Array)>,
    /// Attentional output of the previous step (zeros before the first).
    pub feed: Array,
}

pub fn encode(params: &NmtParams, source: &[usize]) -> Result<EncoderOutput> {
    let mut tape = Tape::new();
    let enc = params.trunk().encode::<NoRng>(&mut tape, source, None)?;
    Ok(EncoderOutput {
        states: tape.value(enc.states).clone(),
        init: enc
            .init
            .iter()
            .map(|&(h, c)| (tape.value(h).clone(), tape.value(c).clone()))
            .collect(),
    })
}

impl EncoderOutput {
    pub fn initial_state(&self) -> DecoderState {
        let h = self.states.cols();
        DecoderState {
            layers: self.init.clone(),
            feed: Array::zeros(&[h]),
        }
    }
}

fn load_encoding(tape: &mut Tape, params: &NmtParams, enc: &EncoderOutput) -> Result<TapeEncoding> {
    let h = params.dims.hidden;
    if enc.states.shape().len() != 2 || enc.states.cols() != h {
        return Err(invalid("encoder states do not match hidden size"));
    }
    let states = tape.constant(enc.states.clone());
    let w_enc = tape.param(&params.store, params.trunk.attn_enc);
    let keys = tape.matmul_bt(states, w_enc);
    let init = enc
        .init
        .iter()
        .map(|(a, b)| (tape.constant(a.clone()), tape.constant(b.clone())))
        .collect();
    Ok(TapeEncoding { states, keys, init })
}

/// Concat attention of one decoder state over encoder states. Returns the
/// attention weights and the context vector.
pub fn attend(params: &NmtParams, states: &Array, query: &Array) -> Result<(Vec<f64>, Array)> {
    if states.shape().len() != 2 || states.rows() == 0 {
        return Err(invalid("attention over zero encoder states"));
    }
    if states.cols() != params.dims.hidden || query.len() != params.dims.hidden {
        return Err(invalid("attention inputs do not match hidden size"));
    }
    let mut tape = Tape::new();
    let enc = EncoderOutput {
        states: states.clone(),
        init: Vec::new(),
    };
    let te = load_encoding(&mut tape, params, &enc)?;
    let q = tape.constant(query.clone());
    let (alpha, ctx) = params.trunk().attend(&mut tape, &te, q);
    Ok((tape.value(alpha).data().to_vec(), tape.value(ctx).clone()))
}

/// One decoding step on plain arrays: the output distribution at `tau`, the
/// next state and the attentional output vector.
pub fn decode_step(
    params: &NmtParams,
    state: &DecoderState,
    y_prev: usize,
    enc: &EncoderOutput,
    tau: f64,
) -> Result<(Vec<f64>, DecoderState, Array)> {
    if !(tau > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    if state.layers.len() != params.dims.layers {
        return Err(invalid("decoder state has the wrong number of layers"));
    }
    let mut tape = Tape::new();
    let te = load_encoding(&mut tape, params, enc)?;
    let ts = TapeState {
        layers: state
            .layers
            .iter()
            .map(|(h, c)| (tape.constant(h.clone()), tape.constant(c.clone())))
            .collect(),
        feed: tape.constant(state.feed.clone()),
    };
    let next = params.trunk().step::<NoRng>(&mut tape, &te, &ts, y_prev, None)?;
    let logp = params.log_dist::<NoRng>(&mut tape, next.feed, tau, None);
    let dist = tape.value(logp).data().iter().map(|v| v.exp()).collect();
    let feed = tape.value(next.feed).clone();
    let new_state = DecoderState {
        layers: next
            .layers
            .iter()
            .map(|&(h, c)| (tape.value(h).clone(), tape.value(c).clone()))
            .collect(),
        feed: feed.clone(),
    };
    Ok((dist, new_state, feed))
}

/// Per-token log-probabilities of `target` given `source` under teacher
/// forcing, at temperature `tau`.
pub fn token_log_probs(params: &NmtParams, source: &[usize], target: &[usize], tau: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let nodes = params.token_log_probs_on::<NoRng>(&mut tape, source, target, tau, None)?;
    Ok(nodes.iter().map(|&n| tape.value(n).item()).collect())
}

/// `log P(target | source)` in nats at temperature 1.
pub fn sequence_log_prob(params: &NmtParams, source: &[usize], target: &[usize]) -> Result<f64> {
    Ok(token_log_probs(params, source, target, 1.0)?.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::ModelDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny(src: usize, tgt: usize, e: usize, h: usize, layers: usize, seed: u64) -> NmtParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = ModelDims {
            src_vocab: src,
            tgt_vocab: tgt,
            embed: e,
            hidden: h,
            layers,
        };
        NmtParams::init(dims, 0.5, &mut rng).unwrap()
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar LSTM step on slices, independent of the tape.
    fn lstm_ref(w: &Array, b: &Array, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hid = h.len();
        let xh: Vec<f64> = x.iter().chain(h).copied().collect();
        let gate = |r: usize| b.data()[r] + w.row(r).iter().zip(&xh).map(|(a, b)| a * b).sum::<f64>();
        let mut hn = vec![0.0; hid];
        let mut cn = vec![0.0; hid];
        for j in 0..hid {
            let i = sig(gate(j));
            let f = sig(gate(hid + j));
            let g = gate(2 * hid + j).tanh();
            let o = sig(gate(3 * hid + j));
            cn[j] = f * c[j] + i * g;
            hn[j] = o * cn[j].tanh();
        }
        (hn, cn)
    }

    fn p<'a>(params: &'a NmtParams, name: &str) -> &'a Array {
        params.store.get(params.store.find(name).unwrap())
    }

    #[test]
    fn encode_shape_contract() {
        let params = tiny(6, 6, 4, 8, 1, 1);
        let out = encode(&params, &[4]).unwrap();
        // one token plus EOS
        assert_eq!(out.states.shape(), &[2, 8]);
        assert_eq!(out.init.len(), 1);
        assert_eq!(out.init[0].0.len(), 8);
    }

    #[test]
    fn zero_params_encode_to_zeros() {
        let mut params = tiny(6, 6, 4, 8, 2, 1);
        params.store.zero_all();
        let out = encode(&params, &[4, 5]).unwrap();
        assert!(out.states.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_rejects_bad_input() {
        let params = tiny(6, 6, 4, 8, 1, 1);
        assert!(encode(&params, &[]).is_err());
        assert!(encode(&params, &[6]).is_err());
    }

    #[test]
    fn encode_matches_scalar_oracle() {
        let params = tiny(6, 6, 4, 4, 1, 7);
        let src = [4usize, 5, 1];
        let out = encode(&params, &src).unwrap();
        let emb = p(&params, "src_emb");
        let xs: Vec<&[f64]> = src.iter().chain([&EOS]).map(|&t| emb.row(t)).collect();
        let (fw, fb) = (p(&params, "enc.0.fwd.w"), p(&params, "enc.0.fwd.b"));
        let (bw, bb) = (p(&params, "enc.0.bwd.w"), p(&params, "enc.0.bwd.b"));
        let mut fwd = Vec::new();
        let (mut h, mut c) = (vec![0.0; 2], vec![0.0; 2]);
        for x in &xs {
            (h, c) = lstm_ref(fw, fb, x, &h, &c);
            fwd.push(h.clone());
        }
        let mut bwd = vec![Vec::new(); xs.len()];
        let (mut h, mut c) = (vec![0.0; 2], vec![0.0; 2]);
        for t in (0..xs.len()).rev() {
            (h, c) = lstm_ref(bw, bb, xs[t], &h, &c);
            bwd[t] = h.clone();
        }
        for t in 0..xs.len() {
            let expect: Vec<f64> = fwd[t].iter().chain(&bwd[t]).copied().collect();
            for (a, b) in out.states.row(t).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        let h0: Vec<f64> = fwd[xs.len() - 1].iter().chain(&bwd[0]).copied().collect();
        for (a, b) in out.init[0].0.data().iter().zip(&h0) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn attend_singleton_and_identical_rows() {
        let params = tiny(6, 6, 4, 4, 1, 2);
        let q = Array::vector(vec![0.3, -0.2, 0.9, 0.1]);
        let one = Array::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (alpha, ctx) = attend(&params, &one, &q).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(ctx.data(), one.data());
        let same = Array::matrix(3, 4, [0.5, -0.5, 0.25, 1.0].repeat(3)).unwrap();
        let (_, ctx) = attend(&params, &same, &q).unwrap();
        for (a, b) in ctx.data().iter().zip(same.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attend_matches_scalar_oracle() {
        let params = tiny(6, 6, 4, 4, 1, 3);
        let states = Array::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let q = Array::vector(vec![0.2, -0.4, 0.6, -0.1]);
        let (alpha, ctx) = attend(&params, &states, &q).unwrap();
        let (we, wd, v) = (p(&params, "attn.w_enc"), p(&params, "attn.w_dec"), p(&params, "attn.v"));
        let scores: Vec<f64> = (0..3)
            .map(|i| {
                (0..4)
                    .map(|a| {
                        let pre: f64 = (0..4)
                            .map(|k| we.row(a)[k] * states.row(i)[k] + wd.row(a)[k] * q.data()[k])
                            .sum();
                        v.data()[a] * pre.tanh()
                    })
                    .sum()
            })
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for i in 0..3 {
            assert!((alpha[i] - scores[i].exp() / z).abs() < 1e-14);
        }
        for k in 0..4 {
            let c: f64 = (0..3).map(|i| alpha[i] * states.row(i)[k]).sum();
            assert!((ctx.data()[k] - c).abs() < 1e-14);
        }
    }

    #[test]
    fn decode_step_distribution_and_temperature() {
        let params = tiny(6, 9, 4, 6, 2, 4);
        let enc = encode(&params, &[4, 5]).unwrap();
        let st = enc.initial_state();
        let (d1, _, _) = decode_step(&params, &st, BOS, &enc, 1.0).unwrap();
        let (d2, _, _) = decode_step(&params, &st, BOS, &enc, 2.0 / 3.0).unwrap();
        assert_eq!(d1.len(), 9);
        assert!((d1.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((d2.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let arg = |d: &[f64]| d.iter().enumerate().fold(0, |b, (i, v)| if *v > d[b] { i } else { b });
        assert_eq!(arg(&d1), arg(&d2));
        assert!(d2[arg(&d2)] > d1[arg(&d1)]);
        assert!(decode_step(&params, &st, 9, &enc, 1.0).is_err());
    }

    #[test]
    fn decode_step_matches_scalar_oracle() {
        let params = tiny(6, 7, 4, 4, 1, 5);
        let enc = encode(&params, &[4, 5, 4]).unwrap();
        let st = enc.initial_state();
        let y_prev = 5;
        let (dist, next, feed) = decode_step(&params, &st, y_prev, &enc, 1.0).unwrap();

        let e = p(&params, "tgt_emb").row(y_prev);
        let x: Vec<f64> = st.feed.data().iter().chain(e).copied().collect();
        let (h, c) = lstm_ref(
            p(&params, "dec.0.w"),
            p(&params, "dec.0.b"),
            &x,
            st.layers[0].0.data(),
            st.layers[0].1.data(),
        );
        let (alpha_ref, ctx) = attend(&params, &enc.states, &Array::vector(h.clone())).unwrap();
        assert_eq!(alpha_ref.len(), 4);
        let wo = p(&params, "combine.w");
        let hc: Vec<f64> = h.iter().chain(ctx.data()).copied().collect();
        let ht: Vec<f64> = (0..4)
            .map(|i| wo.row(i).iter().zip(&hc).map(|(a, b)| a * b).sum::<f64>().tanh())
            .collect();
        let ws = p(&params, "out.w");
        let logits: Vec<f64> = (0..7)
            .map(|v| ws.row(v).iter().zip(&ht).map(|(a, b)| a * b).sum())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for v in 0..7 {
            assert!((dist[v] - logits[v].exp() / z).abs() < 1e-13);
        }
        for k in 0..4 {
            assert!((feed.data()[k] - ht[k]).abs() < 1e-14);
            assert!((next.layers[0].1.data()[k] - c[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_output_gives_log_vocab() {
        let mut params = tiny(6, 8, 4, 6, 1, 6);
        let id = params.output_projection();
        params.store.get_mut(id).fill(0.0);
        let y = [4, 5, EOS];
        let lp = sequence_log_prob(&params, &[4, 4], &y).unwrap();
        assert!((lp + 3.0 * 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn appending_never_increases_log_prob() {
        let params = tiny(6, 8, 4, 6, 1, 8);
        let full = token_log_probs(&params, &[4, 5], &[4, 6, 7, EOS], 1.0).unwrap();
        assert!(full.iter().all(|&v| v < 0.0));
        let mut acc = 0.0;
        for v in full {
            let next = acc + v;
            assert!(next <= acc);
            acc = next;
        }
        assert!(sequence_log_prob(&params, &[4], &[]).is_err());
    }

    #[test]
    fn normalizes_over_truncated_sequence_space() {
        // every sequence that either ends at EOS or reaches max_len
        let params = tiny(6, 4, 3, 4, 1, 9);
        let src = [1usize, 2];
        let max_len = 3;
        let mut total = 0.0;
        let mut stack: Vec<Vec<usize>> = (0..4).map(|v| vec![v]).collect();
        while let Some(seq) = stack.pop() {
            let done = *seq.last().unwrap() == EOS || seq.len() == max_len;
            if done {
                total += sequence_log_prob(&params, &src, &seq).unwrap().exp();
            } else {
                for v in 0..4 {
                    let mut s = seq.clone();
                    s.push(v);
                    stack.push(s);
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "total {total}");
    }
}
