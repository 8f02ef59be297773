use super::tape::stable_softmax;
use super::{NodeId, Tape};
use crate::error::{invalid, Result};

/// Probabilities `softmax(logits / tau)`.
pub fn softmax_temperature(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(invalid("softmax of empty logits"));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(stable_softmax(logits, tau))
}

/// Tape handles for one LSTM layer: `w` is `[4H, D + H]` acting on
/// `[x; h_prev]`, `b` is `[4H]`. Gate rows are ordered input, forget,
/// candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    pub w: NodeId,
    pub b: NodeId,
}

/// One LSTM step. Returns `(h, c)`.
pub fn lstm_cell(
    tape: &mut Tape,
    weights: LstmWeights,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let w = tape.value(weights.w);
    let hidden = tape.value(h_prev).len();
    let input = tape.value(x).len();
    if w.shape().len() != 2
        || w.rows() != 4 * hidden
        || w.cols() != input + hidden
        || tape.value(weights.b).len() != 4 * hidden
        || tape.value(c_prev).len() != hidden
    {
        return Err(invalid(format!(
            "lstm weights {:?} do not fit input {input} / hidden {hidden}",
            w.shape()
        )));
    }
    let xh = tape.concat(&[x, h_prev]);
    let pre = tape.matvec(weights.w, xh);
    let pre = tape.add(pre, weights.b);
    let i_pre = tape.slice(pre, 0, hidden);
    let f_pre = tape.slice(pre, hidden, hidden);
    let g_pre = tape.slice(pre, 2 * hidden, hidden);
    let o_pre = tape.slice(pre, 3 * hidden, hidden);
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let keep = tape.mul(f, c_prev);
    let write = tape.mul(i, g);
    let c = tape.add(keep, write);
    let ct = tape.tanh(c);
    let h = tape.mul(o, ct);
    Ok((h, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{Array, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_temperature(&[1.0, 1.0], 0.5).unwrap(), vec![0.5, 0.5]);
        let u = softmax_temperature(&[0.0; 7], 3.3).unwrap();
        assert!(u.iter().all(|p| (p - 1.0 / 7.0).abs() < 1e-15));
        let p = softmax_temperature(&[2.0, 0.0], 2.0 / 3.0).unwrap();
        let e3 = 3f64.exp();
        assert!((p[0] - e3 / (e3 + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e3 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax_temperature(&[], 1.0).is_err());
        assert!(softmax_temperature(&[1.0], 0.0).is_err());
        assert!(softmax_temperature(&[1.0], -1.0).is_err());
    }

    fn cell_store(d: usize, h: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.push("w", Array::uniform(&[4 * h, d + h], 0.5, &mut rng));
        s.push("b", Array::uniform(&[4 * h], 0.5, &mut rng));
        s.push("x", Array::uniform(&[d], 1.0, &mut rng));
        s.push("h", Array::uniform(&[h], 1.0, &mut rng));
        s.push("c", Array::uniform(&[h], 1.0, &mut rng));
        s
    }

    fn run(store: &ParamStore, tape: &mut Tape) -> (NodeId, NodeId) {
        let ids: Vec<_> = store.ids().collect();
        let w = LstmWeights {
            w: tape.param(store, ids[0]),
            b: tape.param(store, ids[1]),
        };
        let x = tape.param(store, ids[2]);
        let h = tape.param(store, ids[3]);
        let c = tape.param(store, ids[4]);
        lstm_cell(tape, w, x, h, c).unwrap()
    }

    #[test]
    fn zero_cell_stays_zero() {
        let mut store = cell_store(3, 3, 0);
        store.zero_all();
        let mut tape = Tape::new();
        let (h, c) = run(&store, &mut tape);
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_scalar_reimplementation() {
        let store = cell_store(3, 3, 11);
        let mut tape = Tape::new();
        let (h, c) = run(&store, &mut tape);
        let v = store.values();
        let (w, b, x, hp, cp) = (&v[0], &v[1], v[2].data(), v[3].data(), v[4].data());
        let xh: Vec<f64> = x.iter().chain(hp).copied().collect();
        let hid = 3;
        for j in 0..hid {
            let gate = |k: usize| {
                let r = k * hid + j;
                b.data()[r] + (0..6).map(|m| w.row(r)[m] * xh[m]).sum::<f64>()
            };
            let (i, f, g, o) = (sig(gate(0)), sig(gate(1)), gate(2).tanh(), sig(gate(3)));
            let cj = f * cp[j] + i * g;
            let hj = o * cj.tanh();
            assert!((tape.value(c).data()[j] - cj).abs() < 1e-14);
            assert!((tape.value(h).data()[j] - hj).abs() < 1e-14);
        }
    }

    #[test]
    fn saturated_gates_hold_cell_state() {
        let mut store = cell_store(3, 3, 12);
        let ids: Vec<_> = store.ids().collect();
        store.get_mut(ids[0]).fill(0.0);
        let b = store.get_mut(ids[1]).data_mut();
        for j in 0..3 {
            b[j] = -40.0;
            b[3 + j] = 40.0;
        }
        let mut tape = Tape::new();
        let (_, c) = run(&store, &mut tape);
        let before = store.get(ids[4]).data();
        for (a, b) in tape.value(c).data().iter().zip(before) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_invalid_argument() {
        let store = cell_store(3, 3, 13);
        let mut tape = Tape::new();
        let ids: Vec<_> = store.ids().collect();
        let w = LstmWeights {
            w: tape.param(&store, ids[0]),
            b: tape.param(&store, ids[1]),
        };
        let x = tape.constant(Array::zeros(&[4]));
        let h = tape.param(&store, ids[3]);
        let c = tape.param(&store, ids[4]);
        assert!(lstm_cell(&mut tape, w, x, h, c).is_err());
    }
}
