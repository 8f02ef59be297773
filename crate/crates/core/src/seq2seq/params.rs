use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grad::{Array, ParamId, ParamStore};

/// Sizes of an encoder-decoder network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed: usize,
    /// Decoder hidden size; each encoder direction uses half of it.
    pub hidden: usize,
    pub layers: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.src_vocab == 0 || self.tgt_vocab == 0 || self.embed == 0 || self.layers == 0 {
            return Err(invalid(format!("model dims must be positive: {self:?}")));
        }
        if self.src_vocab <= super::vocab::EOS || self.tgt_vocab <= super::vocab::BOS {
            return Err(invalid("vocabularies must cover the reserved ids"));
        }
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return Err(invalid(format!(
                "hidden size must be even and positive, got {}",
                self.hidden
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LstmIds {
    pub w: ParamId,
    pub b: ParamId,
}

/// Parameter ids of the shared encoder / attentional decoder trunk.
#[derive(Clone, Debug)]
pub(crate) struct TrunkLayout {
    pub src_emb: ParamId,
    pub tgt_emb: ParamId,
    pub enc: Vec<(LstmIds, LstmIds)>,
    pub dec: Vec<LstmIds>,
    pub attn_enc: ParamId,
    pub attn_dec: ParamId,
    pub attn_v: ParamId,
    pub combine: ParamId,
}

fn lstm<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, scale: f64, rng: &mut R) -> LstmIds {
    LstmIds {
        w: store.push(
            format!("{name}.w"),
            Array::uniform(&[4 * hidden, input + hidden], scale, rng),
        ),
        b: store.push(format!("{name}.b"), Array::uniform(&[4 * hidden], scale, rng)),
    }
}

impl TrunkLayout {
    fn build<R: Rng>(store: &mut ParamStore, d: &ModelDims, scale: f64, rng: &mut R) -> Self {
        let h = d.hidden;
        let src_emb = store.push("src_emb", Array::uniform(&[d.src_vocab, d.embed], scale, rng));
        let tgt_emb = store.push("tgt_emb", Array::uniform(&[d.tgt_vocab, d.embed], scale, rng));
        let enc = (0..d.layers)
            .map(|l| {
                let input = if l == 0 { d.embed } else { h };
                (
                    lstm(store, &format!("enc.{l}.fwd"), input, h / 2, scale, rng),
                    lstm(store, &format!("enc.{l}.bwd"), input, h / 2, scale, rng),
                )
            })
            .collect();
        let dec = (0..d.layers)
            .map(|l| {
                let input = if l == 0 { d.embed + h } else { h };
                lstm(store, &format!("dec.{l}"), input, h, scale, rng)
            })
            .collect();
        let attn_enc = store.push("attn.w_enc", Array::uniform(&[h, h], scale, rng));
        let attn_dec = store.push("attn.w_dec", Array::uniform(&[h, h], scale, rng));
        let attn_v = store.push("attn.v", Array::uniform(&[h], scale, rng));
        let combine = store.push("combine.w", Array::uniform(&[h, 2 * h], scale, rng));
        Self {
            src_emb,
            tgt_emb,
            enc,
            dec,
            attn_enc,
            attn_dec,
            attn_v,
            combine,
        }
    }

    fn locate(store: &ParamStore, d: &ModelDims) -> Result<Self> {
        let find = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .find(&name)
                .ok_or_else(|| invalid(format!("missing parameter {name}")))?;
            if store.get(id).shape() != shape {
                return Err(invalid(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
            Ok(id)
        };
        let h = d.hidden;
        let lstm_at = |name: String, input: usize, hidden: usize| -> Result<LstmIds> {
            Ok(LstmIds {
                w: find(format!("{name}.w"), &[4 * hidden, input + hidden])?,
                b: find(format!("{name}.b"), &[4 * hidden])?,
            })
        };
        let mut enc = Vec::new();
        let mut dec = Vec::new();
        for l in 0..d.layers {
            let input = if l == 0 { d.embed } else { h };
            enc.push((
                lstm_at(format!("enc.{l}.fwd"), input, h / 2)?,
                lstm_at(format!("enc.{l}.bwd"), input, h / 2)?,
            ));
            let input = if l == 0 { d.embed + h } else { h };
            dec.push(lstm_at(format!("dec.{l}"), input, h)?);
        }
        Ok(Self {
            src_emb: find("src_emb".into(), &[d.src_vocab, d.embed])?,
            tgt_emb: find("tgt_emb".into(), &[d.tgt_vocab, d.embed])?,
            enc,
            dec,
            attn_enc: find("attn.w_enc".into(), &[h, h])?,
            attn_dec: find("attn.w_dec".into(), &[h, h])?,
            attn_v: find("attn.v".into(), &[h])?,
            combine: find("combine.w".into(), &[h, 2 * h])?,
        })
    }
}

/// Weights of the translation policy.
#[derive(Clone, Debug)]
pub struct NmtParams {
    pub dims: ModelDims,
    pub store: ParamStore,
    pub(crate) trunk: TrunkLayout,
    pub(crate) out_proj: ParamId,
}

impl NmtParams {
    /// Uniform(-scale, scale) initialisation.
    pub fn init<R: Rng>(dims: ModelDims, scale: f64, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut store = ParamStore::new();
        let trunk = TrunkLayout::build(&mut store, &dims, scale, rng);
        let out_proj = store.push("out.w", Array::uniform(&[dims.tgt_vocab, dims.hidden], scale, rng));
        Ok(Self {
            dims,
            store,
            trunk,
            out_proj,
        })
    }

    pub fn from_store(dims: ModelDims, store: ParamStore) -> Result<Self> {
        dims.validate()?;
        let trunk = TrunkLayout::locate(&store, &dims)?;
        let out_proj = store
            .find("out.w")
            .filter(|&id| store.get(id).shape() == [dims.tgt_vocab, dims.hidden])
            .ok_or_else(|| invalid("missing or misshapen out.w"))?;
        if store.len() != 7 + 6 * dims.layers {
            return Err(invalid("unexpected extra parameters in translation checkpoint"));
        }
        Ok(Self {
            dims,
            store,
            trunk,
            out_proj,
        })
    }

    /// The output projection (`[Vt, H]`).
    pub fn output_projection(&self) -> ParamId {
        self.out_proj
    }
}

/// Weights of the value estimator: its own encoder-decoder plus a scalar
/// head on the attentional decoder output.
#[derive(Clone, Debug)]
pub struct CriticParams {
    pub dims: ModelDims,
    pub store: ParamStore,
    pub(crate) trunk: TrunkLayout,
    pub(crate) value_w: ParamId,
    pub(crate) value_b: ParamId,
}

impl CriticParams {
    pub fn init<R: Rng>(dims: ModelDims, scale: f64, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut store = ParamStore::new();
        let trunk = TrunkLayout::build(&mut store, &dims, scale, rng);
        let value_w = store.push("value.w", Array::uniform(&[dims.hidden], scale, rng));
        let value_b = store.push("value.b", Array::zeros(&[1]));
        Ok(Self {
            dims,
            store,
            trunk,
            value_w,
            value_b,
        })
    }

    pub fn zeros(dims: ModelDims) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut c = Self::init(dims, 1.0, &mut rng)?;
        c.store.zero_all();
        Ok(c)
    }

    pub fn from_store(dims: ModelDims, store: ParamStore) -> Result<Self> {
        dims.validate()?;
        let trunk = TrunkLayout::locate(&store, &dims)?;
        let value_w = store
            .find("value.w")
            .filter(|&id| store.get(id).shape() == [dims.hidden])
            .ok_or_else(|| invalid("missing or misshapen value.w"))?;
        let value_b = store
            .find("value.b")
            .filter(|&id| store.get(id).shape() == [1])
            .ok_or_else(|| invalid("missing or misshapen value.b"))?;
        Ok(Self {
            dims,
            store,
            trunk,
            value_w,
            value_b,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims {
            src_vocab: 7,
            tgt_vocab: 9,
            embed: 4,
            hidden: 6,
            layers: 2,
        }
    }

    #[test]
    fn layout_round_trips_through_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = NmtParams::init(dims(), 0.1, &mut rng).unwrap();
        let q = NmtParams::from_store(p.dims, p.store.clone()).unwrap();
        assert_eq!(q.out_proj, p.out_proj);
        assert_eq!(p.store.get(p.trunk.dec[0].w).shape(), &[24, 4 + 6 + 6]);
        assert_eq!(p.store.get(p.trunk.enc[1].0.w).shape(), &[12, 6 + 3]);
    }

    #[test]
    fn odd_hidden_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = ModelDims { hidden: 5, ..dims() };
        assert!(NmtParams::init(d, 0.1, &mut rng).is_err());
    }

    #[test]
    fn init_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = NmtParams::init(dims(), 0.1, &mut rng).unwrap();
        assert!(p.store.flatten().iter().all(|v| v.abs() <= 0.1));
    }

    #[test]
    fn critic_is_a_separate_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = CriticParams::init(dims(), 0.1, &mut rng).unwrap();
        assert!(c.store.find("out.w").is_none());
        assert!(CriticParams::from_store(c.dims, c.store.clone()).is_ok());
        let z = CriticParams::zeros(dims()).unwrap();
        assert!(z.store.flatten().iter().all(|&v| v == 0.0));
    }
}
