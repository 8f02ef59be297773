//! Checkpoint files.
//!
//! ```text
//! banditmt-ckpt-1
//! meta <key> <single-line json>
//! tensor <name> <d0>x<d1>... f64
//! end
//! <row-major little-endian payloads, in tensor order>
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::decode::{decode, DecodeConfig};
use super::params::{CriticParams, ModelDims, NmtParams};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::grad::{Array, ParamStore};

pub const CHECKPOINT_TAG: &str = "banditmt-ckpt-1";

fn bad(message: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        message: message.into(),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, Value>,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn set_meta<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.meta.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| bad(format!("missing meta entry {key}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CHECKPOINT_TAG}")?;
        for (k, v) in &self.meta {
            writeln!(w, "meta {k} {}", serde_json::to_string(v)?)?;
        }
        for (name, a) in self.store.iter() {
            let dims: Vec<String> = a.shape().iter().map(|d| d.to_string()).collect();
            writeln!(w, "tensor {name} {} f64", dims.join("x"))?;
        }
        writeln!(w, "end")?;
        for (_, a) in self.store.iter() {
            for v in a.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != CHECKPOINT_TAG {
            return Err(bad(format!(
                "expected header {CHECKPOINT_TAG}, found {:?}",
                line.trim_end()
            )));
        }
        let mut meta = BTreeMap::new();
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("header ended before `end`"));
            }
            let l = line.trim_end_matches('\n');
            if l == "end" {
                break;
            }
            if let Some(rest) = l.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').ok_or_else(|| bad("meta line without value"))?;
                meta.insert(k.to_string(), serde_json::from_str(v)?);
            } else if let Some(rest) = l.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 || parts[2] != "f64" {
                    return Err(bad(format!("bad tensor line {l:?}")));
                }
                let shape = parts[1]
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad shape in {l:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                specs.push((parts[0].to_string(), shape));
            } else {
                return Err(bad(format!("unexpected header line {l:?}")));
            }
        }
        let mut store = ParamStore::new();
        let mut buf = [0u8; 8];
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)
                    .map_err(|_| bad(format!("truncated payload for {name}")))?;
                data.push(f64::from_le_bytes(buf));
            }
            store.push(name, Array::from_vec(shape, data)?);
        }
        if r.read(&mut buf)? != 0 {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self { meta, store })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(File::open(path)?)
    }
}

/// A translation model together with the vocabularies it was trained with.
#[derive(Clone, Debug)]
pub struct TranslationModel {
    pub params: NmtParams,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

impl TranslationModel {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint {
            meta: BTreeMap::new(),
            store: self.params.store.clone(),
        };
        c.set_meta("kind", &"nmt")?;
        c.set_meta("dims", &self.params.dims)?;
        c.set_meta("src_vocab", &self.src_vocab)?;
        c.set_meta("tgt_vocab", &self.tgt_vocab)?;
        Ok(c)
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        if c.meta::<String>("kind")? != "nmt" {
            return Err(bad("not a translation checkpoint"));
        }
        let dims: ModelDims = c.meta("dims")?;
        let src_vocab: Vocabulary = c.meta("src_vocab")?;
        let tgt_vocab: Vocabulary = c.meta("tgt_vocab")?;
        if src_vocab.len() != dims.src_vocab || tgt_vocab.len() != dims.tgt_vocab {
            return Err(bad("vocabulary sizes disagree with dims"));
        }
        Ok(Self {
            params: NmtParams::from_store(dims, c.store)?,
            src_vocab,
            tgt_vocab,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// Translates word tokens; unknown words map to `<unk>`.
    pub fn translate<S: AsRef<str>>(&self, source: &[S], config: &DecodeConfig) -> Result<Vec<String>> {
        let out = decode(&self.params, &self.src_vocab.encode(source), config)?;
        Ok(self.tgt_vocab.decode(out.content()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

pub fn save_critic(critic: &CriticParams, path: impl AsRef<Path>) -> Result<()> {
    let mut c = Checkpoint {
        meta: BTreeMap::new(),
        store: critic.store.clone(),
    };
    c.set_meta("kind", &"critic")?;
    c.set_meta("dims", &critic.dims)?;
    c.save(path)
}

pub fn load_critic(path: impl AsRef<Path>) -> Result<CriticParams> {
    let c = Checkpoint::load(path)?;
    if c.meta::<String>("kind")? != "critic" {
        return Err(bad("not a critic checkpoint"));
    }
    CriticParams::from_store(c.meta("dims")?, c.store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> TranslationModel {
        let src_vocab = Vocabulary::build([vec!["a", "b"]], None);
        let tgt_vocab = Vocabulary::build([vec!["x", "y", "z"]], None);
        let dims = ModelDims {
            src_vocab: src_vocab.len(),
            tgt_vocab: tgt_vocab.len(),
            embed: 3,
            hidden: 4,
            layers: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        TranslationModel {
            params: NmtParams::init(dims, 0.1, &mut rng).unwrap(),
            src_vocab,
            tgt_vocab,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let mut bytes = Vec::new();
        m.to_checkpoint().unwrap().write_to(&mut bytes).unwrap();
        assert!(bytes.starts_with(b"banditmt-ckpt-1\n"));
        let back = TranslationModel::from_checkpoint(Checkpoint::read_from(&bytes[..]).unwrap()).unwrap();
        assert_eq!(back.params.store, m.params.store);
        assert_eq!(back.tgt_vocab, m.tgt_vocab);
    }

    #[test]
    fn header_lists_tensors() {
        let m = model();
        let mut bytes = Vec::new();
        m.to_checkpoint().unwrap().write_to(&mut bytes).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains("tensor out.w 7x4 f64\n"));
        assert!(text.contains("tensor dec.0.w 16x11 f64\n"));
    }

    #[test]
    fn truncated_or_wrong_header_fails() {
        let m = model();
        let mut bytes = Vec::new();
        m.to_checkpoint().unwrap().write_to(&mut bytes).unwrap();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::read_from(&b"banditmt-ckpt-0\nend\n"[..]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(&extra[..]).is_err());
    }
}
