//! `LCAP` checkpoint files.
//!
//! Layout, little-endian: magic `b"LCAP"`, `u32` version, 32-byte SHA-256 of
//! the config JSON, `u64` step, `u32`-prefixed config JSON, `u32`-prefixed
//! metadata JSON, `u32` tensor count, then per tensor a `u32`-prefixed UTF-8
//! name and an f64 LTEN record. A SHA-256 of everything before it closes the
//! file.
//!
//! Every tensor is stored once. The word embedding feeds the modulator, the
//! input layer and all head branches through a single parameter, so loading
//! it once re-links all three.

use std::collections::HashSet;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::concepts::AlignmentMLP;
use crate::error::{Error, Result};
use crate::lten::{self, DType, Reader};
use crate::model::{CaptionModel, ModelConfig};
use crate::tensor::ParamStore;

pub const MAGIC: &[u8; 4] = b"LCAP";
pub const VERSION: u32 = 1;
const DIGEST: usize = 32;

fn sha256(bytes: &[u8]) -> [u8; DIGEST] {
    Sha256::digest(bytes).into()
}

/// Digest of a config's canonical JSON.
pub fn config_digest<C: Serialize>(config: &C) -> Result<[u8; DIGEST]> {
    Ok(sha256(serde_json::to_string(config)?.as_bytes()))
}

/// Raw checkpoint contents.
#[derive(Clone, Debug)]
pub struct Archive {
    pub config_json: String,
    pub step: u64,
    pub metadata: serde_json::Value,
    pub params: ParamStore,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn get_str(r: &mut Reader, what: &str) -> Result<String> {
    let at = r.pos();
    let n = r.u32(what)? as usize;
    let b = r.take(n, what)?;
    String::from_utf8(b.to_vec()).map_err(|_| Error::format(at, format!("{what} is not UTF-8")))
}

impl Archive {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&sha256(self.config_json.as_bytes()));
        out.extend_from_slice(&self.step.to_le_bytes());
        put_bytes(&mut out, self.config_json.as_bytes());
        put_bytes(&mut out, serde_json::to_string(&self.metadata)?.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            put_bytes(&mut out, name.as_bytes());
            lten::encode(t, DType::F64, &mut out);
        }
        let sum = sha256(&out);
        out.extend_from_slice(&sum);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < DIGEST {
            return Err(Error::format(0, "file too short"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - DIGEST);
        if sha256(body) != sum {
            return Err(Error::format(
                body.len(),
                "checksum mismatch, file is corrupt",
            ));
        }
        let mut r = Reader::new(body);
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic, expected LCAP"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let digest = r.take(DIGEST, "config digest")?.to_vec();
        let step = r.u64("step")?;
        let config_json = get_str(&mut r, "config")?;
        if sha256(config_json.as_bytes())[..] != digest[..] {
            return Err(Error::format(
                8,
                "config digest does not match stored config",
            ));
        }
        let at = r.pos();
        let metadata = serde_json::from_str(&get_str(&mut r, "metadata")?)
            .map_err(|e| Error::format(at, format!("metadata: {e}")))?;
        let n = r.u32("tensor count")? as usize;
        let mut params = ParamStore::new();
        let mut seen = HashSet::new();
        for _ in 0..n {
            let at = r.pos();
            let name = get_str(&mut r, "tensor name")?;
            if !seen.insert(name.clone()) {
                return Err(Error::format(at, format!("duplicate tensor {name}")));
            }
            params.insert(name, r.tensor()?)?;
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.pos(), "trailing bytes before checksum"));
        }
        Ok(Self {
            config_json,
            step,
            metadata,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_str(&self.config_json)
            .map_err(|e| Error::Config(format!("stored config: {e}")))
    }
}

/// A caption model with its training step and free-form metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: CaptionModel,
    pub step: u64,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: CaptionModel, step: u64) -> Self {
        Self {
            model,
            step,
            metadata: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Archive {
            config_json: serde_json::to_string(&self.model.config)?,
            step: self.step,
            metadata: self.metadata.clone(),
            params: self.model.params.clone(),
        }
        .to_bytes()
    }

    /// Refuses a file whose config differs from `expected` unless
    /// `allow_mismatch` is set.
    pub fn from_bytes(
        bytes: &[u8],
        expected: Option<&ModelConfig>,
        allow_mismatch: bool,
    ) -> Result<Self> {
        let a = Archive::from_bytes(bytes)?;
        let config: ModelConfig = a.config()?;
        if let Some(want) = expected {
            if config_digest(want)? != config_digest(&config)? && !allow_mismatch {
                return Err(Error::Config(format!(
                    "checkpoint config differs from the requested one (stored {}, requested {}); pass the override flag to load anyway",
                    serde_json::to_string(&config)?,
                    serde_json::to_string(want)?
                )));
            }
        }
        Ok(Self {
            model: CaptionModel::from_params(config, a.params)?,
            step: a.step,
            metadata: a.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>, allow_mismatch: bool) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected, allow_mismatch).map_err(|e| match e {
            Error::Format { offset, detail } => Error::Format {
                offset,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })
    }
}

pub fn save_alignment(mlp: &AlignmentMLP, path: &Path) -> Result<()> {
    Archive {
        config_json: serde_json::json!({"kind": "alignment"}).to_string(),
        step: 0,
        metadata: serde_json::Value::Null,
        params: mlp.params().clone(),
    }
    .save(path)
}

pub fn load_alignment(path: &Path) -> Result<AlignmentMLP> {
    AlignmentMLP::from_params(Archive::load(path)?.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::predict;
    use crate::modulator::gate_from_concepts;

    /// Final hidden state of a caption row holding `tok`, no concepts.
    fn input_row(m: &CaptionModel, tok: u32) -> Vec<f64> {
        use crate::fusion::{forward, visual_tokens, Layout};
        use crate::tensor::{Binder, Graph, Tensor};
        let mut g = Graph::new();
        let mut b = Binder::frozen(&m.params);
        let v = visual_tokens(
            m,
            &mut g,
            &mut b,
            &Tensor::zeros([1, m.config.grid_channels]),
            &[],
        )
        .unwrap();
        let layout = Layout::seq2seq(1, &[], &[tok]);
        let out = forward(m, &mut g, &mut b, v, &layout).unwrap().output();
        g.value(out).row(1).to_vec()
    }

    fn model() -> CaptionModel {
        CaptionModel::new(ModelConfig::desk(40), 3).unwrap()
    }

    fn same(a: &CaptionModel, b: &CaptionModel) -> bool {
        a.params.len() == b.params.len()
            && a.params
                .iter()
                .zip(b.params.iter())
                .all(|((_, na, ta), (_, nb, tb))| {
                    na == nb
                        && ta.shape() == tb.shape()
                        && ta
                            .data()
                            .iter()
                            .zip(tb.data())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let mut ck = Checkpoint::new(model(), 17);
        ck.metadata = serde_json::json!({"stage": "finetune"});
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Some(&ck.model.config), false).unwrap();
        assert!(same(&ck.model, &back.model));
        assert_eq!(back.step, 17);
        assert_eq!(back.metadata, ck.metadata);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn any_flipped_byte_is_rejected() {
        let bytes = Checkpoint::new(model(), 0).to_bytes().unwrap();
        for at in [
            0,
            5,
            12,
            60,
            bytes.len() / 2,
            bytes.len() - 40,
            bytes.len() - 1,
        ] {
            let mut bad = bytes.clone();
            bad[at] ^= 0x01;
            assert!(
                Checkpoint::from_bytes(&bad, None, false).is_err(),
                "byte {at}"
            );
        }
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], None, false).is_err());
    }

    #[test]
    fn config_mismatch_needs_override() {
        let bytes = Checkpoint::new(model(), 0).to_bytes().unwrap();
        let other = ModelConfig {
            layers: 3,
            ..ModelConfig::desk(40)
        };
        let err = Checkpoint::from_bytes(&bytes, Some(&other), false).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let loaded = Checkpoint::from_bytes(&bytes, Some(&other), true).unwrap();
        assert_eq!(loaded.model.config.layers, 2);
    }

    #[test]
    fn word_embedding_is_stored_once_and_shared_after_load() {
        let ck = Checkpoint::new(model(), 0);
        let bytes = ck.to_bytes().unwrap();
        let count = bytes.windows(10).filter(|w| w == b"embed.word").count();
        assert_eq!(count, 1);

        let mut m = Checkpoint::from_bytes(&bytes, None, false).unwrap().model;
        let hidden = vec![0.3; m.config.hidden];
        let before = (
            gate_from_concepts(&m, &[5]).unwrap(),
            predict(&m, &hidden).unwrap(),
        );
        let row_before = input_row(&m, 5);
        // One write to the word embedding row of token 5.
        let d = m.config.hidden;
        let id = m.ids.word;
        m.params.get_mut(id).data_mut()[5 * d..6 * d]
            .iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x += 0.1 * i as f64);
        let after = (
            gate_from_concepts(&m, &[5]).unwrap(),
            predict(&m, &hidden).unwrap(),
        );
        assert_ne!(before.0.values(), after.0.values(), "modulator");
        assert_ne!(before.1[5], after.1[5], "output head");
        assert_ne!(row_before, input_row(&m, 5), "input embedding");
    }

    #[test]
    fn alignment_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("align.lcap");
        let mlp = AlignmentMLP::new(6, 4, 3, 1).unwrap();
        save_alignment(&mlp, &p).unwrap();
        let back = load_alignment(&p).unwrap();
        assert_eq!(
            back.params().by_name("align.w2"),
            mlp.params().by_name("align.w2")
        );
    }
}
