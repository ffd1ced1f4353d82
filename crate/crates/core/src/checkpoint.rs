//! Binary checkpoint format.
//!
//! ```text
//! magic     8 bytes  "SMCKPT\0\0"
//! version   u32
//! config    u64 length + JSON
//! arrays    u32 count, then per array:
//!             u32 name length + UTF-8 name
//!             u32 ndim + u64 dims
//!             f32 data
//! meta      u64 length + JSON (step, soft-mask moments, RNG state)
//! sha256    32 bytes over everything above
//! ```
//!
//! All integers and floats are little-endian.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, Model};
use crate::config::RunConfig;
use crate::corpus::{GrammarSpec, Vocab};
use crate::error::{Error, Result};
use crate::softmask::SmParams;
use crate::training::{Adam, AdamHyper, Trainer};

pub const MAGIC: &[u8; 8] = b"SMCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub backbone: BackboneConfig,
    pub sm: SmParams,
    pub vocab: Vocab,
    #[serde(default)]
    pub grammar: Option<GrammarSpec>,
    #[serde(default)]
    pub run: Option<RunConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    step: u64,
    #[serde(default)]
    optimizer: Option<OptMeta>,
    #[serde(default)]
    rng: Option<ChaCha8Rng>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptMeta {
    step: u64,
    hyper: AdamHyper,
    m_sm: [f64; 4],
    v_sm: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub params: Vec<f32>,
    pub step: u64,
    pub optimizer: Option<Adam<f32>>,
    pub rng: Option<ChaCha8Rng>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, sm: &SmParams, vocab: Vocab) -> Self {
        Checkpoint {
            config: CheckpointConfig { backbone: model.config.clone(), sm: sm.clone(), vocab, grammar: None, run: None },
            params: model.params.clone(),
            step: 0,
            optimizer: None,
            rng: None,
        }
    }

    pub fn from_trainer(tr: &Trainer<f32>, vocab: Vocab, grammar: Option<GrammarSpec>, run: Option<RunConfig>) -> Self {
        Checkpoint {
            config: CheckpointConfig { backbone: tr.model.config.clone(), sm: tr.sm.clone(), vocab, grammar, run },
            params: tr.model.params.clone(),
            step: tr.step,
            optimizer: Some(tr.opt.clone()),
            rng: Some(tr.rng.clone()),
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        let mut model = Model::<f32>::new(self.config.backbone.clone(), 0)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Checkpoint("parameter count does not match config".into()));
        }
        model.params.copy_from_slice(&self.params);
        Ok(model)
    }

    /// Serialized bytes including the trailing checksum.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = self.model()?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config)?;
        buf.extend_from_slice(&(config.len() as u64).to_le_bytes());
        buf.extend_from_slice(&config);

        let mut arrays: Vec<(String, &[usize], &[f32])> = Vec::new();
        for spec in &model.layout.specs {
            arrays.push((spec.name.clone(), &spec.shape, &self.params[spec.range()]));
        }
        if let Some(opt) = &self.optimizer {
            for spec in &model.layout.specs {
                arrays.push((format!("adam.m.{}", spec.name), &spec.shape, &opt.m_bb[spec.range()]));
                arrays.push((format!("adam.v.{}", spec.name), &spec.shape, &opt.v_bb[spec.range()]));
            }
        }
        buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, shape, data) in arrays {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }

        let meta = Meta {
            step: self.step,
            optimizer: self
                .optimizer
                .as_ref()
                .map(|o| OptMeta { step: o.step, hyper: o.hyper, m_sm: o.m_sm, v_sm: o.v_sm }),
            rng: self.rng.clone(),
        };
        let meta = serde_json::to_vec(&meta)?;
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (payload, stored) = bytes.split_at(bytes.len() - 32);
        let computed = Sha256::digest(payload);
        if computed.as_slice() != stored {
            return Err(Error::Checksum { stored: hex(stored), computed: hex(&computed) });
        }
        let mut r = Reader { buf: payload, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u64()? as usize;
        let config: CheckpointConfig = serde_json::from_slice(r.take(n)?)?;
        config.backbone.validate()?;
        let layout = crate::backbone::ParamLayout::new(&config.backbone);

        let mut params = vec![0f32; layout.total];
        let mut m_bb = vec![0f32; layout.total];
        let mut v_bb = vec![0f32; layout.total];
        let mut seen_params = 0usize;
        let mut seen_moments = 0usize;
        let count = r.u32()?;
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let (target, base) = if let Some(rest) = name.strip_prefix("adam.m.") {
                seen_moments += 1;
                (&mut m_bb, rest)
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                seen_moments += 1;
                (&mut v_bb, rest)
            } else {
                seen_params += 1;
                (&mut params, name.as_str())
            };
            let idx = layout.index_of(base).ok_or_else(|| Error::Checkpoint(format!("unknown array {name}")))?;
            let spec = &layout.specs[idx];
            if spec.shape != shape {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}: {shape:?} vs {:?}", spec.shape)));
            }
            let raw = r.take(spec.len() * 4)?;
            for (dst, chunk) in target[spec.range()].iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        if seen_params != layout.specs.len() {
            return Err(Error::Checkpoint("missing parameter arrays".into()));
        }
        let n = r.u64()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(n)?)?;
        if r.pos != payload.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let optimizer = match meta.optimizer {
            Some(o) if seen_moments == 2 * layout.specs.len() => {
                Some(Adam { hyper: o.hyper, step: o.step, m_bb, v_bb, m_sm: o.m_sm, v_sm: o.v_sm })
            }
            None if seen_moments == 0 => None,
            _ => return Err(Error::Checkpoint("incomplete optimizer state".into())),
        };
        Ok(Checkpoint { config, params, step: meta.step, optimizer, rng: meta.rng })
    }

    /// Writes the checkpoint and returns its SHA-256 checksum as hex.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(hex(&bytes[bytes.len() - 32..]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Stored checksum of a checkpoint file, as hex.
pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    Ok(hex(&bytes[bytes.len() - 32..]))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Model<f32>, Vocab) {
        let vocab = Vocab::from_alphabet(&['a', 'b', 'c']).unwrap();
        let cfg = BackboneConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            vocab_size: vocab.size(),
            max_len: 6,
            time_conditioned: true,
            mlp_ratio: 2,
            time_buckets: 4,
        };
        (Model::new(cfg, 3).unwrap(), vocab)
    }

    #[test]
    fn roundtrip_is_exact() {
        let (model, vocab) = tiny();
        let ck = Checkpoint::from_model(&model, &SmParams::init(-1.5, vocab.size()).unwrap(), vocab);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn tampering_is_detected() {
        let (model, vocab) = tiny();
        let ck = Checkpoint::from_model(&model, &SmParams::init(-1.5, vocab.size()).unwrap(), vocab);
        let mut bytes = ck.to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checksum { .. })));
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    }
}
