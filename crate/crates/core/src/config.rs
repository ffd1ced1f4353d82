//! Run configuration files (strict JSON).

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::corpus::{build_char_vocab, eos_padded_windows, gen_synthetic, pack_sequences, Corpus, GrammarSpec, Split, TokenId, Vocab};
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::softmask::{SmParams, Superposition, TdConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub max_len: usize,
    pub time_conditioned: bool,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_time_buckets")]
    pub time_buckets: usize,
    /// Initialization seed; defaults to the training seed.
    #[serde(default)]
    pub init_seed: Option<u64>,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_time_buckets() -> usize {
    32
}

impl ModelSpec {
    pub fn backbone(&self, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            layers: self.layers,
            heads: self.heads,
            model_dim: self.model_dim,
            vocab_size,
            max_len: self.max_len,
            time_conditioned: self.time_conditioned,
            mlp_ratio: self.mlp_ratio,
            time_buckets: self.time_buckets,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmSpec {
    #[serde(default = "default_lb")]
    pub entropy_lower_bound: f64,
    #[serde(default)]
    pub superposition: Option<Superposition>,
    #[serde(default = "default_p_sm")]
    pub p_sm: f64,
    #[serde(default)]
    pub td: TdConfig,
    /// Explicit raw values override the lower-bound initialization.
    #[serde(default)]
    pub raw_s: Option<f64>,
    #[serde(default)]
    pub raw_a: Option<f64>,
    #[serde(default)]
    pub raw_b: Option<f64>,
    #[serde(default)]
    pub raw_temp: Option<f64>,
}

fn default_lb() -> f64 {
    -1.5
}

fn default_p_sm() -> f64 {
    0.8
}

impl Default for SmSpec {
    fn default() -> Self {
        SmSpec {
            entropy_lower_bound: default_lb(),
            superposition: None,
            p_sm: default_p_sm(),
            td: TdConfig::default(),
            raw_s: None,
            raw_a: None,
            raw_b: None,
            raw_temp: None,
        }
    }
}

impl SmSpec {
    pub fn params(&self, vocab_size: usize) -> Result<SmParams> {
        let mut p = SmParams::init(self.entropy_lower_bound, vocab_size)?;
        if let Some(s) = self.superposition {
            p.superposition = s;
        }
        p.p_sm = self.p_sm;
        p.td = self.td;
        p.raw_s = self.raw_s.unwrap_or(p.raw_s);
        p.raw_a = self.raw_a.unwrap_or(p.raw_a);
        p.raw_b = self.raw_b.unwrap_or(p.raw_b);
        p.raw_temp = self.raw_temp.unwrap_or(p.raw_temp);
        p.validate(vocab_size)?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic language; mutually exclusive with `train_path`.
    #[serde(default)]
    pub grammar: Option<GrammarSpec>,
    #[serde(default)]
    pub n_train: usize,
    #[serde(default)]
    pub n_validation: usize,
    /// Text corpora, one document per line.
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub validation_path: Option<PathBuf>,
    pub seq_len: usize,
    #[serde(default = "default_pad")]
    pub eos_pad_max: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_pad() -> usize {
    8
}

/// Tokenized training and validation windows.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<Vec<TokenId>>,
    pub validation: Vec<Vec<TokenId>>,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.grammar, &self.train_path) {
            (Some(g), None) => {
                g.validate()?;
                if self.n_train == 0 || self.n_validation == 0 {
                    return Err(Error::config("grammar data needs n_train and n_validation >= 1"));
                }
                if g.max_len() > self.seq_len {
                    return Err(Error::config("grammar max_len exceeds seq_len"));
                }
            }
            (None, Some(_)) => {}
            _ => return Err(Error::config("data needs exactly one of `grammar` or `train_path`")),
        }
        if self.seq_len < 2 {
            return Err(Error::config("seq_len must be at least 2"));
        }
        Ok(())
    }

    /// Builds the windows; relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        self.validate()?;
        if let Some(spec) = &self.grammar {
            let vocab = spec.vocab()?;
            let eos = vocab.eos_id();
            let train = gen_synthetic(spec, self.n_train, self.seed)?;
            let val = gen_synthetic(spec, self.n_validation, self.seed.wrapping_add(1))?;
            let val = Corpus { split: Split::Validation, ..val };
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(2));
            let train = eos_padded_windows(&train, self.seq_len, eos, self.eos_pad_max, &mut rng)?;
            let validation = eos_padded_windows(&val, self.seq_len, eos, self.eos_pad_max, &mut rng)?;
            return Ok(Dataset { vocab, train, validation });
        }
        let train_path = base.join(self.train_path.as_ref().expect("validated"));
        let train_text = std::fs::read_to_string(&train_path)?;
        let val_text = match &self.validation_path {
            Some(p) => std::fs::read_to_string(base.join(p))?,
            None => String::new(),
        };
        let vocab = build_char_vocab(&format!("{train_text}{val_text}").replace('\n', ""))?;
        let eos = vocab.eos_id();
        let train = pack_sequences(&Corpus::from_lines(&train_text, &vocab, Split::Train)?, self.seq_len, eos)?;
        let validation = if val_text.trim().is_empty() {
            Vec::new()
        } else {
            pack_sequences(&Corpus::from_lines(&val_text, &vocab, Split::Validation)?, self.seq_len, eos)?
        };
        Ok(Dataset { vocab, train, validation })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub sm: SmSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub decode: Option<DecodeConfig>,
    pub output_dir: PathBuf,
    /// Write a checkpoint every this many steps (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()?;
        if self.data.seq_len > self.model.max_len {
            return Err(Error::config("data.seq_len exceeds model.max_len"));
        }
        if let Some(d) = &self.decode {
            d.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "model": {"layers": 1, "heads": 2, "model_dim": 8, "max_len": 16, "time_conditioned": false},
        "train": {"lr_backbone": 0.001, "batch_size": 2, "total_steps": 3, "seed": 1},
        "data": {"grammar": {"kind": "mod_arith", "modulus": 10, "ops": "+-", "max_len": 13},
                 "n_train": 20, "n_validation": 5, "seq_len": 16},
        "output_dir": "out"
    }"#;

    #[test]
    fn parses_and_loads() {
        let cfg = RunConfig::from_json(SAMPLE).unwrap();
        let ds = cfg.data.load(Path::new(".")).unwrap();
        assert_eq!(ds.vocab.size(), 15);
        assert_eq!(ds.train.len(), 20);
        assert!(ds.train.iter().all(|w| w.len() == 16));
        assert_eq!(cfg.sm.params(15).unwrap().effective().omega_b, -0.75);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = SAMPLE.replace("\"output_dir\"", "\"colour\": 1, \"output_dir\"");
        assert!(matches!(RunConfig::from_json(&bad), Err(Error::Config(_))));
        let bad = SAMPLE.replace("\"seed\": 1", "\"seed\": 1, \"lr\": 2");
        assert!(RunConfig::from_json(&bad).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let bad = SAMPLE.replace("\"batch_size\": 2", "\"batch_size\": 0");
        assert!(RunConfig::from_json(&bad).is_err());
        let bad = SAMPLE.replace("\"seq_len\": 16", "\"seq_len\": 32");
        assert!(RunConfig::from_json(&bad).is_err());
    }
}
