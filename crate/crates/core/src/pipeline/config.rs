//! Flat training configuration, read from a TOML document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyphrase::{EncoderConfig, NesConfig, PtrNetConfig};
use crate::qgen::QgenConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without dev improvement before training stops.
    pub patience: usize,
    pub learning_rate: f64,
    pub keyphrase_dropout: f64,
    pub qgen_dropout: f64,
    pub word_dim: usize,
    /// Key-phrase encoder size (both directions) and pointer decoder size.
    pub keyphrase_hidden: usize,
    pub nes_mlp_hidden: [usize; 2],
    pub k: usize,
    pub max_phrases: usize,
    /// Document encoder and decoder size of the question generator.
    pub qgen_hidden: usize,
    pub char_embedding_dim: usize,
    pub char_hidden: usize,
    pub input_vocab_size: usize,
    pub decoder_vocab_size: usize,
    pub max_decode_length: usize,
    /// Training data in SQuAD JSON form.
    pub data: Option<PathBuf>,
    /// Separate dev data; used instead of `dev_titles` when set.
    pub dev_data: Option<PathBuf>,
    /// Article titles held out of `data` as the dev split, one per line.
    pub dev_titles: Option<PathBuf>,
    /// Whitespace-separated text embeddings, `word v1 .. vD` per line.
    pub embeddings: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            batch_size: 32,
            epochs: 30,
            patience: 5,
            learning_rate: 1e-3,
            keyphrase_dropout: 0.5,
            qgen_dropout: 0.3,
            word_dim: 300,
            keyphrase_hidden: 256,
            nes_mlp_hidden: [256, 128],
            k: 6,
            max_phrases: 10,
            qgen_hidden: 384,
            char_embedding_dim: 32,
            char_hidden: 16,
            input_vocab_size: 50_000,
            decoder_vocab_size: 2000,
            max_decode_length: 30,
            data: None,
            dev_data: None,
            dev_titles: None,
            embeddings: None,
            output: PathBuf::from("out"),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("patience", self.patience),
            ("word_dim", self.word_dim),
            ("keyphrase_hidden", self.keyphrase_hidden),
            ("nes_mlp_hidden[0]", self.nes_mlp_hidden[0]),
            ("nes_mlp_hidden[1]", self.nes_mlp_hidden[1]),
            ("k", self.k),
            ("max_phrases", self.max_phrases),
            ("qgen_hidden", self.qgen_hidden),
            ("char_embedding_dim", self.char_embedding_dim),
            ("char_hidden", self.char_hidden),
            ("input_vocab_size", self.input_vocab_size),
            ("decoder_vocab_size", self.decoder_vocab_size),
            ("max_decode_length", self.max_decode_length),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("keyphrase_hidden", self.keyphrase_hidden), ("qgen_hidden", self.qgen_hidden)] {
            if v % 2 != 0 {
                return Err(Error::Config(format!("{name} must be even (split across two directions)")));
            }
        }
        for (name, r) in [("keyphrase_dropout", self.keyphrase_dropout), ("qgen_dropout", self.qgen_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {r}")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            word_dim: self.word_dim,
            hidden: self.keyphrase_hidden / 2,
            dropout: self.keyphrase_dropout,
        }
    }

    pub fn nes_config(&self) -> NesConfig {
        NesConfig {
            encoder: self.encoder_config(),
            mlp_hidden: self.nes_mlp_hidden,
            k: self.k,
        }
    }

    pub fn ptrnet_config(&self) -> PtrNetConfig {
        PtrNetConfig {
            encoder: self.encoder_config(),
            decoder_hidden: self.keyphrase_hidden,
            max_phrases: self.max_phrases,
        }
    }

    pub fn qgen_config(&self) -> QgenConfig {
        QgenConfig {
            word_dim: self.word_dim,
            char_embedding_dim: self.char_embedding_dim,
            char_hidden: self.char_hidden,
            encoder_hidden: self.qgen_hidden,
            aggregation_hidden: self.qgen_hidden / 2,
            decoder_hidden: self.qgen_hidden,
            attention_hidden: self.qgen_hidden,
            generator_hidden: self.qgen_hidden,
            dropout: self.qgen_dropout,
            max_decode_length: self.max_decode_length,
        }
    }
}
