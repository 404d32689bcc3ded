//! Single-file checkpoints: a magic line, a little-endian `u64` manifest
//! length, a JSON manifest, then raw little-endian `f64` tensor buffers.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use autodiff::{AdamConfig, AdamState, ParamStore, Parameterized, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::corpus::vocab::hex;
use crate::corpus::{CharVocabulary, Vocabulary};
use crate::error::{Error, Result};
use crate::keyphrase::{NesConfig, NesModel, PtrNetConfig, PtrNetModel};
use crate::qgen::{QgenConfig, QgenModel, QgenVocabs};

pub const MAGIC: &[u8] = b"KEYQG-CHECKPOINT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Nes,
    Ptrnet,
    Qgen,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Nes => "nes",
            ModelKind::Ptrnet => "ptrnet",
            ModelKind::Qgen => "qgen",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nes" => Ok(ModelKind::Nes),
            "ptrnet" => Ok(ModelKind::Ptrnet),
            "qgen" => Ok(ModelKind::Qgen),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Nes(NesModel),
    PtrNet(PtrNetModel),
    Qgen(QgenModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Nes(_) => ModelKind::Nes,
            Model::PtrNet(_) => ModelKind::Ptrnet,
            Model::Qgen(_) => ModelKind::Qgen,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Nes(m) => m.params(),
            Model::PtrNet(m) => m.params(),
            Model::Qgen(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Nes(m) => m.params_mut(),
            Model::PtrNet(m) => m.params_mut(),
            Model::Qgen(m) => m.params_mut(),
        }
    }

    fn model_config(&self) -> serde_json::Value {
        let v = match self {
            Model::Nes(m) => serde_json::to_value(&m.config),
            Model::PtrNet(m) => serde_json::to_value(&m.config),
            Model::Qgen(m) => serde_json::to_value(&m.config),
        };
        v.expect("config serializes")
    }

    /// Named word vocabularies of the model.
    pub fn vocabularies(&self) -> Vec<(&'static str, &Vocabulary)> {
        match self {
            Model::Nes(m) => vec![("words", &m.vocab)],
            Model::PtrNet(m) => vec![("words", &m.vocab)],
            Model::Qgen(m) => vec![("input", &m.vocabs.input), ("decoder", &m.vocabs.decoder)],
        }
    }

    fn chars(&self) -> Option<&CharVocabulary> {
        match self {
            Model::Qgen(m) => Some(&m.vocabs.chars),
            _ => None,
        }
    }

    /// Content hashes of every vocabulary, keyed by name.
    pub fn vocab_hashes(&self) -> BTreeMap<String, String> {
        let mut h: BTreeMap<String, String> =
            self.vocabularies().into_iter().map(|(n, v)| (n.to_string(), v.content_hash())).collect();
        if let Some(c) = self.chars() {
            h.insert("chars".into(), c.content_hash());
        }
        h
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerEntry {
    step: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model_kind: ModelKind,
    train_config: TrainConfig,
    model_config: serde_json::Value,
    vocabularies: BTreeMap<String, Vec<String>>,
    chars: Option<String>,
    hashes: BTreeMap<String, String>,
    corpus_hash: String,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
    data_bytes: u64,
    data_sha256: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub train_config: TrainConfig,
    /// Hash of the training corpus the model was fitted on.
    pub corpus_hash: String,
    pub optimizer: Option<AdamState>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn new(model: Model, train_config: TrainConfig, corpus_hash: String) -> Self {
        Checkpoint {
            model,
            train_config,
            corpus_hash,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let ps = self.model.params();
        let mut tensors: Vec<(String, &Tensor)> = ps.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
        if let Some(opt) = &self.optimizer {
            for ((_, n, _), (m, v)) in ps.iter().zip(opt.first_moment.iter().zip(&opt.second_moment)) {
                tensors.push((format!("adam.m/{n}"), m));
                tensors.push((format!("adam.v/{n}"), v));
            }
        }
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(tensors.len());
        for (name, t) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
                offset: data.len() as u64,
            });
            for x in t.data() {
                data.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model_kind: self.model.kind(),
            train_config: self.train_config.clone(),
            model_config: self.model.model_config(),
            vocabularies: self
                .model
                .vocabularies()
                .into_iter()
                .map(|(n, v)| (n.to_string(), v.entries().to_vec()))
                .collect(),
            chars: self.model.chars().map(|c| c.chars().iter().collect()),
            hashes: self.model.vocab_hashes(),
            corpus_hash: self.corpus_hash.clone(),
            tensors: entries,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerEntry {
                step: o.step,
                learning_rate: o.config.learning_rate,
                beta1: o.config.beta1,
                beta2: o.config.beta2,
                epsilon: o.config.epsilon,
            }),
            data_bytes: data.len() as u64,
            data_sha256: hex(&Sha256::digest(&data)),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| format_err("missing checkpoint header"))?;
        if rest.len() < 8 {
            return Err(format_err("truncated before manifest length"));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < len {
            return Err(format_err(format!("truncated manifest: need {len} bytes, found {}", rest.len())));
        }
        let manifest: Manifest =
            serde_json::from_slice(&rest[..len]).map_err(|e| format_err(format!("bad manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(format_err(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let data = &rest[len..];
        if data.len() as u64 != manifest.data_bytes {
            return Err(format_err(format!(
                "tensor data is {} bytes, manifest declares {}",
                data.len(),
                manifest.data_bytes
            )));
        }
        if hex(&Sha256::digest(data)) != manifest.data_sha256 {
            return Err(format_err("tensor data checksum mismatch"));
        }
        let mut tensors: BTreeMap<&str, Tensor> = BTreeMap::new();
        for e in &manifest.tensors {
            let n = e.rows * e.cols;
            let start = e.offset as usize;
            let end = start + 8 * n;
            let raw = data
                .get(start..end)
                .ok_or_else(|| format_err(format!("tensor `{}` lies outside the data section", e.name)))?;
            let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.insert(&e.name, Tensor::from_vec(e.rows, e.cols, vals)?);
        }

        let vocab = |name: &str| -> Result<Vocabulary> {
            let tokens = manifest
                .vocabularies
                .get(name)
                .ok_or_else(|| format_err(format!("missing vocabulary `{name}`")))?;
            Ok(Vocabulary::from_tokens(tokens.iter().cloned()))
        };
        let config_err = |e: serde_json::Error| format_err(format!("bad model config: {e}"));
        let mut model = match manifest.model_kind {
            ModelKind::Nes => {
                let c: NesConfig = serde_json::from_value(manifest.model_config.clone()).map_err(config_err)?;
                Model::Nes(NesModel::new(c, vocab("words")?, None, 0))
            }
            ModelKind::Ptrnet => {
                let c: PtrNetConfig = serde_json::from_value(manifest.model_config.clone()).map_err(config_err)?;
                Model::PtrNet(PtrNetModel::new(c, vocab("words")?, None, 0))
            }
            ModelKind::Qgen => {
                let c: QgenConfig = serde_json::from_value(manifest.model_config.clone()).map_err(config_err)?;
                let chars = manifest.chars.as_deref().ok_or_else(|| format_err("missing character vocabulary"))?;
                let vocabs = QgenVocabs {
                    input: vocab("input")?,
                    chars: CharVocabulary::from_chars(chars.chars()),
                    decoder: vocab("decoder")?,
                };
                Model::Qgen(QgenModel::new(c, vocabs, None, 0))
            }
        };
        let rebuilt = model.vocab_hashes();
        if rebuilt != manifest.hashes {
            let bad: Vec<&String> = rebuilt
                .keys()
                .chain(manifest.hashes.keys())
                .filter(|k| rebuilt.get(*k) != manifest.hashes.get(*k))
                .collect();
            return Err(Error::Compatibility(format!("vocabulary hash mismatch for {bad:?}")));
        }

        let ps = model.params_mut();
        let ids: Vec<_> = ps.ids().collect();
        let mut moments = (Vec::new(), Vec::new());
        for id in ids {
            let name = ps.name(id).to_string();
            let shape = ps.get(id).shape();
            let take = |key: &str| -> Result<Tensor> {
                let t = tensors
                    .get(key)
                    .ok_or_else(|| format_err(format!("missing tensor `{key}`")))?;
                if t.shape() != shape {
                    return Err(format_err(format!(
                        "tensor `{key}` has shape {:?}, model expects {shape:?}",
                        t.shape()
                    )));
                }
                Ok(t.clone())
            };
            ps.set(id, take(&name)?)?;
            if manifest.optimizer.is_some() {
                moments.0.push(take(&format!("adam.m/{name}"))?);
                moments.1.push(take(&format!("adam.v/{name}"))?);
            }
        }
        let expected = ps.len() * if manifest.optimizer.is_some() { 3 } else { 1 };
        if tensors.len() != expected {
            let known: Vec<String> = ps.iter().map(|(_, n, _)| n.to_string()).collect();
            let extra = tensors
                .keys()
                .find(|k| !known.iter().any(|n| k.ends_with(n.as_str())))
                .map(|k| k.to_string())
                .unwrap_or_default();
            return Err(format_err(format!("unexpected tensor `{extra}` in checkpoint")));
        }
        let optimizer = manifest.optimizer.as_ref().map(|o| AdamState {
            config: AdamConfig {
                learning_rate: o.learning_rate,
                beta1: o.beta1,
                beta2: o.beta2,
                epsilon: o.epsilon,
            },
            step: o.step,
            first_moment: moments.0,
            second_moment: moments.1,
        });
        Ok(Checkpoint {
            model,
            train_config: manifest.train_config,
            corpus_hash: manifest.corpus_hash,
            optimizer,
        })
    }

    /// Writes to a sibling temporary file, then renames into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the named vocabulary has the given content hash.
    pub fn require_vocab(&self, name: &str, hash: &str) -> Result<()> {
        match self.model.vocab_hashes().get(name) {
            Some(h) if h == hash => Ok(()),
            Some(h) => Err(Error::Compatibility(format!(
                "vocabulary `{name}` hash {h} does not match expected {hash}"
            ))),
            None => Err(Error::Compatibility(format!("checkpoint has no vocabulary `{name}`"))),
        }
    }
}
