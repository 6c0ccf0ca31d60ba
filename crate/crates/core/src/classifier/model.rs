use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{softmax, Prediction, Scorer, ScorerError};
use crate::corpus::RegionScheme;
use crate::features::{vectorize, SparseVector, Vocabulary};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{path}: unsupported model format version {found} (expected {FORMAT_VERSION})")]
    Version { path: PathBuf, found: u64 },
    #[error("{path}: corrupt or truncated model file: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error("inconsistent model: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// A trained linear text classifier: `probs = softmax(W x + b)` over unigram counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    vocab: Vocabulary,
    /// Row-major `n_classes × vocab.len()`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    manifest: Vec<String>,
    scheme: Option<RegionScheme>,
    max_len: usize,
}

impl Model {
    pub fn new(
        vocab: Vocabulary,
        weights: Vec<f64>,
        bias: Vec<f64>,
        manifest: Vec<String>,
        scheme: Option<RegionScheme>,
        max_len: usize,
    ) -> Result<Self, ModelError> {
        let k = manifest.len();
        if k < 2 {
            return Err(ModelError::Invalid(format!("need at least 2 classes, got {k}")));
        }
        if bias.len() != k {
            return Err(ModelError::Invalid(format!("bias has {} entries for {k} classes", bias.len())));
        }
        if weights.len() != k * vocab.len() {
            return Err(ModelError::Invalid(format!(
                "weights have {} entries, expected {k}×{}",
                weights.len(),
                vocab.len()
            )));
        }
        if weights.iter().chain(&bias).any(|w| !w.is_finite()) {
            return Err(ModelError::Invalid("non-finite parameter".into()));
        }
        if max_len == 0 {
            return Err(ModelError::Invalid("max_len must be positive".into()));
        }
        Ok(Model { vocab, weights, bias, manifest, scheme, max_len })
    }

    /// All-zero parameters: every text scores uniformly.
    pub fn zeros(vocab: Vocabulary, manifest: Vec<String>, scheme: Option<RegionScheme>, max_len: usize) -> Self {
        let k = manifest.len();
        let v = vocab.len();
        Model::new(vocab, vec![0.0; k * v], vec![0.0; k], manifest, scheme, max_len).expect("zero model is valid")
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.len()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn weight(&self, class: usize, feature: usize) -> f64 {
        self.weights[class * self.vocab.len() + feature]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub(crate) fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn manifest(&self) -> &[String] {
        &self.manifest
    }

    pub fn scheme(&self) -> Option<&RegionScheme> {
        self.scheme.as_ref()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn vectorize(&self, text: &str) -> SparseVector {
        vectorize(text, &self.vocab, self.max_len)
    }

    pub fn logits(&self, x: &SparseVector) -> Vec<f64> {
        linear_logits(&self.weights, 1.0, &self.bias, self.vocab.len(), x)
    }

    pub fn probs_for_features(&self, x: &SparseVector) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn predict(&self, text: &str) -> Prediction {
        Prediction::from_probs(self.probs_for_features(&self.vectorize(text)))
    }
}

/// `b_k + scale * Σ_j w[k, j] x_j` for every class `k`.
pub(crate) fn linear_logits(weights: &[f64], scale: f64, bias: &[f64], n_features: usize, x: &SparseVector) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(k, b)| {
            let row = &weights[k * n_features..(k + 1) * n_features];
            let dot: f64 = x.pairs().iter().map(|&(j, c)| row[j] * c as f64).sum();
            b + scale * dot
        })
        .collect()
}

impl Scorer for Model {
    fn labels(&self) -> &[String] {
        &self.manifest
    }

    fn score_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ScorerError> {
        Ok(texts.iter().map(|t| self.probs_for_features(&self.vectorize(t))).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format_version: u32,
    scheme: Option<RegionScheme>,
    manifest: Vec<String>,
    max_len: usize,
    min_count: usize,
    vocab: Vec<String>,
    weights: Vec<String>,
    bias: Vec<String>,
}

// `Display` for f64 prints the shortest string that parses back to the same bits.
fn encode(values: &[f64]) -> Vec<String> {
    values.iter().map(|v| v.to_string()).collect()
}

fn decode(values: &[String]) -> Result<Vec<f64>, String> {
    values.iter().map(|s| s.parse::<f64>().map_err(|e| format!("bad number {s:?}: {e}"))).collect()
}

pub fn model_to_json(model: &Model) -> String {
    let env = Envelope {
        format_version: FORMAT_VERSION,
        scheme: model.scheme,
        manifest: model.manifest.clone(),
        max_len: model.max_len,
        min_count: model.vocab.min_count(),
        vocab: model.vocab.words().to_vec(),
        weights: encode(&model.weights),
        bias: encode(&model.bias),
    };
    let mut s = serde_json::to_string(&env).expect("model serializes");
    s.push('\n');
    s
}

pub fn save_model(model: &Model, path: &Path) -> Result<(), ModelError> {
    fs::write(path, model_to_json(model)).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
}

pub fn load_model(path: &Path) -> Result<Model, ModelError> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    let corrupt = |msg: String| ModelError::Corrupt { path: path.to_path_buf(), msg };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(found) => return Err(ModelError::Version { path: path.to_path_buf(), found }),
        None => return Err(corrupt("missing format_version".into())),
    }
    let env: Envelope = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    let vocab = Vocabulary::from_words(env.vocab, env.min_count).map_err(|e| corrupt(e.to_string()))?;
    let weights = decode(&env.weights).map_err(corrupt)?;
    let bias = decode(&env.bias).map_err(corrupt)?;
    Model::new(vocab, weights, bias, env.manifest, env.scheme, env.max_len).map_err(|e| corrupt(e.to_string()))
}
