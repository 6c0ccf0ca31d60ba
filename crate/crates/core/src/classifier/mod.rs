//! The scorer role: a native multinomial logistic-regression model and an
//! adapter for external scorers speaking the line-delimited JSON protocol.

mod external;
mod model;
mod train;

pub use external::{connect, serve, Endpoint, ExternalOptions, ExternalScorer, Message};
pub use model::{load_model, model_to_json, save_model, Model, ModelError, FORMAT_VERSION};
pub use train::{
    batch_gradient, objective, train, EpochStats, Gradient, Hyperparams, TrainError, TrainReport,
};

use thiserror::Error;

/// Tolerance on the sum of a scorer's probability vector.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("protocol violation at index {index}{}: {msg}", request_suffix(*.request_id))]
    Protocol { request_id: Option<u64>, index: usize, msg: String },
    #[error("handshake rejected: toolkit expects {expected:?}, peer advertises {got:?}")]
    Handshake { expected: Vec<String>, got: Vec<String> },
    #[error("timed out waiting for response{}", request_suffix(*.request_id))]
    Timeout { request_id: Option<u64> },
    #[error("peer error{}: {msg}", request_suffix(*.request_id))]
    Peer { request_id: Option<u64>, msg: String },
    #[error("scorer connection: {0}")]
    Io(#[from] std::io::Error),
}

fn request_suffix(id: Option<u64>) -> String {
    id.map(|id| format!(" (request {id})")).unwrap_or_default()
}

/// Anything that maps texts to probability vectors over a fixed label manifest.
///
/// Implementations must be deterministic: equal inputs give equal outputs.
pub trait Scorer: Send + Sync {
    fn labels(&self) -> &[String];

    /// Raw scoring; callers should go through [`score_batch`], which validates the output.
    fn score_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ScorerError>;
}

/// Scores `texts` and checks the result against the scorer contract.
pub fn score_batch(scorer: &dyn Scorer, texts: &[&str]) -> Result<Vec<Vec<f64>>, ScorerError> {
    if texts.is_empty() {
        return Err(ScorerError::EmptyBatch);
    }
    let out = scorer.score_texts(texts)?;
    validate_probs(&out, texts.len(), scorer.labels().len(), None, 0)?;
    Ok(out)
}

/// Checks count, width and normalization of a batch of probability vectors.
///
/// `offset` is added to reported indices when `probs` is a chunk of a larger batch.
pub(crate) fn validate_probs(
    probs: &[Vec<f64>],
    expected: usize,
    n_labels: usize,
    request_id: Option<u64>,
    offset: usize,
) -> Result<(), ScorerError> {
    let err = |index: usize, msg: String| ScorerError::Protocol { request_id, index: offset + index, msg };
    for (i, p) in probs.iter().enumerate().take(expected) {
        if p.len() != n_labels {
            return Err(err(i, format!("vector has {} entries, manifest has {n_labels}", p.len())));
        }
        if p.iter().any(|x| !x.is_finite() || *x < 0.0 || *x > 1.0) {
            return Err(err(i, "probability outside [0, 1]".into()));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(err(i, format!("probabilities sum to {sum}")));
        }
    }
    if probs.len() != expected {
        let index = probs.len().min(expected);
        return Err(err(index, format!("expected {expected} vectors, got {}", probs.len())));
    }
    Ok(())
}

/// Full class distribution with its argmax and that class's probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub score: f64,
}

impl Prediction {
    /// Argmax ties go to the lowest class index.
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let predicted = argmax(&probs);
        let score = probs[predicted];
        Prediction { probs, predicted, score }
    }
}

/// Index of the first maximal element.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log(sum(exp(logits)))` without overflow.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Scores one text through any scorer.
pub fn predict_with(scorer: &dyn Scorer, text: &str) -> Result<Prediction, ScorerError> {
    let mut probs = score_batch(scorer, &[text])?;
    Ok(Prediction::from_probs(probs.pop().expect("validated batch of one")))
}
