use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{linear_logits, Model, ModelError};
use super::{argmax, log_sum_exp, softmax};
use crate::corpus::{Dataset, RegionScheme};
use crate::features::{vectorize, FeatureError, SparseVector, Vocabulary, DEFAULT_MAX_LEN, DEFAULT_MIN_COUNT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub min_count: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            epochs: 10,
            batch_size: 64,
            max_len: DEFAULT_MAX_LEN,
            learning_rate: 0.1,
            l2: 1e-6,
            min_count: DEFAULT_MIN_COUNT,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidHyperparams(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.max_len == 0 || self.min_count == 0 {
            return bad("epochs, batch_size, max_len and min_count must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) || self.learning_rate * self.l2 >= 1.0 {
            return bad("l2 must be non-negative with learning_rate * l2 < 1");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("train and dev manifests differ: {train:?} vs {dev:?}")]
    ManifestMismatch { train: Vec<String>, dev: Vec<String> },
    #[error("non-finite loss at epoch {epoch}, batch {batch}; lower the learning rate")]
    Diverged { epoch: usize, batch: usize },
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Regularized objective over the whole training set after the epoch.
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

/// Gradient of the regularized mini-batch objective
/// `mean_i(-log p(y_i | x_i)) + l2/2 * ||W||²`.
///
/// The data term is sparse (only features present in the batch); the L2 term
/// is implied and added on lookup.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub loss: f64,
    /// `(feature, per-class derivative)` sorted by feature.
    pub data_rows: Vec<(usize, Vec<f64>)>,
    pub bias: Vec<f64>,
    pub l2: f64,
}

impl Gradient {
    /// Full derivative with respect to `W[class, feature]`.
    pub fn weight(&self, model: &Model, class: usize, feature: usize) -> f64 {
        let data = self
            .data_rows
            .binary_search_by_key(&feature, |r| r.0)
            .map(|i| self.data_rows[i].1[class])
            .unwrap_or(0.0);
        data + self.l2 * model.weight(class, feature)
    }
}

struct DataTerm {
    mean_ce: f64,
    rows: Vec<(usize, Vec<f64>)>,
    bias: Vec<f64>,
}

/// Cross-entropy and its sparse gradient for effective weights `scale * weights`.
fn data_term(
    weights: &[f64],
    scale: f64,
    bias: &[f64],
    n_features: usize,
    batch: &[(&SparseVector, usize)],
) -> DataTerm {
    let k = bias.len();
    let n = batch.len() as f64;
    let mut ce = 0.0;
    let mut grad_bias = vec![0.0; k];
    let mut rows: std::collections::BTreeMap<usize, Vec<f64>> = std::collections::BTreeMap::new();
    for &(x, y) in batch {
        let logits = linear_logits(weights, scale, bias, n_features, x);
        ce += log_sum_exp(&logits) - logits[y];
        let mut residual = softmax(&logits);
        residual[y] -= 1.0;
        for (g, r) in grad_bias.iter_mut().zip(&residual) {
            *g += r / n;
        }
        for &(j, c) in x.pairs() {
            let row = rows.entry(j).or_insert_with(|| vec![0.0; k]);
            for (g, r) in row.iter_mut().zip(&residual) {
                *g += r * c as f64 / n;
            }
        }
    }
    DataTerm { mean_ce: ce / n, rows: rows.into_iter().collect(), bias: grad_bias }
}

/// Regularized objective on `batch`.
pub fn objective(model: &Model, batch: &[(&SparseVector, usize)], l2: f64) -> f64 {
    let ce: f64 = batch
        .iter()
        .map(|&(x, y)| {
            let logits = model.logits(x);
            log_sum_exp(&logits) - logits[y]
        })
        .sum::<f64>()
        / batch.len() as f64;
    let sq: f64 = model.weights().iter().map(|w| w * w).sum();
    ce + 0.5 * l2 * sq
}

/// Analytic gradient of [`objective`]; the same data term drives [`train`].
pub fn batch_gradient(model: &Model, batch: &[(&SparseVector, usize)], l2: f64) -> Gradient {
    let term = data_term(model.weights(), 1.0, model.bias(), model.vocab().len(), batch);
    let sq: f64 = model.weights().iter().map(|w| w * w).sum();
    Gradient { loss: term.mean_ce + 0.5 * l2 * sq, data_rows: term.rows, bias: term.bias, l2 }
}

fn accuracy(model: &Model, data: &[(SparseVector, usize)]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = data.iter().filter(|(x, y)| argmax(&model.logits(x)) == *y).count();
    correct as f64 / data.len() as f64
}

/// Fits a model by mini-batch SGD on L2-regularized cross-entropy and returns
/// the final-epoch parameters.
///
/// Weight decay is applied lazily through a shared scale factor so that each
/// step only touches the features present in the batch.
pub fn train(
    train: &Dataset,
    dev: &Dataset,
    hp: &Hyperparams,
    scheme: Option<RegionScheme>,
) -> Result<(Model, TrainReport), TrainError> {
    hp.validate()?;
    if train.manifest != dev.manifest {
        return Err(TrainError::ManifestMismatch { train: train.manifest.clone(), dev: dev.manifest.clone() });
    }
    let vocab = Vocabulary::build(train, hp.min_count)?;
    let n_features = vocab.len();
    let encode = |d: &Dataset| -> Vec<(SparseVector, usize)> {
        d.instances.iter().map(|i| (vectorize(&i.text, &vocab, hp.max_len), i.label)).collect()
    };
    let train_x = encode(train);
    let dev_x = encode(dev);

    let mut model = Model::zeros(vocab.clone(), train.manifest.clone(), scheme, hp.max_len);
    let mut raw = vec![0.0; model.weights().len()];
    let mut scale = 1.0f64;
    let decay = 1.0 - hp.learning_rate * hp.l2;

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 1..=hp.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            let batch: Vec<(&SparseVector, usize)> = chunk.iter().map(|&i| (&train_x[i].0, train_x[i].1)).collect();
            let term = data_term(&raw, scale, model.bias(), n_features, &batch);
            if !term.mean_ce.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b + 1 });
            }
            scale *= decay;
            let step = hp.learning_rate / scale;
            for (j, grads) in &term.rows {
                for (k, g) in grads.iter().enumerate() {
                    raw[k * n_features + j] -= step * g;
                }
            }
            for (bk, g) in model.bias_mut().iter_mut().zip(&term.bias) {
                *bk -= hp.learning_rate * g;
            }
            if scale < 1e-6 {
                raw.iter_mut().for_each(|w| *w *= scale);
                scale = 1.0;
            }
        }

        for (w, r) in model.weights_mut().iter_mut().zip(&raw) {
            *w = r * scale;
        }
        if model.weights().iter().chain(model.bias()).any(|w| !w.is_finite()) {
            return Err(TrainError::Diverged { epoch, batch: order.len().div_ceil(hp.batch_size) });
        }
        let all: Vec<(&SparseVector, usize)> = train_x.iter().map(|(x, y)| (x, *y)).collect();
        let train_loss = objective(&model, &all, hp.l2);
        if !train_loss.is_finite() {
            return Err(TrainError::Diverged { epoch, batch: order.len().div_ceil(hp.batch_size) });
        }
        let dev_accuracy = accuracy(&model, &dev_x);
        log::info!("epoch {epoch}: train loss {train_loss:.6}, dev accuracy {dev_accuracy:.4}");
        report.epochs.push(EpochStats { epoch, train_loss, dev_accuracy });
    }
    Ok((model, report))
}
