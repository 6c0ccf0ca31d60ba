//! Per-instance leave-one-word-out attribution.
//!
//! For a correctly classified instance with predicted class `ŷ` and score `ℓ = p(ŷ | x)`,
//! every unique word `u` is removed (all occurrences at once) and the instance is
//! rescored; the impact of `u` is `ℓ - p(ŷ | x without u)`. The five highest-impact
//! words form the explanation. Misclassified instances are skipped.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{score_batch, Prediction, Scorer, ScorerError};
use crate::corpus::{Dataset, LabeledInstance};
use crate::features::{remove_word, tokenize};

pub const DEFAULT_TOP_WORDS: usize = 5;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("scorer failed on instance {instance_id} after {completed} completed instances: {source}")]
    Scorer { instance_id: String, completed: usize, source: ScorerError },
    #[error("scorer labels {scorer:?} do not match dataset manifest {data:?}")]
    ManifestMismatch { scorer: Vec<String>, data: Vec<String> },
    #[error("could not build worker pool: {0}")]
    Pool(String),
    #[error("invalid explanations file {path}: {msg}")]
    BadFile { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// One ablation: `word` removed from the instance and the original class rescored.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRecord {
    pub word: String,
    pub ablated_text: String,
    /// Probability of the original predicted class on the ablated text.
    pub score: f64,
    pub impact: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAblation {
    pub base: Prediction,
    /// One record per unique word, in order of first occurrence.
    pub records: Vec<AblationRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceExplanation {
    pub instance_id: String,
    pub true_label: usize,
    pub predicted: usize,
    pub base_score: f64,
    pub top_words: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Explained(InstanceExplanation),
    Misclassified { instance_id: String, true_label: usize, predicted: usize },
}

/// Unique tokens in order of first occurrence.
pub fn unique_words(text: &str) -> Vec<&str> {
    let mut seen = HashSet::new();
    tokenize(text).into_iter().filter(|t| seen.insert(*t)).collect()
}

/// Scores the full text, then every single-word ablation when the prediction is correct.
///
/// Returns the base prediction alone (`Err` side) for misclassified instances.
pub fn ablate_instance(
    scorer: &dyn Scorer,
    inst: &LabeledInstance,
) -> Result<Result<InstanceAblation, Prediction>, ScorerError> {
    let base = Prediction::from_probs(score_batch(scorer, &[inst.text.as_str()])?.pop().expect("one vector"));
    if base.predicted != inst.label {
        return Ok(Err(base));
    }
    let words = unique_words(&inst.text);
    if words.is_empty() {
        return Ok(Ok(InstanceAblation { base, records: Vec::new() }));
    }
    let ablated: Vec<String> =
        words.iter().map(|w| remove_word(&inst.text, w).expect("word comes from the text")).collect();
    let refs: Vec<&str> = ablated.iter().map(String::as_str).collect();
    let probs = score_batch(scorer, &refs)?;
    let records = words
        .into_iter()
        .zip(ablated)
        .zip(probs)
        .map(|((word, ablated_text), p)| {
            let score = p[base.predicted];
            AblationRecord { word: word.to_string(), ablated_text, score, impact: base.score - score }
        })
        .collect();
    Ok(Ok(InstanceAblation { base, records }))
}

/// Orders by impact descending; `records` is in first-occurrence order, so a stable
/// sort breaks ties by position first. The word comparison only matters for callers
/// passing records in another order.
fn rank(records: &[AblationRecord], top_k: usize) -> Vec<(String, f64)> {
    let mut ranked: Vec<(usize, &AblationRecord)> = records.iter().enumerate().collect();
    ranked.sort_by(|(ia, a), (ib, b)| {
        b.impact
            .partial_cmp(&a.impact)
            .unwrap_or(Ordering::Equal)
            .then(ia.cmp(ib))
            .then_with(|| a.word.cmp(&b.word))
    });
    ranked.into_iter().take(top_k).map(|(_, r)| (r.word.clone(), r.impact)).collect()
}

pub fn explain_instance(scorer: &dyn Scorer, inst: &LabeledInstance, top_k: usize) -> Result<Outcome, ScorerError> {
    Ok(match ablate_instance(scorer, inst)? {
        Err(base) => Outcome::Misclassified {
            instance_id: inst.id.clone(),
            true_label: inst.label,
            predicted: base.predicted,
        },
        Ok(ablation) => Outcome::Explained(InstanceExplanation {
            instance_id: inst.id.clone(),
            true_label: inst.label,
            predicted: ablation.base.predicted,
            base_score: ablation.base.score,
            top_words: rank(&ablation.records, top_k),
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipStats {
    pub manifest: Vec<String>,
    pub processed: usize,
    pub explained: usize,
    /// Misclassified (skipped) instances per true class.
    pub skipped: Vec<usize>,
}

impl SkipStats {
    pub fn total_skipped(&self) -> usize {
        self.skipped.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusExplanation {
    /// Sorted by instance id.
    pub explanations: Vec<InstanceExplanation>,
    pub stats: SkipStats,
}

#[derive(Debug, Clone, Copy)]
pub struct ExplainConfig {
    pub top_words: usize,
    pub workers: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig { top_words: DEFAULT_TOP_WORDS, workers: 1 }
    }
}

/// Explains every instance of `test` on a pool of `cfg.workers` threads.
pub fn explain_corpus(scorer: &dyn Scorer, test: &Dataset, cfg: ExplainConfig) -> Result<CorpusExplanation, ExplainError> {
    if scorer.labels() != test.manifest.as_slice() {
        return Err(ExplainError::ManifestMismatch { scorer: scorer.labels().to_vec(), data: test.manifest.clone() });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| ExplainError::Pool(e.to_string()))?;
    let completed = AtomicUsize::new(0);
    let outcomes: Vec<Outcome> = pool.install(|| {
        test.instances
            .par_iter()
            .map(|inst| {
                let out = explain_instance(scorer, inst, cfg.top_words).map_err(|source| ExplainError::Scorer {
                    instance_id: inst.id.clone(),
                    completed: completed.load(AtomicOrdering::Relaxed),
                    source,
                })?;
                completed.fetch_add(1, AtomicOrdering::Relaxed);
                Ok(out)
            })
            .collect::<Result<_, ExplainError>>()
    })?;

    let mut stats = SkipStats {
        manifest: test.manifest.clone(),
        processed: outcomes.len(),
        explained: 0,
        skipped: vec![0; test.n_classes()],
    };
    let mut explanations = Vec::new();
    for out in outcomes {
        match out {
            Outcome::Explained(e) => explanations.push(e),
            Outcome::Misclassified { true_label, .. } => stats.skipped[true_label] += 1,
        }
    }
    stats.explained = explanations.len();
    explanations.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    Ok(CorpusExplanation { explanations, stats })
}

#[derive(Serialize, Deserialize)]
struct ExplanationLine {
    instance_id: String,
    label: String,
    base_score: f64,
    top: Vec<(String, f64)>,
}

#[derive(Serialize, Deserialize)]
struct TrailerLine {
    skip_stats: SkipStats,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnyLine {
    Trailer(TrailerLine),
    Explanation(ExplanationLine),
}

impl CorpusExplanation {
    /// One JSON line per explanation, then a `{"skip_stats": ...}` trailer.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.explanations {
            let line = ExplanationLine {
                instance_id: e.instance_id.clone(),
                label: self.stats.manifest[e.true_label].clone(),
                base_score: e.base_score,
                top: e.top_words.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut w, &TrailerLine { skip_stats: self.stats.clone() })?;
        w.write_all(b"\n")?;
        w.flush()
    }

    pub fn save(&self, path: &Path) -> Result<(), ExplainError> {
        let io = |source| ExplainError::Io { path: path.to_path_buf(), source };
        let file = File::create(path).map_err(io)?;
        self.write_to(BufWriter::new(file)).map_err(|source| ExplainError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<CorpusExplanation, ExplainError> {
        let bad = |msg: String| ExplainError::BadFile { path: path.to_path_buf(), msg };
        let file = File::open(path).map_err(|source| ExplainError::Io { path: path.to_path_buf(), source })?;
        let mut lines = Vec::new();
        let mut trailer = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| ExplainError::Io { path: path.to_path_buf(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            if trailer.is_some() {
                return Err(bad(format!("line {}: data after trailer", i + 1)));
            }
            match serde_json::from_str::<AnyLine>(&line).map_err(|e| bad(format!("line {}: {e}", i + 1)))? {
                AnyLine::Trailer(t) => trailer = Some(t.skip_stats),
                AnyLine::Explanation(e) => lines.push(e),
            }
        }
        let stats = trailer.ok_or_else(|| bad("missing skip_stats trailer".into()))?;
        let explanations = lines
            .into_iter()
            .map(|l| {
                let label = stats
                    .manifest
                    .iter()
                    .position(|m| *m == l.label)
                    .ok_or_else(|| bad(format!("label {:?} not in manifest", l.label)))?;
                Ok(InstanceExplanation {
                    instance_id: l.instance_id,
                    true_label: label,
                    predicted: label,
                    base_score: l.base_score,
                    top_words: l.top,
                })
            })
            .collect::<Result<_, ExplainError>>()?;
        Ok(CorpusExplanation { explanations, stats })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{softmax, Model};
    use crate::features::Vocabulary;

    struct Uniform(Vec<String>);

    impl Scorer for Uniform {
        fn labels(&self) -> &[String] {
            &self.0
        }
        fn score_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ScorerError> {
            let k = self.0.len();
            Ok(vec![vec![1.0 / k as f64; k]; texts.len()])
        }
    }

    fn inst(id: &str, text: &str, label: usize) -> LabeledInstance {
        LabeledInstance { id: id.into(), text: text.into(), label }
    }

    fn two_word_model() -> Model {
        // Features [m1, filler]; m1 votes strongly for class 0, filler mildly for class 1.
        let vocab = Vocabulary::from_words(vec!["m1".into(), "filler".into()], 1).unwrap();
        let weights = vec![3.0, 0.0, 0.0, 0.5];
        Model::new(vocab, weights, vec![0.0, 0.0], vec!["A".into(), "B".into()], None, 256).unwrap()
    }

    #[test]
    fn uniform_scorer_skips_unless_label_zero() {
        let s = Uniform(vec!["a".into(), "b".into(), "c".into()]);
        assert!(matches!(explain_instance(&s, &inst("1", "x y", 2), 5).unwrap(), Outcome::Misclassified { predicted: 0, .. }));
        assert!(matches!(explain_instance(&s, &inst("2", "x y", 0), 5).unwrap(), Outcome::Explained(_)));
    }

    #[test]
    fn marker_outranks_filler_by_hand_computed_scores() {
        let m = two_word_model();
        // Full text logits: [3, 0.5]; without m1: [0, 0.5]; without filler: [3, 0].
        let base = softmax(&[3.0, 0.5])[0];
        let delta_m1 = base - softmax(&[0.0, 0.5])[0];
        let delta_filler = base - softmax(&[3.0, 0.0])[0];
        let Outcome::Explained(e) = explain_instance(&m, &inst("1", "m1 filler", 0), 5).unwrap() else {
            panic!("should be correct");
        };
        assert_eq!(e.top_words[0].0, "m1");
        assert!((e.top_words[0].1 - delta_m1).abs() < 1e-15);
        assert!((e.top_words[1].1 - delta_filler).abs() < 1e-15);
        assert!(delta_m1 > delta_filler);
        assert!(delta_filler < 0.0);
    }

    #[test]
    fn one_entry_per_unique_word_up_to_five() {
        let m = two_word_model();
        let Outcome::Explained(e) = explain_instance(&m, &inst("1", "m1 x m1 y", 0), 5).unwrap() else {
            panic!()
        };
        assert_eq!(e.top_words.len(), 3);
        let Outcome::Explained(e) = explain_instance(&m, &inst("2", "m1 a b c d e f g", 0), 5).unwrap() else {
            panic!()
        };
        assert_eq!(e.top_words.len(), 5);
        assert_eq!(e.top_words[0].0, "m1");
        // OOV words tie at zero impact; earlier first occurrence wins.
        let rest: Vec<&str> = e.top_words[1..].iter().map(|w| w.0.as_str()).collect();
        assert_eq!(rest, vec!["a", "b", "c", "d"]);
    }

    #[test]
    fn oov_ablation_is_exactly_zero() {
        let m = two_word_model();
        let Ok(ablation) = ablate_instance(&m, &inst("1", "m1 zzz", 0)).unwrap() else { panic!() };
        let zzz = ablation.records.iter().find(|r| r.word == "zzz").unwrap();
        assert_eq!(zzz.impact, 0.0);
        for r in &ablation.records {
            assert_eq!(ablation.base.score - r.score, r.impact);
        }
    }

    #[test]
    fn single_word_instance_is_scored_on_empty_text() {
        let m = two_word_model();
        let Ok(ablation) = ablate_instance(&m, &inst("1", "m1", 0)).unwrap() else { panic!() };
        assert_eq!(ablation.records.len(), 1);
        assert_eq!(ablation.records[0].ablated_text, "");
        assert_eq!(ablation.records[0].score, 0.5);
    }

    #[test]
    fn skip_stats_for_constant_predictor() {
        let labels: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
        let mut data = Dataset::new(labels.clone());
        for i in 0..40 {
            data.instances.push(inst(&format!("{i:03}"), "w", i % 4));
        }
        let out = explain_corpus(&Uniform(labels), &data, ExplainConfig::default()).unwrap();
        assert_eq!(out.stats.skipped, vec![0, 10, 10, 10]);
        assert_eq!(out.explanations.len(), 10);
        assert!(out.explanations.iter().all(|e| e.true_label == 0));
    }

    #[test]
    fn file_round_trip() {
        let m = two_word_model();
        let mut data = Dataset::new(vec!["A".into(), "B".into()]);
        data.instances.push(inst("b", "m1 filler x", 0));
        data.instances.push(inst("a", "m1 m1", 0));
        data.instances.push(inst("c", "filler", 0));
        let out = explain_corpus(&m, &data, ExplainConfig::default()).unwrap();
        assert_eq!(out.explanations[0].instance_id, "a");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        out.save(&p).unwrap();
        assert_eq!(CorpusExplanation::load(&p).unwrap(), out);
    }
}
