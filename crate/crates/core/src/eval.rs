//! Classifier metrics, random baselines, place-name shares and run reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};
use thiserror::Error;

use crate::aggregate::ClassLexicon;
use crate::classifier::{argmax, score_batch, Scorer, ScorerError};
use crate::corpus::Dataset;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("random baseline needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("scorer labels {scorer:?} do not match dataset manifest {data:?}")]
    ManifestMismatch { scorer: Vec<String>, data: Vec<String> },
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("empty gazetteer {0}")]
    EmptyGazetteer(String),
    #[error("no lexicons to analyse")]
    NoLexicons,
    #[error("could not build worker pool: {0}")]
    Pool(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when precision or recall had a zero denominator and was reported as 0.
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassScores>,
}

impl Metrics {
    pub fn from_pairs(n_classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        let mut n = 0;
        for (truth, pred) in pairs {
            confusion[truth][pred] += 1;
            n += 1;
        }
        let trace: usize = (0..n_classes).map(|k| confusion[k][k]).sum();
        let per_class = (0..n_classes)
            .map(|k| {
                let tp = confusion[k][k] as f64;
                let predicted: usize = confusion.iter().map(|row| row[k]).sum();
                let actual: usize = confusion[k].iter().sum();
                let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
                let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
                let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
                ClassScores { precision, recall, f1, undefined: predicted == 0 || actual == 0 }
            })
            .collect();
        let accuracy = if n == 0 { 0.0 } else { trace as f64 / n as f64 };
        Metrics { n, accuracy, confusion, per_class }
    }
}

const EVAL_CHUNK: usize = 512;

/// Scores every instance of `data` and tallies the confusion matrix.
pub fn evaluate(scorer: &dyn Scorer, data: &Dataset, workers: usize) -> Result<Metrics, EvalError> {
    if scorer.labels() != data.manifest.as_slice() {
        return Err(EvalError::ManifestMismatch { scorer: scorer.labels().to_vec(), data: data.manifest.clone() });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let predicted: Vec<Vec<usize>> = pool.install(|| {
        data.instances
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let texts: Vec<&str> = chunk.iter().map(|i| i.text.as_str()).collect();
                Ok(score_batch(scorer, &texts)?.iter().map(|p| argmax(p)).collect())
            })
            .collect::<Result<_, EvalError>>()
    })?;
    let pairs = data.instances.iter().map(|i| i.label).zip(predicted.into_iter().flatten());
    Ok(Metrics::from_pairs(data.n_classes(), pairs))
}

/// Accuracy of guessing uniformly among `k` classes.
pub fn random_baseline(k: usize) -> Result<f64, EvalError> {
    if k < 2 {
        return Err(EvalError::TooFewClasses(k));
    }
    Ok(1.0 / k as f64)
}

/// Central `confidence` interval of the accuracy of `n` independent guesses with success rate `p`.
pub fn binomial_interval(n: usize, p: f64, confidence: f64) -> (f64, f64) {
    let dist = Binomial::new(p, n as u64).expect("valid binomial parameters");
    let tail = (1.0 - confidence) / 2.0;
    let lo = dist.inverse_cdf(tail);
    let hi = dist.inverse_cdf(1.0 - tail);
    (lo as f64 / n as f64, hi as f64 / n as f64)
}

/// Gives every text the same uniform distribution; argmax ties resolve to class 0.
#[derive(Debug, Clone)]
pub struct UniformScorer {
    labels: Vec<String>,
}

impl UniformScorer {
    pub fn new(labels: Vec<String>) -> Self {
        UniformScorer { labels }
    }
}

impl Scorer for UniformScorer {
    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn score_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ScorerError> {
        let k = self.labels.len();
        Ok(vec![vec![1.0 / k as f64; k]; texts.len()])
    }
}

/// Puts all mass on a class drawn uniformly from a hash of `(seed, text)`.
///
/// Deterministic per text, which the scorer contract requires.
#[derive(Debug, Clone)]
pub struct RandomScorer {
    labels: Vec<String>,
    seed: u64,
}

impl RandomScorer {
    pub fn new(labels: Vec<String>, seed: u64) -> Self {
        RandomScorer { labels, seed }
    }
}

// FNV-1a: stable across platforms and compiler versions, unlike std's DefaultHasher.
fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Scorer for RandomScorer {
    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn score_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ScorerError> {
        let k = self.labels.len();
        Ok(texts
            .iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, t.as_bytes()));
                let mut p = vec![0.0; k];
                p[rng.gen_range(0..k)] = 1.0;
                p
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchPolicy {
    Exact,
    /// Also matches words that extend a gazetteer entry by at most four characters.
    ExactOrPrefixDerivation,
}

impl std::str::FromStr for MatchPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "exact" => Ok(MatchPolicy::Exact),
            "exact_or_prefix_derivation" | "prefix" => Ok(MatchPolicy::ExactOrPrefixDerivation),
            other => Err(format!("unknown match policy {other:?} (expected exact or exact_or_prefix_derivation)")),
        }
    }
}

pub const MAX_DERIVATION_SUFFIX: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Gazetteer {
    names: BTreeSet<String>,
    policy: MatchPolicy,
}

impl Gazetteer {
    /// Entries are trimmed; blank entries are ignored.
    pub fn new<I, S>(names: I, policy: MatchPolicy) -> Result<Self, EvalError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let names: BTreeSet<String> =
            names.into_iter().map(|s| s.as_ref().trim().to_string()).filter(|s| !s.is_empty()).collect();
        if names.is_empty() {
            return Err(EvalError::EmptyGazetteer("(in memory)".into()));
        }
        Ok(Gazetteer { names, policy })
    }

    /// One name per line; `#` starts a comment line.
    pub fn load(path: &Path, policy: MatchPolicy) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
        let names = text.lines().map(str::trim).filter(|l| !l.starts_with('#'));
        Gazetteer::new(names, policy).map_err(|e| match e {
            EvalError::EmptyGazetteer(_) => EvalError::EmptyGazetteer(path.display().to_string()),
            other => other,
        })
    }

    pub fn policy(&self) -> MatchPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn matches(&self, word: &str) -> bool {
        if self.names.contains(word) {
            return true;
        }
        if self.policy == MatchPolicy::Exact {
            return false;
        }
        // Every proper prefix that leaves at most four trailing characters.
        let boundaries: Vec<usize> = word.char_indices().map(|(i, _)| i).skip(1).collect();
        boundaries
            .iter()
            .rev()
            .take(MAX_DERIVATION_SUFFIX)
            .any(|&cut| self.names.contains(&word[..cut]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceNameReport {
    pub per_class_share: Vec<f64>,
    pub mean_share: f64,
    pub matched_words: Vec<Vec<String>>,
    /// Classes whose lexicon was empty (share reported as 0).
    pub empty_classes: Vec<usize>,
}

/// Fraction of each lexicon's words that are place names or derived from one.
pub fn place_name_share(lexicons: &[ClassLexicon], gaz: &Gazetteer) -> Result<PlaceNameReport, EvalError> {
    if lexicons.is_empty() {
        return Err(EvalError::NoLexicons);
    }
    let mut report = PlaceNameReport {
        per_class_share: Vec::new(),
        mean_share: 0.0,
        matched_words: Vec::new(),
        empty_classes: Vec::new(),
    };
    for lex in lexicons {
        let matched: Vec<String> = lex.words().filter(|w| gaz.matches(w)).map(String::from).collect();
        let share = if lex.entries.is_empty() {
            log::warn!("class {} has an empty lexicon; place-name share reported as 0", lex.class);
            report.empty_classes.push(lex.class);
            0.0
        } else {
            matched.len() as f64 / lex.entries.len() as f64
        };
        report.per_class_share.push(share);
        report.matched_words.push(matched);
    }
    report.mean_share = report.per_class_share.iter().sum::<f64>() / lexicons.len() as f64;
    Ok(report)
}

/// Everything a run report shows; serialized verbatim as the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub manifest: Vec<String>,
    pub accuracy: f64,
    pub random_baseline: f64,
    pub n: usize,
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassScores>,
    pub lexicon_heads: Vec<Vec<(String, f64, usize)>>,
    pub place_names: Option<PlaceNameReport>,
}

pub const REPORT_HEAD: usize = 10;
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";

impl RunReport {
    pub fn new(
        manifest: &[String],
        metrics: &Metrics,
        lexicons: &[ClassLexicon],
        place_names: Option<PlaceNameReport>,
    ) -> Result<Self, EvalError> {
        Ok(RunReport {
            manifest: manifest.to_vec(),
            accuracy: metrics.accuracy,
            random_baseline: random_baseline(manifest.len())?,
            n: metrics.n,
            confusion: metrics.confusion.clone(),
            per_class: metrics.per_class.clone(),
            lexicon_heads: lexicons
                .iter()
                .map(|l| l.entries.iter().take(REPORT_HEAD).map(|e| (e.word.clone(), e.avg_impact, e.support)).collect())
                .collect(),
            place_names,
        })
    }

    /// Plain-text rendering; every number also appears in the JSON sidecar.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Classification ({} instances, {} classes)", self.n, self.manifest.len());
        let _ = writeln!(s, "  accuracy         {:.6}", self.accuracy);
        let _ = writeln!(s, "  random baseline  {:.6}", self.random_baseline);
        let _ = writeln!(s, "  margin           {:+.6}", self.accuracy - self.random_baseline);
        let _ = writeln!(s);
        let _ = writeln!(s, "Confusion matrix (rows = true, columns = predicted)");
        let width = self.manifest.iter().map(String::len).max().unwrap_or(0).max(8);
        let _ = write!(s, "  {:width$}", "");
        for name in &self.manifest {
            let _ = write!(s, " {name:>width$}");
        }
        let _ = writeln!(s);
        for (name, row) in self.manifest.iter().zip(&self.confusion) {
            let _ = write!(s, "  {name:width$}");
            for c in row {
                let _ = write!(s, " {c:>width$}");
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Per class: precision / recall / F1");
        for (name, c) in self.manifest.iter().zip(&self.per_class) {
            let flag = if c.undefined { "  (undefined ratio reported as 0)" } else { "" };
            let _ = writeln!(s, "  {name:width$} {:.6} / {:.6} / {:.6}{flag}", c.precision, c.recall, c.f1);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Lexicon heads (word, average impact, support)");
        for (name, head) in self.manifest.iter().zip(&self.lexicon_heads) {
            let _ = writeln!(s, "  {name}");
            if head.is_empty() {
                let _ = writeln!(s, "    (empty)");
            }
            for (rank, (w, avg, sup)) in head.iter().enumerate() {
                let _ = writeln!(s, "    {:>3}. {w}\t{avg:.6}\t{sup}", rank + 1);
            }
        }
        if let Some(p) = &self.place_names {
            let _ = writeln!(s);
            let _ = writeln!(s, "Place-name share of lexicon words");
            for (k, (name, share)) in self.manifest.iter().zip(&p.per_class_share).enumerate() {
                let flag = if p.empty_classes.contains(&k) { "  (empty lexicon)" } else { "" };
                let _ = writeln!(s, "  {name:width$} {share:.6}  [{}]{flag}", p.matched_words[k].join(", "));
            }
            let _ = writeln!(s, "  {:width$} {:.6}", "mean", p.mean_share);
        }
        s
    }
}

/// Writes `report.txt` and `report.json` into `dir`.
pub fn run_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let txt = dir.join(REPORT_TXT);
    fs::write(&txt, report.render()).map_err(io(&txt))?;
    let json = dir.join(REPORT_JSON);
    let mut body = serde_json::to_string_pretty(report).expect("report serializes");
    body.push('\n');
    fs::write(&json, body).map_err(io(&json))?;
    Ok(vec![txt, json])
}
