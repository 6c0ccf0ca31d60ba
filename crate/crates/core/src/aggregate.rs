//! Per-class lexicons from instance explanations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explain::InstanceExplanation;

pub const DEFAULT_LEXICON_SIZE: usize = 100;
pub const DEFAULT_MIN_SUPPORT: usize = 2;

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid lexicon file {path}: {msg}")]
    BadFile { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub word: String,
    pub class: usize,
    pub impact: f64,
    pub instance_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub word: String,
    pub avg_impact: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLexicon {
    pub class: usize,
    pub entries: Vec<LexiconEntry>,
}

impl ClassLexicon {
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.word.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregateConfig {
    pub top_k: usize,
    pub min_support: usize,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        AggregateConfig { top_k: DEFAULT_LEXICON_SIZE, min_support: DEFAULT_MIN_SUPPORT }
    }
}

/// Flattens explanations into one record per selected (word, instance).
pub fn selections(explanations: &[InstanceExplanation]) -> Vec<SelectionRecord> {
    explanations
        .iter()
        .flat_map(|e| {
            e.top_words.iter().map(move |(w, impact)| SelectionRecord {
                word: w.clone(),
                class: e.predicted,
                impact: *impact,
                instance_id: e.instance_id.clone(),
            })
        })
        .collect()
}

/// Builds one lexicon per class (`n_classes` of them, possibly empty).
///
/// Words selected for two or more classes are dropped, then words selected in
/// fewer than `min_support` instances; survivors are ranked by mean impact
/// (ties by word) and cut to `top_k`.
pub fn aggregate(explanations: &[InstanceExplanation], n_classes: usize, cfg: AggregateConfig) -> Vec<ClassLexicon> {
    struct Tally {
        classes: BTreeSet<usize>,
        sum: f64,
        support: usize,
    }
    let mut tallies: BTreeMap<String, Tally> = BTreeMap::new();
    for rec in selections(explanations) {
        let t = tallies.entry(rec.word).or_insert(Tally { classes: BTreeSet::new(), sum: 0.0, support: 0 });
        t.classes.insert(rec.class);
        t.sum += rec.impact;
        t.support += 1;
    }

    let mut lexicons: Vec<ClassLexicon> = (0..n_classes).map(|class| ClassLexicon { class, entries: Vec::new() }).collect();
    for (word, t) in tallies {
        if t.classes.len() != 1 || t.support < cfg.min_support {
            continue;
        }
        let class = *t.classes.first().expect("one class");
        if let Some(lex) = lexicons.get_mut(class) {
            lex.entries.push(LexiconEntry { word, avg_impact: t.sum / t.support as f64, support: t.support });
        }
    }
    for lex in &mut lexicons {
        lex.entries.sort_by(|a, b| b.avg_impact.total_cmp(&a.avg_impact).then_with(|| a.word.cmp(&b.word)));
        lex.entries.truncate(cfg.top_k);
    }
    lexicons
}

fn file_stem(label: &str) -> String {
    label.chars().map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn lexicon_file_name(class: usize, label: &str) -> String {
    format!("lexicon_{class:02}_{}.tsv", file_stem(label))
}

pub const SUMMARY_FILE: &str = "lexicon_summary.tsv";
pub const LEXICONS_JSON: &str = "lexicons.json";

#[derive(Serialize, Deserialize)]
struct LexiconsFile {
    manifest: Vec<String>,
    lexicons: Vec<ClassLexicon>,
}

/// Writes one ranked TSV per class, a combined summary TSV and a JSON copy.
///
/// Returns the written paths in a stable order.
pub fn lexicon_report(lexicons: &[ClassLexicon], manifest: &[String], dir: &Path) -> Result<Vec<PathBuf>, AggregateError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| AggregateError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::new();
    let mut summary = String::from("label\trank\tword\tavg_impact\tsupport\n");
    for lex in lexicons {
        let label = manifest.get(lex.class).map(String::as_str).unwrap_or("unknown");
        let mut tsv = String::from("rank\tword\tavg_impact\tsupport\n");
        for (rank, e) in lex.entries.iter().enumerate() {
            tsv.push_str(&format!("{}\t{}\t{:.6}\t{}\n", rank + 1, e.word, e.avg_impact, e.support));
            summary.push_str(&format!("{label}\t{}\t{}\t{:.6}\t{}\n", rank + 1, e.word, e.avg_impact, e.support));
        }
        let path = dir.join(lexicon_file_name(lex.class, label));
        fs::write(&path, tsv).map_err(io(&path))?;
        written.push(path);
    }
    let path = dir.join(SUMMARY_FILE);
    fs::write(&path, summary).map_err(io(&path))?;
    written.push(path);

    let path = dir.join(LEXICONS_JSON);
    let mut file = fs::File::create(&path).map_err(io(&path))?;
    let body = LexiconsFile { manifest: manifest.to_vec(), lexicons: lexicons.to_vec() };
    serde_json::to_writer(&mut file, &body).map_err(|e| AggregateError::Io { path: path.clone(), source: e.into() })?;
    file.write_all(b"\n").map_err(io(&path))?;
    written.push(path);
    Ok(written)
}

/// Reads the JSON copy written by [`lexicon_report`].
pub fn load_lexicons(path: &Path) -> Result<(Vec<String>, Vec<ClassLexicon>), AggregateError> {
    let text = fs::read_to_string(path).map_err(|source| AggregateError::Io { path: path.to_path_buf(), source })?;
    let f: LexiconsFile = serde_json::from_str(&text)
        .map_err(|e| AggregateError::BadFile { path: path.to_path_buf(), msg: e.to_string() })?;
    Ok((f.manifest, f.lexicons))
}
