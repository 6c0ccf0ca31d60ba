//! Corpus ingestion, region labeling, deterministic splits and synthetic corpora.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Latitude separating northern from southern Germany.
pub const DEFAULT_LAT_SPLIT: f64 = 50.33;
/// Longitude separating south-western from south-eastern Germany.
pub const DEFAULT_LON_SPLIT: f64 = 9.97;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unknown country code {0:?} (expected AT, DE or CH)")]
    UnknownCountry(String),
    #[error("coordinates out of range: lat={lat}, lon={lon}")]
    BadCoordinates { lat: f64, lon: f64 },
    #[error("line {line}: label {label:?} is not part of the {scheme} scheme")]
    UnknownLabel { line: usize, label: String, scheme: String },
    #[error("line {line}: {msg}")]
    InvalidRecord { line: usize, msg: String },
    #[error("class {class:?} has {available} instances but {required} are required (short by {})", required - available)]
    InsufficientInstances { class: String, available: usize, required: usize },
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),
    #[error("invalid dataset file {path}: {msg}")]
    BadDatasetFile { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Replaces every run of whitespace (spaces, tabs, line breaks) with one space and trims.
///
/// Nothing else is touched: case, punctuation and diacritics survive as-is.
pub fn normalize_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for ch in raw.chars() {
        if matches!(ch, ' ' | '\t' | '\n' | '\r') {
            pending_space = !out.is_empty();
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(ch);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Country {
    AT,
    DE,
    CH,
}

impl FromStr for Country {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "AT" => Ok(Country::AT),
            "DE" => Ok(Country::DE),
            "CH" => Ok(Country::CH),
            other => Err(CorpusError::UnknownCountry(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeKind {
    Countries3,
    Split4,
    Split5,
}

impl SchemeKind {
    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Countries3 => "countries3",
            SchemeKind::Split4 => "split4",
            SchemeKind::Split5 => "split5",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "countries3" | "3" => Ok(SchemeKind::Countries3),
            "split4" | "4" => Ok(SchemeKind::Split4),
            "split5" | "5" => Ok(SchemeKind::Split5),
            other => Err(format!("unknown region scheme {other:?} (expected countries3, split4 or split5)")),
        }
    }
}

pub const AT: &str = "AT";
pub const CH: &str = "CH";
pub const DE: &str = "DE";
pub const DE_NORTH: &str = "DE-north";
pub const DE_SOUTH: &str = "DE-south";
pub const DE_SOUTH_WEST: &str = "DE-south-west";
pub const DE_SOUTH_EAST: &str = "DE-south-east";

/// A 3, 4 or 5 class operationalization of the German-speaking area.
///
/// Cells are half-open: `lat >= lat_split` is north, `lon >= lon_split` is east.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionScheme {
    pub kind: SchemeKind,
    pub lat_split: f64,
    pub lon_split: f64,
}

impl RegionScheme {
    pub fn new(kind: SchemeKind) -> Self {
        RegionScheme { kind, lat_split: DEFAULT_LAT_SPLIT, lon_split: DEFAULT_LON_SPLIT }
    }

    /// Label names in canonical order; a label's position is its class index.
    pub fn labels(&self) -> &'static [&'static str] {
        match self.kind {
            SchemeKind::Countries3 => &[AT, CH, DE],
            SchemeKind::Split4 => &[AT, CH, DE_NORTH, DE_SOUTH],
            SchemeKind::Split5 => &[AT, CH, DE_NORTH, DE_SOUTH_WEST, DE_SOUTH_EAST],
        }
    }

    pub fn manifest(&self) -> Vec<String> {
        self.labels().iter().map(|s| s.to_string()).collect()
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.labels().iter().position(|l| *l == name)
    }
}

/// Maps a geolocated post onto a region label of `scheme`.
pub fn map_region(country: &str, lat: f64, lon: f64, scheme: &RegionScheme) -> Result<&'static str> {
    let country: Country = country.parse()?;
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(CorpusError::BadCoordinates { lat, lon });
    }
    Ok(match (country, scheme.kind) {
        (Country::AT, _) => AT,
        (Country::CH, _) => CH,
        (Country::DE, SchemeKind::Countries3) => DE,
        (Country::DE, _) if lat >= scheme.lat_split => DE_NORTH,
        (Country::DE, SchemeKind::Split4) => DE_SOUTH,
        (Country::DE, _) if lon < scheme.lon_split => DE_SOUTH_WEST,
        (Country::DE, _) => DE_SOUTH_EAST,
    })
}

/// Collapses a label of a finer scheme onto the containing label of `target`.
///
/// Returns `None` when `label` is not a region label or `target` is finer than the label's scheme.
pub fn coarsen_label(label: &str, target: SchemeKind) -> Option<&'static str> {
    let (country, north, east) = match label {
        AT => return Some(AT),
        CH => return Some(CH),
        DE => (DE, None, None),
        DE_NORTH => (DE, Some(true), None),
        DE_SOUTH => (DE, Some(false), None),
        DE_SOUTH_WEST => (DE, Some(false), Some(false)),
        DE_SOUTH_EAST => (DE, Some(false), Some(true)),
        _ => return None,
    };
    debug_assert_eq!(country, DE);
    match (target, north, east) {
        (SchemeKind::Countries3, _, _) => Some(DE),
        (SchemeKind::Split4, Some(true), _) => Some(DE_NORTH),
        (SchemeKind::Split4, Some(false), _) => Some(DE_SOUTH),
        (SchemeKind::Split5, Some(true), _) => Some(DE_NORTH),
        (SchemeKind::Split5, Some(false), Some(false)) => Some(DE_SOUTH_WEST),
        (SchemeKind::Split5, Some(false), Some(true)) => Some(DE_SOUTH_EAST),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub id: String,
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub instances: Vec<LabeledInstance>,
    pub manifest: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    manifest: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct DatasetLine<'a> {
    id: std::borrow::Cow<'a, str>,
    text: std::borrow::Cow<'a, str>,
    label: std::borrow::Cow<'a, str>,
}

impl Dataset {
    pub fn new(manifest: Vec<String>) -> Self {
        Dataset { instances: Vec::new(), manifest }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.manifest.len()];
        for inst in &self.instances {
            counts[inst.label] += 1;
        }
        counts
    }

    /// Checks the manifest for duplicates and every label for range.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut seen = HashSet::new();
        for name in &self.manifest {
            if !seen.insert(name.as_str()) {
                return Err(format!("duplicate label {name:?} in manifest"));
            }
        }
        for inst in &self.instances {
            if inst.label >= self.manifest.len() {
                return Err(format!("instance {:?} has label index {} outside the manifest", inst.id, inst.label));
            }
            if inst.text.contains(['\n', '\t', '\r']) {
                return Err(format!("instance {:?} contains unnormalized whitespace", inst.id));
            }
        }
        Ok(())
    }

    /// Writes the manifest header followed by one `{id, text, label}` line per instance.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        serde_json::to_writer(&mut w, &ManifestHeader { manifest: self.manifest.clone() })?;
        w.write_all(b"\n")?;
        for inst in &self.instances {
            let line = DatasetLine {
                id: inst.id.as_str().into(),
                text: inst.text.as_str().into(),
                label: self.manifest[inst.label].as_str().into(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(io_err(path))?;
        self.write_to(BufWriter::new(file)).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bad = |msg: String| CorpusError::BadDatasetFile { path: path.to_path_buf(), msg };
        let file = File::open(path).map_err(io_err(path))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines.next().ok_or_else(|| bad("missing manifest header".into()))?.map_err(io_err(path))?;
        let header: ManifestHeader =
            serde_json::from_str(&header).map_err(|e| bad(format!("manifest header: {e}")))?;
        let mut data = Dataset::new(header.manifest);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DatasetLine = serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
            let label = data
                .manifest
                .iter()
                .position(|m| *m == rec.label)
                .ok_or_else(|| bad(format!("line {}: label {:?} not in manifest", i + 2, rec.label)))?;
            data.instances.push(LabeledInstance { id: rec.id.into_owned(), text: rec.text.into_owned(), label });
        }
        data.validate().map_err(bad)?;
        Ok(data)
    }
}

#[derive(Deserialize)]
struct InputRecord {
    text: String,
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    country: Option<String>,
    #[serde(default)]
    lat: Option<f64>,
    #[serde(default)]
    lon: Option<f64>,
    #[serde(default)]
    label: Option<String>,
}

#[derive(Debug, Clone)]
pub struct IngestOutcome {
    pub dataset: Dataset,
    /// Records whose text was empty after normalization.
    pub dropped_empty: usize,
    /// Unparseable lines, skipped.
    pub malformed: usize,
}

/// Reads line-delimited JSON posts and labels them under `scheme`.
///
/// Records without an `id` get `L` + zero-padded line number, so ids sort in input order.
pub fn ingest(path: &Path, scheme: &RegionScheme) -> Result<IngestOutcome> {
    let file = File::open(path).map_err(io_err(path))?;
    ingest_reader(BufReader::new(file), scheme).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io { path: path.to_path_buf(), source },
        other => other,
    })
}

pub fn ingest_reader<R: BufRead>(reader: R, scheme: &RegionScheme) -> Result<IngestOutcome> {
    let mut dataset = Dataset::new(scheme.manifest());
    let mut dropped_empty = 0;
    let mut malformed = 0;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| CorpusError::Io { path: PathBuf::new(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InputRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                malformed += 1;
                log::warn!("line {line_no}: malformed record skipped ({e}); malformed so far: {malformed}");
                continue;
            }
        };
        let label = match (&rec.label, &rec.country, rec.lat, rec.lon) {
            (Some(label), _, _, _) => scheme.label_index(label).ok_or_else(|| CorpusError::UnknownLabel {
                line: line_no,
                label: label.clone(),
                scheme: scheme.kind.to_string(),
            })?,
            (None, Some(country), Some(lat), Some(lon)) => {
                let name = map_region(country, lat, lon, scheme)
                    .map_err(|e| CorpusError::InvalidRecord { line: line_no, msg: e.to_string() })?;
                scheme.label_index(name).expect("map_region yields scheme labels")
            }
            _ => {
                malformed += 1;
                log::warn!(
                    "line {line_no}: record needs either label or country/lat/lon; malformed so far: {malformed}"
                );
                continue;
            }
        };
        let text = normalize_text(&rec.text);
        if text.is_empty() {
            dropped_empty += 1;
            continue;
        }
        let id = rec.id.unwrap_or_else(|| format!("L{line_no:010}"));
        dataset.instances.push(LabeledInstance { id, text, label });
    }
    Ok(IngestOutcome { dataset, dropped_empty, malformed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

/// Draws `per_class` instances of every class into disjoint train/dev/test sets.
///
/// Each class is stably sorted by id, shuffled with a seeded Fisher-Yates pass,
/// and cut into consecutive train, dev and test blocks. Output sets are sorted by id.
pub fn sample_splits(data: &Dataset, per_class: SplitSizes, seed: u64) -> Result<Splits> {
    let mut by_class: Vec<Vec<&LabeledInstance>> = vec![Vec::new(); data.n_classes()];
    for inst in &data.instances {
        by_class[inst.label].push(inst);
    }
    let required = per_class.total();
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < required {
            return Err(CorpusError::InsufficientInstances {
                class: data.manifest[class].clone(),
                available: members.len(),
                required,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Splits {
        train: Dataset::new(data.manifest.clone()),
        dev: Dataset::new(data.manifest.clone()),
        test: Dataset::new(data.manifest.clone()),
    };
    for mut members in by_class {
        members.sort_by(|a, b| a.id.cmp(&b.id));
        members.shuffle(&mut rng);
        let (train, rest) = members.split_at(per_class.train);
        let (dev, rest) = rest.split_at(per_class.dev);
        let test = &rest[..per_class.test];
        splits.train.instances.extend(train.iter().map(|i| (*i).clone()));
        splits.dev.instances.extend(dev.iter().map(|i| (*i).clone()));
        splits.test.instances.extend(test.iter().map(|i| (*i).clone()));
    }
    for set in [&mut splits.train, &mut splits.dev, &mut splits.test] {
        set.instances.sort_by(|a, b| a.id.cmp(&b.id));
    }
    Ok(splits)
}

/// Parameters of a synthetic corpus with planted class markers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub shared_vocab_size: usize,
    pub markers_per_class: usize,
    pub marker_injection_prob: f64,
    /// How many of each class's markers are place names (listed in the gazetteer).
    pub place_names_per_class: usize,
    pub posts_per_class: usize,
    pub mean_post_length: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The reference corpus: 3 classes, 20 markers per class, injection probability 0.3.
    ///
    /// Three of twenty markers (15%) are place names, the closest integer share to 14%.
    pub fn reference() -> Self {
        SyntheticSpec {
            n_classes: 3,
            shared_vocab_size: 100,
            markers_per_class: 20,
            marker_injection_prob: 0.3,
            place_names_per_class: 3,
            posts_per_class: 3000,
            mean_post_length: 12,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CorpusError::InvalidSpec(m.to_string()));
        if self.n_classes == 0
            || self.shared_vocab_size == 0
            || self.markers_per_class == 0
            || self.posts_per_class == 0
            || self.mean_post_length == 0
        {
            return bad("all counts must be positive");
        }
        if self.place_names_per_class == 0 || self.place_names_per_class > self.markers_per_class {
            return bad("place_names_per_class must be in 1..=markers_per_class");
        }
        if !(self.marker_injection_prob > 0.0 && self.marker_injection_prob <= 1.0) {
            return bad("marker_injection_prob must lie in (0, 1]");
        }
        Ok(())
    }

    /// Probability that a post has `len` tokens.
    ///
    /// Lengths are `1 + Binomial(2 * (mean - 1), 1/2)`, so the mean is exactly `mean_post_length`.
    pub fn length_pmf(&self, len: usize) -> f64 {
        let trials = 2 * (self.mean_post_length - 1);
        if len == 0 || len - 1 > trials {
            return 0.0;
        }
        let k = len - 1;
        let mut log_choose = 0.0;
        for i in 0..k {
            log_choose += ((trials - i) as f64).ln() - ((i + 1) as f64).ln();
        }
        (log_choose - trials as f64 * std::f64::consts::LN_2).exp()
    }

    pub fn max_post_length(&self) -> usize {
        2 * (self.mean_post_length - 1) + 1
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    /// Markers per class; the first `place_names_per_class` of each are place names.
    pub markers: Vec<Vec<String>>,
    pub shared_vocab: Vec<String>,
    pub gazetteer: Vec<String>,
}

impl SyntheticCorpus {
    /// Writes the gazetteer sidecar: one place name per line.
    pub fn write_gazetteer(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        for name in &self.gazetteer {
            writeln!(w, "{name}").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "w", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS[rng.gen_range(0..ONSETS.len())], VOWELS[rng.gen_range(0..VOWELS.len())]))
        .collect()
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Generates a labeled corpus with planted per-class marker words.
///
/// Every word has the same number of characters, so no word is a proper prefix of another.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    const SYLLABLES: usize = 4;
    let capacity = (ONSETS.len() * VOWELS.len()).pow(SYLLABLES as u32);
    if spec.shared_vocab_size + spec.n_classes * spec.markers_per_class > capacity / 4 {
        return Err(CorpusError::InvalidSpec(format!("vocabulary too large for the word generator (max {})", capacity / 4)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut taken: HashSet<String> = HashSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng, place: bool| loop {
        let w = pseudo_word(rng, SYLLABLES);
        let w = if place { capitalize(&w) } else { w };
        // Place names are capitalized; reserve the lowercase form too so case never aliases.
        if !taken.contains(&w) && !taken.contains(&w.to_lowercase()) {
            taken.insert(w.to_lowercase());
            taken.insert(w.clone());
            return w;
        }
    };

    let shared_vocab: Vec<String> = (0..spec.shared_vocab_size).map(|_| fresh(&mut rng, false)).collect();
    let markers: Vec<Vec<String>> = (0..spec.n_classes)
        .map(|_| (0..spec.markers_per_class).map(|m| fresh(&mut rng, m < spec.place_names_per_class)).collect())
        .collect();
    let gazetteer: Vec<String> =
        markers.iter().flat_map(|ms| ms[..spec.place_names_per_class].iter().cloned()).collect();

    let manifest: Vec<String> = (0..spec.n_classes).map(|c| format!("class{c}")).collect();
    let mut dataset = Dataset::new(manifest);
    let trials = 2 * (spec.mean_post_length - 1);
    let width = (spec.n_classes * spec.posts_per_class).to_string().len();
    let mut next_id = 0usize;
    for _ in 0..spec.posts_per_class {
        for (class, class_markers) in markers.iter().enumerate() {
            let len = 1 + (0..trials).filter(|_| rng.gen_bool(0.5)).count();
            let tokens: Vec<&str> = (0..len)
                .map(|_| {
                    if rng.gen_bool(spec.marker_injection_prob) {
                        class_markers[rng.gen_range(0..class_markers.len())].as_str()
                    } else {
                        shared_vocab[rng.gen_range(0..shared_vocab.len())].as_str()
                    }
                })
                .collect();
            dataset.instances.push(LabeledInstance {
                id: format!("s{next_id:0width$}"),
                text: tokens.join(" "),
                label: class,
            });
            next_id += 1;
        }
    }
    Ok(SyntheticCorpus { dataset, markers, shared_vocab, gazetteer })
}

/// Per-class instance counts keyed by label name.
pub fn class_histogram(data: &Dataset) -> BTreeMap<String, usize> {
    data.manifest.iter().cloned().zip(data.class_counts()).collect()
}
