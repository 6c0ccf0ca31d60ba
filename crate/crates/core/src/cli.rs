//! Command-line pipeline: ingest/synth → split → train → eval → explain → aggregate → report.
//!
//! Settings resolve as defaults < config file (`--config`) < environment (paths only) < flags.
//! Every invocation writes `run_<command>.json` listing the resolved config and emitted files.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::aggregate::{aggregate, lexicon_report, load_lexicons, AggregateConfig, LEXICONS_JSON};
use crate::classifier::{self, load_model, save_model, Endpoint, ExternalOptions, Hyperparams, Scorer};
use crate::corpus::{
    generate_synthetic, ingest, sample_splits, Dataset, RegionScheme, SchemeKind, SplitSizes, SyntheticSpec,
};
use crate::eval::{evaluate, place_name_share, run_report, Gazetteer, MatchPolicy, Metrics, RunReport};
use crate::explain::{explain_corpus, CorpusExplanation, ExplainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const GAZETTEER_FILE: &str = "gazetteer.txt";
pub const MARKERS_FILE: &str = "markers.tsv";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const DEV_FILE: &str = "dev.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const TRAIN_LOG_FILE: &str = "train_log.tsv";
pub const METRICS_FILE: &str = "metrics.json";
pub const EXPLANATIONS_FILE: &str = "explanations.jsonl";
pub const LEXICON_DIR: &str = "lexicons";

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub msg: String,
}

impl Failure {
    fn validation(msg: impl std::fmt::Display) -> Self {
        Failure { code: EXIT_VALIDATION, msg: msg.to_string() }
    }

    fn runtime(msg: impl std::fmt::Display) -> Self {
        Failure { code: EXIT_RUNTIME, msg: msg.to_string() }
    }
}

type CliResult<T> = Result<T, Failure>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Native,
    External,
}

impl FromStr for ScorerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "native" => Ok(ScorerKind::Native),
            "external" => Ok(ScorerKind::External),
            other => Err(format!("unknown scorer {other:?} (expected native or external)")),
        }
    }
}

/// Fully resolved settings of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub scheme: SchemeKind,
    pub input: Option<PathBuf>,
    pub out: PathBuf,
    pub gazetteer: Option<PathBuf>,
    pub match_policy: MatchPolicy,
    pub seed: u64,
    pub workers: usize,
    pub hyperparams: Hyperparams,
    pub top_words: usize,
    pub lexicon_size: usize,
    pub min_support: usize,
    pub splits: SplitSizes,
    pub synth: SyntheticSpec,
    pub scorer: ScorerKind,
    pub scorer_cmd: Option<String>,
    pub scorer_addr: Option<String>,
    pub scorer_timeout_secs: u64,
    pub scorer_chunk: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 7;
        RunConfig {
            scheme: SchemeKind::Split5,
            input: None,
            out: PathBuf::from("run"),
            gazetteer: None,
            match_policy: MatchPolicy::ExactOrPrefixDerivation,
            seed,
            workers: 1,
            hyperparams: Hyperparams { seed, ..Hyperparams::default() },
            top_words: crate::explain::DEFAULT_TOP_WORDS,
            lexicon_size: crate::aggregate::DEFAULT_LEXICON_SIZE,
            min_support: crate::aggregate::DEFAULT_MIN_SUPPORT,
            splits: SplitSizes { train: 2000, dev: 500, test: 500 },
            synth: SyntheticSpec { seed, ..SyntheticSpec::reference() },
            scorer: ScorerKind::Native,
            scorer_cmd: None,
            scorer_addr: None,
            scorer_timeout_secs: 60,
            scorer_chunk: 256,
        }
    }
}

/// Keys accepted in config files, in manifest order.
pub const CONFIG_KEYS: &[&str] = &[
    "scheme", "input", "out", "gazetteer", "match_policy", "seed", "workers",
    "epochs", "batch_size", "max_len", "learning_rate", "l2", "min_count",
    "top_words", "lexicon_size", "min_support",
    "train_per_class", "dev_per_class", "test_per_class",
    "classes", "shared_vocab", "markers", "injection_prob", "place_names", "posts_per_class", "mean_length",
    "scorer", "scorer_cmd", "scorer_addr", "scorer_timeout_secs", "scorer_chunk",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
}

impl RunConfig {
    /// Sets one key from its string form.
    ///
    /// `seed` also seeds training and synthesis; the training and synthetic seeds
    /// have no keys of their own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let hp = &mut self.hyperparams;
        match key {
            "scheme" => self.scheme = value.parse()?,
            "input" => self.input = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "gazetteer" => self.gazetteer = Some(PathBuf::from(value)),
            "match_policy" => self.match_policy = value.parse()?,
            "seed" => {
                self.seed = parse(key, value)?;
                hp.seed = self.seed;
                self.synth.seed = self.seed;
            }
            "workers" => self.workers = parse(key, value)?,
            "epochs" => hp.epochs = parse(key, value)?,
            "batch_size" => hp.batch_size = parse(key, value)?,
            "max_len" => hp.max_len = parse(key, value)?,
            "learning_rate" => hp.learning_rate = parse(key, value)?,
            "l2" => hp.l2 = parse(key, value)?,
            "min_count" => hp.min_count = parse(key, value)?,
            "top_words" => self.top_words = parse(key, value)?,
            "lexicon_size" => self.lexicon_size = parse(key, value)?,
            "min_support" => self.min_support = parse(key, value)?,
            "train_per_class" => self.splits.train = parse(key, value)?,
            "dev_per_class" => self.splits.dev = parse(key, value)?,
            "test_per_class" => self.splits.test = parse(key, value)?,
            "classes" => self.synth.n_classes = parse(key, value)?,
            "shared_vocab" => self.synth.shared_vocab_size = parse(key, value)?,
            "markers" => self.synth.markers_per_class = parse(key, value)?,
            "injection_prob" => self.synth.marker_injection_prob = parse(key, value)?,
            "place_names" => self.synth.place_names_per_class = parse(key, value)?,
            "posts_per_class" => self.synth.posts_per_class = parse(key, value)?,
            "mean_length" => self.synth.mean_post_length = parse(key, value)?,
            "scorer" => self.scorer = value.parse()?,
            "scorer_cmd" => self.scorer_cmd = Some(value.to_string()),
            "scorer_addr" => self.scorer_addr = Some(value.to_string()),
            "scorer_timeout_secs" => self.scorer_timeout_secs = parse(key, value)?,
            "scorer_chunk" => self.scorer_chunk = parse(key, value)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.hyperparams.validate().map_err(|e| e.to_string())?;
        if self.workers == 0 {
            return Err("workers must be positive".into());
        }
        if self.top_words == 0 || self.lexicon_size == 0 || self.min_support == 0 {
            return Err("top_words, lexicon_size and min_support must be positive".into());
        }
        if self.scorer_chunk == 0 || self.scorer_timeout_secs == 0 {
            return Err("scorer_chunk and scorer_timeout_secs must be positive".into());
        }
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Reads a flat `key = value` file; `#` and `;` start comment lines.
pub fn load_config(path: &Path) -> Result<RunConfig, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut cfg = RunConfig::default();
    apply_config_text(&mut cfg, &text).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(cfg)
}

fn apply_config_text(cfg: &mut RunConfig, text: &str) -> Result<(), String> {
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(format!("line {}: duplicate key {key:?}", i + 1));
        }
        cfg.set(key, value.trim()).map_err(|e| format!("line {}: {e}", i + 1))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: &'a RunConfig,
    outputs: Vec<String>,
}

/// Writes `run_<command>.json` into the output directory and returns its path.
pub fn write_run_manifest(cfg: &RunConfig, command: &str, outputs: &[PathBuf]) -> std::io::Result<PathBuf> {
    let rel = |p: &PathBuf| p.strip_prefix(&cfg.out).unwrap_or(p).to_string_lossy().into_owned();
    let manifest = RunManifest { command, config: cfg, outputs: outputs.iter().map(rel).collect() };
    let path = cfg.path(&format!("run_{command}.json"));
    let mut body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    body.push('\n');
    fs::write(&path, body)?;
    Ok(path)
}

#[derive(Parser, Debug)]
#[command(name = "geoprof", version, about = "Explainable dialect classification with leave-one-word-out lexicons")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Read geolocated line-delimited JSON posts into a labeled corpus
    Ingest(Common),
    /// Generate a synthetic corpus with planted markers and a gazetteer
    Synth(Common),
    /// Sample per-class train/dev/test splits
    Split(Common),
    /// Train the native classifier
    Train(Common),
    /// Evaluate the classifier on the dev split
    Eval(Common),
    /// Leave-one-word-out explanations for the test split
    Explain(Common),
    /// Aggregate explanations into per-class lexicons
    Aggregate(Common),
    /// Write the text and JSON run report
    Report(Common),
    /// Run every stage in order
    Pipeline(Common),
    /// Serve the trained model over the scorer protocol on stdin/stdout
    Serve(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Key-value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    gazetteer: Option<PathBuf>,
    #[arg(long)]
    match_policy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, alias = "batch")]
    batch_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, alias = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    min_count: Option<usize>,
    #[arg(long)]
    top_words: Option<usize>,
    #[arg(long)]
    lexicon_size: Option<usize>,
    #[arg(long)]
    min_support: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    dev_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    shared_vocab: Option<usize>,
    #[arg(long)]
    markers: Option<usize>,
    #[arg(long)]
    injection_prob: Option<f64>,
    #[arg(long)]
    place_names: Option<usize>,
    #[arg(long)]
    posts_per_class: Option<usize>,
    #[arg(long)]
    mean_length: Option<usize>,
    /// native or external
    #[arg(long)]
    scorer: Option<String>,
    /// Command line of an external scorer peer (stdin/stdout)
    #[arg(long, alias = "cmd")]
    scorer_cmd: Option<String>,
    /// host:port of an external scorer peer
    #[arg(long, alias = "addr")]
    scorer_addr: Option<String>,
    #[arg(long)]
    scorer_timeout_secs: Option<u64>,
    #[arg(long)]
    scorer_chunk: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        macro_rules! push {
            ($($field:ident),*) => {
                $(if let Some(x) = &self.$field { v.push((stringify!($field), x.to_string())); })*
            };
        }
        push!(scheme, match_policy, seed, workers, epochs, batch_size, max_len, learning_rate, l2, min_count,
              top_words, lexicon_size, min_support, train_per_class, dev_per_class, test_per_class, classes,
              shared_vocab, markers, injection_prob, place_names, posts_per_class, mean_length, scorer,
              scorer_cmd, scorer_addr, scorer_timeout_secs, scorer_chunk);
        for (key, path) in [("input", &self.input), ("out", &self.out), ("gazetteer", &self.gazetteer)] {
            if let Some(p) = path {
                v.push((key, p.to_string_lossy().into_owned()));
            }
        }
        v
    }

    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path).map_err(Failure::validation)?,
            None => RunConfig::default(),
        };
        for (key, var) in [("input", "GEOPROF_INPUT"), ("out", "GEOPROF_OUT"), ("gazetteer", "GEOPROF_GAZETTEER")] {
            if let Ok(value) = std::env::var(var) {
                cfg.set(key, &value).map_err(Failure::validation)?;
            }
        }
        for (key, value) in self.overrides() {
            cfg.set(key, &value).map_err(Failure::validation)?;
        }
        cfg.validate().map_err(Failure::validation)?;
        Ok(cfg)
    }
}

fn ensure_out(cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Failure::runtime(format!("{}: {e}", cfg.out.display())))
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    Dataset::load(path).map_err(Failure::runtime)
}

fn save_dataset(data: &Dataset, path: &Path) -> CliResult<PathBuf> {
    data.save(path).map_err(Failure::runtime)?;
    Ok(path.to_path_buf())
}

fn region_scheme(cfg: &RunConfig, manifest: &[String]) -> Option<RegionScheme> {
    let scheme = RegionScheme::new(cfg.scheme);
    (scheme.manifest() == manifest).then_some(scheme)
}

fn stage_ingest(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let input = cfg.input.as_ref().ok_or_else(|| Failure::validation("ingest needs --input"))?;
    let out = ingest(input, &RegionScheme::new(cfg.scheme)).map_err(|e| match e {
        crate::corpus::CorpusError::Io { .. } => Failure::runtime(e),
        other => Failure::validation(other),
    })?;
    log::info!(
        "ingested {} posts ({} empty after normalization, {} malformed lines)",
        out.dataset.len(),
        out.dropped_empty,
        out.malformed
    );
    Ok(vec![save_dataset(&out.dataset, &cfg.path(CORPUS_FILE))?])
}

fn stage_synth(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let corpus = generate_synthetic(&cfg.synth).map_err(Failure::validation)?;
    let corpus_path = save_dataset(&corpus.dataset, &cfg.path(CORPUS_FILE))?;
    let gaz = cfg.path(GAZETTEER_FILE);
    corpus.write_gazetteer(&gaz).map_err(Failure::runtime)?;
    let markers = cfg.path(MARKERS_FILE);
    let mut tsv = String::from("label\tmarker\tplace_name\n");
    for (label, ms) in corpus.dataset.manifest.iter().zip(&corpus.markers) {
        for (i, m) in ms.iter().enumerate() {
            tsv.push_str(&format!("{label}\t{m}\t{}\n", i < cfg.synth.place_names_per_class));
        }
    }
    fs::write(&markers, tsv).map_err(|e| Failure::runtime(format!("{}: {e}", markers.display())))?;
    Ok(vec![corpus_path, gaz, markers])
}

fn stage_split(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let data = load_dataset(&cfg.path(CORPUS_FILE))?;
    let splits = sample_splits(&data, cfg.splits, cfg.seed).map_err(Failure::validation)?;
    Ok(vec![
        save_dataset(&splits.train, &cfg.path(TRAIN_FILE))?,
        save_dataset(&splits.dev, &cfg.path(DEV_FILE))?,
        save_dataset(&splits.test, &cfg.path(TEST_FILE))?,
    ])
}

fn stage_train(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let train = load_dataset(&cfg.path(TRAIN_FILE))?;
    let dev = load_dataset(&cfg.path(DEV_FILE))?;
    let scheme = region_scheme(cfg, &train.manifest);
    let (model, report) = classifier::train(&train, &dev, &cfg.hyperparams, scheme).map_err(|e| match e {
        classifier::TrainError::InvalidHyperparams(_)
        | classifier::TrainError::ManifestMismatch { .. }
        | classifier::TrainError::Features(_) => Failure::validation(e),
        other => Failure::runtime(other),
    })?;
    let model_path = cfg.path(MODEL_FILE);
    save_model(&model, &model_path).map_err(Failure::runtime)?;
    let log_path = cfg.path(TRAIN_LOG_FILE);
    let mut log = String::from("epoch\ttrain_loss\tdev_accuracy\n");
    for e in &report.epochs {
        log.push_str(&format!("{}\t{:.6}\t{:.6}\n", e.epoch, e.train_loss, e.dev_accuracy));
    }
    fs::write(&log_path, log).map_err(|e| Failure::runtime(format!("{}: {e}", log_path.display())))?;
    Ok(vec![model_path, log_path])
}

fn open_scorer(cfg: &RunConfig, manifest: &[String]) -> CliResult<Box<dyn Scorer>> {
    match cfg.scorer {
        ScorerKind::Native => {
            let model = load_model(&cfg.path(MODEL_FILE)).map_err(Failure::runtime)?;
            Ok(Box::new(model))
        }
        ScorerKind::External => {
            let endpoint = match (&cfg.scorer_cmd, &cfg.scorer_addr) {
                (Some(cmd), None) => Endpoint::Command(cmd.split_whitespace().map(String::from).collect()),
                (None, Some(addr)) => Endpoint::Tcp(addr.clone()),
                _ => return Err(Failure::validation("external scorer needs exactly one of --scorer-cmd or --scorer-addr")),
            };
            let opts = ExternalOptions {
                chunk_size: cfg.scorer_chunk,
                timeout: Duration::from_secs(cfg.scorer_timeout_secs),
            };
            let scorer = classifier::connect(&endpoint, manifest, opts).map_err(Failure::runtime)?;
            Ok(Box::new(scorer))
        }
    }
}

fn stage_eval(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let dev = load_dataset(&cfg.path(DEV_FILE))?;
    let scorer = open_scorer(cfg, &dev.manifest)?;
    let metrics = evaluate(scorer.as_ref(), &dev, cfg.workers).map_err(Failure::runtime)?;
    log::info!("dev accuracy {:.4} over {} instances", metrics.accuracy, metrics.n);
    let path = cfg.path(METRICS_FILE);
    let mut body = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    body.push('\n');
    fs::write(&path, body).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    Ok(vec![path])
}

fn stage_explain(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let test = load_dataset(&cfg.path(TEST_FILE))?;
    let scorer = open_scorer(cfg, &test.manifest)?;
    let explained = explain_corpus(scorer.as_ref(), &test, ExplainConfig { top_words: cfg.top_words, workers: cfg.workers })
        .map_err(Failure::runtime)?;
    log::info!(
        "explained {} of {} test instances ({} misclassified skipped)",
        explained.stats.explained,
        explained.stats.processed,
        explained.stats.total_skipped()
    );
    let path = cfg.path(EXPLANATIONS_FILE);
    explained.save(&path).map_err(Failure::runtime)?;
    Ok(vec![path])
}

fn stage_aggregate(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let explained = CorpusExplanation::load(&cfg.path(EXPLANATIONS_FILE)).map_err(Failure::runtime)?;
    let manifest = &explained.stats.manifest;
    let lexicons = aggregate(
        &explained.explanations,
        manifest.len(),
        AggregateConfig { top_k: cfg.lexicon_size, min_support: cfg.min_support },
    );
    lexicon_report(&lexicons, manifest, &cfg.path(LEXICON_DIR)).map_err(Failure::runtime)
}

fn gazetteer_path(cfg: &RunConfig) -> Option<PathBuf> {
    cfg.gazetteer.clone().or_else(|| {
        let synth = cfg.path(GAZETTEER_FILE);
        synth.exists().then_some(synth)
    })
}

fn stage_report(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let metrics_path = cfg.path(METRICS_FILE);
    let metrics: Metrics = serde_json::from_str(
        &fs::read_to_string(&metrics_path).map_err(|e| Failure::runtime(format!("{}: {e}", metrics_path.display())))?,
    )
    .map_err(|e| Failure::runtime(format!("{}: {e}", metrics_path.display())))?;
    let (manifest, lexicons) =
        load_lexicons(&cfg.path(LEXICON_DIR).join(LEXICONS_JSON)).map_err(Failure::runtime)?;
    let place_names = match gazetteer_path(cfg) {
        Some(path) => {
            let gaz = Gazetteer::load(&path, cfg.match_policy).map_err(Failure::validation)?;
            Some(place_name_share(&lexicons, &gaz).map_err(Failure::runtime)?)
        }
        None => None,
    };
    let report = RunReport::new(&manifest, &metrics, &lexicons, place_names).map_err(Failure::validation)?;
    run_report(&report, &cfg.out).map_err(Failure::runtime)
}

fn stage_serve(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let model = load_model(&cfg.path(MODEL_FILE)).map_err(Failure::runtime)?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    classifier::serve(&model, stdin.lock(), stdout.lock()).map_err(Failure::runtime)?;
    Ok(Vec::new())
}

fn run_pipeline(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let mut outputs = if cfg.input.is_some() { stage_ingest(cfg)? } else { stage_synth(cfg)? };
    for stage in [stage_split, stage_train, stage_eval, stage_explain, stage_aggregate, stage_report] {
        outputs.extend(stage(cfg)?);
    }
    Ok(outputs)
}

fn dispatch(cmd: &Cmd) -> CliResult<()> {
    let (name, common, stage): (&str, &Common, fn(&RunConfig) -> CliResult<Vec<PathBuf>>) = match cmd {
        Cmd::Ingest(c) => ("ingest", c, stage_ingest),
        Cmd::Synth(c) => ("synth", c, stage_synth),
        Cmd::Split(c) => ("split", c, stage_split),
        Cmd::Train(c) => ("train", c, stage_train),
        Cmd::Eval(c) => ("eval", c, stage_eval),
        Cmd::Explain(c) => ("explain", c, stage_explain),
        Cmd::Aggregate(c) => ("aggregate", c, stage_aggregate),
        Cmd::Report(c) => ("report", c, stage_report),
        Cmd::Pipeline(c) => ("pipeline", c, run_pipeline),
        Cmd::Serve(c) => {
            // The protocol owns stdout; no manifest for a long-running server.
            let cfg = c.resolve()?;
            return stage_serve(&cfg).map(|_| ());
        }
    };
    let cfg = common.resolve()?;
    ensure_out(&cfg)?;
    let outputs = stage(&cfg)?;
    let manifest = write_run_manifest(&cfg, name, &outputs).map_err(Failure::runtime)?;
    for p in outputs.iter().chain(std::iter::once(&manifest)) {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

/// Parses `argv` (including the program name), runs the subcommand, and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            f.code
        }
    }
}
