//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any criterion fails.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use geoprof::aggregate::{aggregate, lexicon_report, load_lexicons, AggregateConfig, ClassLexicon, LEXICONS_JSON};
use geoprof::classifier::{self, batch_gradient, objective, load_model, Hyperparams, Model};
use geoprof::cli::{run_cli, EXIT_OK};
use geoprof::corpus::{generate_synthetic, sample_splits, Dataset, LabeledInstance, SplitSizes, SyntheticSpec};
use geoprof::eval::{
    binomial_interval, evaluate, place_name_share, run_report, Gazetteer, MatchPolicy, Metrics, RandomScorer,
    RunReport,
};
use geoprof::explain::{ablate_instance, explain_corpus, CorpusExplanation, ExplainConfig};
use geoprof::features::{remove_word, tokenize, SparseVector, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, Discrete};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, format!("took {took:?}, limit {limit:?}"))
}

const REFERENCE_SPLITS: SplitSizes = SplitSizes { train: 2000, dev: 500, test: 500 };

struct Reference {
    corpus: geoprof::corpus::SyntheticCorpus,
    test: Dataset,
    model: Model,
    dev_accuracy: f64,
}

fn reference_run(spec: &SyntheticSpec) -> Reference {
    let corpus = generate_synthetic(spec).expect("reference corpus");
    let splits = sample_splits(&corpus.dataset, REFERENCE_SPLITS, spec.seed).expect("splits");
    let hp = Hyperparams { seed: spec.seed, ..Hyperparams::default() };
    let (model, report) = classifier::train(&splits.train, &splits.dev, &hp, None).expect("training");
    let dev_accuracy = report.epochs.last().unwrap().dev_accuracy;
    Reference { corpus, test: splits.test, model, dev_accuracy }
}

fn balanced_dev(k: usize) -> Dataset {
    let spec = SyntheticSpec { n_classes: k, posts_per_class: 5000 / k, seed: 100 + k as u64, ..SyntheticSpec::reference() };
    generate_synthetic(&spec).unwrap().dataset
}

fn criterion_1_random_baseline() -> Check {
    let start = Instant::now();
    let mut notes = Vec::new();
    for k in [3usize, 4, 5] {
        let dev = balanced_dev(k);
        let scorer = RandomScorer::new(dev.manifest.clone(), 2024);
        let m = evaluate(&scorer, &dev, 4).map_err(|e| e.to_string())?;
        let (lo, hi) = binomial_interval(m.n, 1.0 / k as f64, 0.99);
        ensure(lo <= m.accuracy && m.accuracy <= hi, format!("K={k}: accuracy {} outside [{lo}, {hi}]", m.accuracy))?;
        notes.push(format!("K={k} n={} acc={:.4} in [{lo:.4},{hi:.4}]", m.n, m.accuracy));
    }
    within_time(start, Duration::from_secs(10))?;
    Ok(notes.join("; "))
}

/// Exact Bayes accuracy of the generator: a post with any marker is identified
/// with certainty (markers are class-exclusive); a post without one carries no
/// class information, so the best guess is right 1/K of the time.
fn bayes_accuracy(spec: &SyntheticSpec) -> f64 {
    let trials = 2 * (spec.mean_post_length as u64 - 1);
    let lengths = Binomial::new(0.5, trials).unwrap();
    let p_no_marker: f64 =
        (0..=trials).map(|k| lengths.pmf(k) * (1.0 - spec.marker_injection_prob).powi(k as i32 + 1)).sum();
    1.0 - p_no_marker * (1.0 - 1.0 / spec.n_classes as f64)
}

fn criterion_2_beats_baseline(reference: &Reference, spec: &SyntheticSpec) -> Check {
    let bayes = bayes_accuracy(spec);
    // Brute-force cross-check of the closed form on the generated posts themselves.
    let markers: HashSet<&str> = reference.corpus.markers.iter().flatten().map(String::as_str).collect();
    let without = reference
        .corpus
        .dataset
        .instances
        .iter()
        .filter(|i| !tokenize(&i.text).iter().any(|t| markers.contains(t)))
        .count() as f64
        / reference.corpus.dataset.len() as f64;
    let empirical_bayes = 1.0 - without * (1.0 - 1.0 / spec.n_classes as f64);
    ensure((bayes - empirical_bayes).abs() < 0.01, format!("Bayes {bayes} vs empirical {empirical_bayes}"))?;
    ensure(bayes >= 0.95, format!("Bayes rate {bayes} leaves no room for a 0.90 threshold"))?;
    ensure(
        reference.dev_accuracy >= 0.90,
        format!("dev accuracy {} < 0.90", reference.dev_accuracy),
    )?;
    Ok(format!("dev accuracy {:.4} (Bayes {bayes:.4}, random {:.4})", reference.dev_accuracy, 1.0 / 3.0))
}

fn oracle_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Logits straight from the weight matrix, then the removed word's column subtracted.
fn feature_level_delta(model: &Model, text: &str, word: &str, class: usize) -> f64 {
    let v = model.vocab().len();
    let k = model.n_classes();
    let mut counts = std::collections::HashMap::new();
    for t in tokenize(text).into_iter().take(model.max_len()) {
        if let Some(j) = model.vocab().get(t) {
            *counts.entry(j).or_insert(0u32) += 1;
        }
    }
    let z: Vec<f64> = (0..k)
        .map(|c| model.bias()[c] + counts.iter().map(|(&j, &n)| model.weights()[c * v + j] * n as f64).sum::<f64>())
        .collect();
    let z_ablated: Vec<f64> = match model.vocab().get(word) {
        Some(j) => {
            let n = counts.get(&j).copied().unwrap_or(0) as f64;
            (0..k).map(|c| z[c] - n * model.weights()[c * v + j]).collect()
        }
        None => z.clone(),
    };
    oracle_softmax(&z)[class] - oracle_softmax(&z_ablated)[class]
}

fn criterion_3_loo_oracle(reference: &Reference) -> Check {
    let start = Instant::now();
    let model = &reference.model;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let inst = &reference.test.instances[rng.gen_range(0..reference.test.len())];
        let words: Vec<&str> = {
            let mut seen = HashSet::new();
            tokenize(&inst.text).into_iter().filter(|w| seen.insert(*w)).collect()
        };
        let word = words[rng.gen_range(0..words.len())];
        let base = model.predict(&inst.text);
        let ablated = model.predict(&remove_word(&inst.text, word).unwrap());
        let string_delta = base.score - ablated.probs[base.predicted];
        let feature_delta = feature_level_delta(model, &inst.text, word, base.predicted);
        worst = worst.max((string_delta - feature_delta).abs());
    }
    ensure(worst <= 1e-9, format!("max |Δ difference| {worst:e} > 1e-9"))?;
    within_time(start, Duration::from_secs(60))?;
    Ok(format!("10000 pairs, max |Δ difference| {worst:.1e}"))
}

fn criterion_4_impact_identity(reference: &Reference) -> Check {
    let model = &reference.model;
    let mut records = 0usize;
    let mut oov = 0usize;
    let mut instances: Vec<LabeledInstance> = reference.test.instances.clone();
    // Variants carrying a token no training post contains.
    instances.extend(reference.test.instances.iter().map(|i| LabeledInstance {
        id: format!("{}-oov", i.id),
        text: format!("{} Zzyzx-unseen", i.text),
        label: i.label,
    }));
    for inst in &instances {
        let Ok(ablation) = ablate_instance(model, inst).map_err(|e| e.to_string())? else { continue };
        for r in &ablation.records {
            records += 1;
            ensure(
                (ablation.base.score - r.score - r.impact).abs() <= 1e-12,
                format!("{}: Δ({}) identity violated", inst.id, r.word),
            )?;
            ensure((-1.0..=1.0).contains(&r.impact), "impact outside [-1, 1]")?;
            if model.vocab().get(&r.word).is_none() {
                oov += 1;
                ensure(r.impact == 0.0, format!("{}: OOV word {} has Δ = {}", inst.id, r.word, r.impact))?;
            }
        }
    }
    ensure(oov > 0, "no OOV ablations exercised")?;
    Ok(format!("{records} ablation records, {oov} OOV with Δ = 0"))
}

fn tmp(name: &str) -> tempfile::TempDir {
    tempfile::Builder::new().prefix(name).tempdir().unwrap()
}

fn run(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["geoprof"];
    argv.extend_from_slice(args);
    match run_cli(argv.clone()) {
        EXIT_OK => Ok(()),
        code => Err(format!("`{}` exited with {code}", argv.join(" "))),
    }
}

fn criterion_5_constraints(out: &Path) -> Check {
    let model = load_model(&out.join("model.json")).map_err(|e| e.to_string())?;
    let test = Dataset::load(&out.join("test.jsonl")).map_err(|e| e.to_string())?;
    let explained = CorpusExplanation::load(&out.join("explanations.jsonl")).map_err(|e| e.to_string())?;
    let (_, lexicons) = load_lexicons(&out.join("lexicons").join(LEXICONS_JSON)).map_err(|e| e.to_string())?;

    // (a) isCorrect
    let by_id: std::collections::HashMap<&str, &LabeledInstance> =
        test.instances.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut misclassified = 0;
    for inst in &test.instances {
        if model.predict(&inst.text).predicted != inst.label {
            misclassified += 1;
        }
    }
    for e in &explained.explanations {
        let inst = by_id.get(e.instance_id.as_str()).ok_or("explanation for unknown instance")?;
        ensure(model.predict(&inst.text).predicted == inst.label, format!("{} is misclassified", inst.id))?;
        ensure(e.true_label == inst.label, "label mismatch")?;
    }
    ensure(explained.stats.total_skipped() == misclassified, "skip count differs from misclassifications")?;
    ensure(explained.explanations.len() + misclassified == test.len(), "explanations + skips != test size")?;

    // (b) isUnique, (c) support
    let mut seen = HashSet::new();
    for lex in &lexicons {
        for e in &lex.entries {
            ensure(seen.insert(e.word.clone()), format!("{} in two lexicons", e.word))?;
            ensure(e.support >= 2, format!("{} has support {}", e.word, e.support))?;
        }
    }
    // (d) ≤ 5 words, sorted
    for e in &explained.explanations {
        ensure(e.top_words.len() <= 5, format!("{} has {} words", e.instance_id, e.top_words.len()))?;
        ensure(e.top_words.windows(2).all(|w| w[0].1 >= w[1].1), format!("{} not sorted", e.instance_id))?;
        let unique: HashSet<&String> = e.top_words.iter().map(|w| &w.0).collect();
        ensure(unique.len() == e.top_words.len(), "duplicate word in explanation")?;
    }
    Ok(format!(
        "{} explanations, {misclassified} skipped, {} lexicon entries",
        explained.explanations.len(),
        seen.len()
    ))
}

fn criterion_6_marker_recovery(reference: &Reference) -> Check {
    let start = Instant::now();
    let explained = explain_corpus(&reference.model, &reference.test, ExplainConfig { top_words: 5, workers: 4 })
        .map_err(|e| e.to_string())?;
    let lexicons = aggregate(&explained.explanations, 3, AggregateConfig::default());
    let mut notes = Vec::new();
    for (c, markers) in reference.corpus.markers.iter().enumerate() {
        let top20: HashSet<&str> = lexicons[c].words().take(20).collect();
        let hits = markers.iter().filter(|m| top20.contains(m.as_str())).count();
        ensure(hits * 5 >= markers.len() * 4, format!("class {c}: {hits}/{} markers in top 20", markers.len()))?;
        for (other, lex) in lexicons.iter().enumerate() {
            if other != c {
                let leaked: Vec<&str> = lex.words().filter(|w| markers.iter().any(|m| m == w)).collect();
                ensure(leaked.is_empty(), format!("class {c} markers in lexicon {other}: {leaked:?}"))?;
            }
        }
        notes.push(format!("class{c} {hits}/20"));
    }
    within_time(start, Duration::from_secs(300))?;
    Ok(notes.join(", "))
}

fn place_share(reference: &Reference) -> Result<f64, String> {
    let explained = explain_corpus(&reference.model, &reference.test, ExplainConfig { top_words: 5, workers: 4 })
        .map_err(|e| e.to_string())?;
    let lexicons = aggregate(&explained.explanations, reference.test.n_classes(), AggregateConfig::default());
    let gaz = Gazetteer::new(&reference.corpus.gazetteer, MatchPolicy::ExactOrPrefixDerivation)
        .map_err(|e| e.to_string())?;
    Ok(place_name_share(&lexicons, &gaz).map_err(|e| e.to_string())?.mean_share)
}

fn criterion_7_place_names(reference: &Reference) -> Check {
    // 7 of 50 markers per class is exactly 14%.
    let spec = SyntheticSpec { markers_per_class: 50, place_names_per_class: 7, ..SyntheticSpec::reference() };
    let exact = reference_run(&spec);
    let share = place_share(&exact)?;
    ensure((share - 0.14).abs() <= 0.05, format!("mean share {share:.4} outside 0.14 ± 0.05"))?;
    // The 20-marker reference corpus can only designate 3/20 = 15%.
    let reference_share = place_share(reference)?;
    ensure((reference_share - 0.14).abs() <= 0.05, format!("reference share {reference_share:.4} outside 0.14 ± 0.05"))?;
    Ok(format!("mean share {share:.4} (7/50 planted), reference corpus {reference_share:.4} (3/20 planted)"))
}

fn criterion_8_gradient() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (k, v) = (4usize, 50usize);
    let vocab = Vocabulary::from_words((0..v).map(|i| format!("w{i}")).collect(), 1).unwrap();
    let weights: Vec<f64> = (0..k * v).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bias: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
    let model = Model::new(vocab.clone(), weights, bias, labels.clone(), None, 256).unwrap();
    let xs: Vec<(SparseVector, usize)> = (0..16)
        .map(|_| {
            let pairs = (0..rng.gen_range(1..12)).map(|_| (rng.gen_range(0..v), rng.gen_range(1..4))).collect();
            (SparseVector::from_pairs(pairs), rng.gen_range(0..k))
        })
        .collect();
    let batch: Vec<(&SparseVector, usize)> = xs.iter().map(|(x, y)| (x, *y)).collect();
    let l2 = 0.01;
    let grad = batch_gradient(&model, &batch, l2);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (c, j) = (rng.gen_range(0..k), rng.gen_range(0..v));
        let perturbed = |delta: f64| {
            let mut w = model.weights().to_vec();
            w[c * v + j] += delta;
            let m = Model::new(vocab.clone(), w, model.bias().to_vec(), labels.clone(), None, 256).unwrap();
            objective(&m, &batch, l2)
        };
        let numeric = (perturbed(h) - perturbed(-h)) / (2.0 * h);
        let analytic = grad.weight(&model, c, j);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    ensure(worst <= 1e-4, format!("max relative error {worst:e} > 1e-4"))?;
    Ok(format!("200 coordinates, max relative error {worst:.1e}"))
}

fn read_tree(dir: &Path, files: &[&str]) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for f in files {
        let p = dir.join(f);
        if p.is_dir() {
            let mut names: Vec<_> = fs::read_dir(&p).unwrap().map(|e| e.unwrap().file_name()).collect();
            names.sort();
            for n in names {
                out.push((format!("{f}/{}", n.to_string_lossy()), fs::read(p.join(&n)).unwrap()));
            }
        } else {
            out.push((f.to_string(), fs::read(&p).unwrap_or_default()));
        }
    }
    out
}

const ARTIFACTS: &[&str] = &["model.json", "explanations.jsonl", "lexicons", "report.txt", "report.json"];

fn criterion_9_determinism(first: &Path) -> Check {
    let second = tmp("accept-det");
    let out2 = second.path().to_string_lossy().into_owned();
    run(&["pipeline", "--out", &out2, "--seed", "7"])?;
    let a = read_tree(first, ARTIFACTS);
    let b = read_tree(second.path(), ARTIFACTS);
    ensure(a.len() == b.len(), "different artifact sets")?;
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        ensure(na == nb && ba == bb, format!("{na} differs between runs"))?;
    }
    let baseline = fs::read(first.join("explanations.jsonl")).unwrap();
    run(&["explain", "--out", &out2, "--seed", "7", "--workers", "8"])?;
    ensure(fs::read(second.path().join("explanations.jsonl")).unwrap() == baseline, "8 workers differ from 1")?;
    Ok(format!("{} artifact files identical; explain 1 vs 8 workers identical", a.len()))
}

fn criterion_10_degenerate(reference: &Reference) -> Check {
    let model = &reference.model;
    let bias_probs = oracle_softmax(model.bias());

    // Single-word instance: the ablation scores the empty string.
    let word = reference.corpus.markers[1][0].clone();
    let single = LabeledInstance { id: "single".into(), text: word.clone(), label: 1 };
    match ablate_instance(model, &single).map_err(|e| e.to_string())? {
        Ok(a) => {
            ensure(a.records.len() == 1 && a.records[0].ablated_text.is_empty(), "single-word ablation shape")?;
            ensure((a.records[0].score - bias_probs[a.base.predicted]).abs() <= 1e-12, "empty text != softmax(bias)")?;
        }
        Err(p) => return Err(format!("single marker word misclassified as {}", p.predicted)),
    }

    // All-OOV instance: softmax(bias), every Δ = 0.
    let oov = LabeledInstance { id: "oov".into(), text: "Qqq1 Qqq2 Qqq1".into(), label: classifier::argmax(&bias_probs) };
    let p = model.predict(&oov.text);
    ensure(p.probs.iter().zip(&bias_probs).all(|(a, b)| (a - b).abs() <= 1e-12), "all-OOV != softmax(bias)")?;
    let Ok(a) = ablate_instance(model, &oov).map_err(|e| e.to_string())? else {
        return Err("all-OOV instance should be correct by construction".into());
    };
    ensure(a.records.len() == 2 && a.records.iter().all(|r| r.impact == 0.0), "all-OOV Δ must be 0")?;

    // Empty lexicons: header-only TSVs, share 0 with warning flag, report completes.
    let empty: Vec<ClassLexicon> = (0..3).map(|class| ClassLexicon { class, entries: Vec::new() }).collect();
    let dir = tmp("accept-empty");
    let manifest = reference.test.manifest.clone();
    lexicon_report(&empty, &manifest, dir.path()).map_err(|e| e.to_string())?;
    let tsv = fs::read_to_string(dir.path().join(geoprof::aggregate::lexicon_file_name(0, &manifest[0]))).unwrap();
    ensure(tsv == "rank\tword\tavg_impact\tsupport\n", "empty lexicon TSV is not header-only")?;
    let gaz = Gazetteer::new(&reference.corpus.gazetteer, MatchPolicy::Exact).unwrap();
    let share = place_name_share(&empty, &gaz).map_err(|e| e.to_string())?;
    ensure(share.mean_share == 0.0 && share.empty_classes == vec![0, 1, 2], "empty lexicons must flag share 0")?;
    let metrics = Metrics::from_pairs(3, [(0, 0), (1, 2)]);
    let report = RunReport::new(&manifest, &metrics, &empty, Some(share)).map_err(|e| e.to_string())?;
    run_report(&report, dir.path()).map_err(|e| e.to_string())?;

    // Explanations over an empty dataset and aggregation of nothing.
    let none = explain_corpus(model, &Dataset::new(manifest.clone()), ExplainConfig::default()).map_err(|e| e.to_string())?;
    ensure(none.explanations.is_empty() && aggregate(&none.explanations, 3, AggregateConfig::default()).len() == 3, "empty run")?;
    Ok("single-word, all-OOV, empty-lexicon and empty-set cases hold".into())
}

fn main() {
    let spec = SyntheticSpec::reference();
    let started = Instant::now();
    let reference = reference_run(&spec);
    let reference_time = started.elapsed();

    let pipeline_dir = tmp("accept-pipe");
    let out = pipeline_dir.path().to_string_lossy().into_owned();
    let pipeline = run(&["pipeline", "--out", &out, "--seed", "7"]);

    let results: Vec<(&str, Check)> = vec![
        ("1 random-baseline fidelity", criterion_1_random_baseline()),
        ("2 classifier beats baseline", {
            let r = criterion_2_beats_baseline(&reference, &spec);
            r.and_then(|s| within_time(started, Duration::from_secs(120)).map(|_| format!("{s}, trained in {reference_time:?}")))
        }),
        ("3 LOO oracle equivalence", criterion_3_loo_oracle(&reference)),
        ("4 impact-score identity", criterion_4_impact_identity(&reference)),
        ("5 constraint suite", pipeline.clone().and_then(|_| criterion_5_constraints(pipeline_dir.path()))),
        ("6 planted-marker recovery", criterion_6_marker_recovery(&reference)),
        ("7 place-name share", criterion_7_place_names(&reference)),
        ("8 gradient check", criterion_8_gradient()),
        ("9 determinism", pipeline.and_then(|_| criterion_9_determinism(pipeline_dir.path()))),
        ("10 degenerate inputs", criterion_10_degenerate(&reference)),
    ];

    let mut failed = 0;
    for (name, result) in &results {
        match result {
            Ok(note) => println!("PASS  criterion {name}: {note}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {name}: {why}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
