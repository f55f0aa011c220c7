use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use recur_core::clinical::{self, DrugList, PatientRecord, PatientTable};
use recur_core::concept::Lexicon;
use recur_core::corpus::{self, CueLexicon, FilterReport};
use recur_core::eval::{self, CohortVariant, EvalReport, HoldoutReport, RocCurve};
use recur_core::features::{FeatureCounts, VariantConfig};
use recur_core::pipeline::{self, Cohort, FittedFeatures, SentenceReport};
use recur_core::stats::{self, DescriptiveTable, TestResult};
use recur_core::svm::{self, TrainedModel};
use recur_core::synth::{self, GeneratorSpec};

use crate::config::{optional, require, RunConfig};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn load_lexicon(cfg: &RunConfig) -> Result<Lexicon> {
    match optional(&cfg.paths.lexicon, "lexicon")? {
        Some(p) => Lexicon::load(p).with_context(|| format!("lexicon {}", p.display())),
        None => Ok(Lexicon::default_lexicon()),
    }
}

fn load_cues(cfg: &RunConfig) -> Result<CueLexicon> {
    match optional(&cfg.paths.cues, "cues")? {
        Some(p) => CueLexicon::load(p).with_context(|| format!("cues {}", p.display())),
        None => Ok(CueLexicon::default_cues()),
    }
}

/// Patients CSV with auxiliary medication and radiation lists applied.
fn load_patients(cfg: &RunConfig) -> Result<PatientTable> {
    let path = require(&cfg.paths.patients, "patients")?;
    let mut table = clinical::read_patients(open(path)?).with_context(|| format!("patients {}", path.display()))?;
    let meds = match optional(&cfg.paths.medications, "medications")? {
        Some(p) => Some(clinical::read_auxiliary(open(p)?).with_context(|| format!("medications {}", p.display()))?),
        None => None,
    };
    let sites = match optional(&cfg.paths.radiation_sites, "radiation_sites")? {
        Some(p) => Some(clinical::read_auxiliary(open(p)?).with_context(|| format!("radiation sites {}", p.display()))?),
        None => None,
    };
    clinical::apply_auxiliary(
        &mut table.records,
        meds.as_ref(),
        sites.as_ref(),
        &DrugList::default(),
        &clinical::default_metastatic_sites(),
    );
    Ok(table)
}

fn load_cohort(cfg: &RunConfig) -> Result<Cohort> {
    let table = load_patients(cfg)?;
    let lexicon = load_lexicon(cfg)?;
    let store = cfg.sentences_path();
    if !store.exists() {
        bail!("sentence store {} not found; run preprocess first", store.display());
    }
    let sentences = pipeline::read_sentences(open(&store)?).with_context(|| format!("sentence store {}", store.display()))?;
    let narrative = pipeline::narrative_features(&sentences, &lexicon, cfg.context.min_score)?;
    Ok(Cohort::build(&table.records, &narrative, &lexicon.custom_dictionary())?)
}

#[derive(Debug, Serialize)]
struct IngestCounts {
    notes_read: usize,
    rejects: usize,
    duplicates: usize,
}

#[derive(Debug, Serialize)]
struct PreprocessReport {
    ingest: IngestCounts,
    patients: usize,
    patient_rejects: usize,
    filter: FilterReport,
    sentences: SentenceReport,
}

pub fn preprocess(cfg: &RunConfig) -> Result<()> {
    let notes_path = require(&cfg.paths.notes, "notes")?;
    let cues = load_cues(cfg)?;
    let table = load_patients(cfg)?;
    let ingest = corpus::ingest(open(notes_path)?).with_context(|| format!("notes {}", notes_path.display()))?;
    let notes_read = ingest.corpus.len() + ingest.rejects + ingest.duplicates;
    let (filtered, filter) = corpus::filter_notes(ingest.corpus, &table.diagnosis_dates(), cfg.censor_date());
    let (sentences, sentence_report) = pipeline::preprocess(&filtered, &cues, cfg.context_options());

    let store = cfg.sentences_path();
    let mut w = create(&store)?;
    pipeline::write_sentences(&sentences, &mut w)?;
    w.flush()?;
    let report = PreprocessReport {
        ingest: IngestCounts {
            notes_read,
            rejects: ingest.rejects,
            duplicates: ingest.duplicates,
        },
        patients: table.records.len(),
        patient_rejects: table.rejects.len(),
        filter,
        sentences: sentence_report,
    };
    write_json(&cfg.out_dir().join("preprocess_report.json"), &report)?;
    println!(
        "notes {} -> {} kept; sentences {} ({} cue-dropped); store {}",
        report.filter.notes_in,
        report.filter.notes_out,
        report.sentences.kept,
        report.sentences.cue_dropped,
        store.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct FeatureReport {
    variant: String,
    patients: usize,
    positives: usize,
    features: FeatureCounts,
    epochs: usize,
    converged: bool,
    max_violation: f64,
    platt_a: Option<f64>,
    platt_b: Option<f64>,
}

fn write_coefficients(path: &Path, model: &TrainedModel, top_k: usize) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "rank\tname\tsource\tcoefficient")?;
    for (i, c) in model.rank_coefficients(top_k).iter().enumerate() {
        writeln!(w, "{}\t{}\t{}\t{}", i + 1, c.name, c.source.as_str(), c.coefficient)?;
    }
    w.flush()?;
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let variant = cfg.variant_config()?;
    let params = cfg.svm_params()?;
    let cohort = load_cohort(cfg)?;
    let (fitted, matrix) = FittedFeatures::fit(variant, &cohort, &cohort.all_indices())?;
    let (model, train_report) = svm::train_calibrated(&matrix, &params)?;

    let out = cfg.out_dir();
    write_text(&out.join("model.json"), &model.to_json()?)?;
    write_json(&out.join("features.json"), &fitted)?;
    let labels = cohort.labels();
    let report = FeatureReport {
        variant: variant.variant.to_string(),
        patients: cohort.len(),
        positives: labels.iter().filter(|&&l| l).count(),
        features: matrix.counts(),
        epochs: train_report.epochs,
        converged: train_report.converged,
        max_violation: train_report.max_violation,
        platt_a: model.platt_a,
        platt_b: model.platt_b,
    };
    write_json(&out.join("feature_report.json"), &report)?;
    write_coefficients(&out.join("coefficients.tsv"), &model, cfg.learner.top_k)?;
    println!(
        "{}: {} variables, {} columns, {} patients; model {}",
        report.variant,
        report.features.variables,
        report.features.columns,
        report.patients,
        out.join("model.json").display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct Comparison {
    baseline: String,
    other: String,
    test: TestResult,
    p_display: String,
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    variant: String,
    cross_validation: Vec<EvalReport>,
    comparisons: Vec<Comparison>,
    holdout: Option<HoldoutReport>,
}

fn write_curves(dir: &Path, curves: &[RocCurve]) -> Result<()> {
    for curve in curves {
        let mut w = create(&dir.join(format!("replicate_{:02}.tsv", curve.replicate)))?;
        eval::write_roc_tsv(curve, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn cv_report(cohort: &Cohort, config: VariantConfig, cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let data = CohortVariant { cohort, config };
    let mut report = eval::repeated_cv(&data, &cfg.cv_settings()?)
        .with_context(|| format!("cross-validating {}", config.variant))?;
    write_curves(&out.join("roc").join(config.variant.as_str()), &report.roc_curves)?;
    // curves live in the TSVs
    report.roc_curves.clear();
    Ok(report)
}

fn descriptive(records: &[PatientRecord], path: &Path) -> Result<DescriptiveTable> {
    let table = stats::descriptive_table(records, false)?;
    let mut w = create(path)?;
    stats::write_descriptive_tsv(&table, &mut w)?;
    w.flush()?;
    Ok(table)
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let main = cfg.variant_config()?;
    let others = cfg
        .eval
        .compare
        .iter()
        .map(|name| cfg.variant_config_for(name))
        .collect::<Result<Vec<_>>>()?;
    let params = cfg.svm_params()?;
    let cohort = load_cohort(cfg)?;
    let out = cfg.out_dir();

    let mut summary = EvalSummary {
        variant: main.variant.to_string(),
        cross_validation: Vec::new(),
        comparisons: Vec::new(),
        holdout: None,
    };
    if cfg.eval.cross_validation {
        let base = cv_report(&cohort, main, cfg, &out)?;
        println!("{} CV AUC {}", base.variant, base.summary);
        for other in others.iter().filter(|o| o.variant != main.variant) {
            let report = cv_report(&cohort, *other, cfg, &out)?;
            println!("{} CV AUC {}", report.variant, report.summary);
            let test = stats::t_test_two_sample(&base.replicate_aucs, &report.replicate_aucs, cfg.eval.welch)
                .with_context(|| format!("comparing {} with {}", base.variant, report.variant))?;
            summary.comparisons.push(Comparison {
                baseline: base.variant.clone(),
                other: report.variant.clone(),
                p_display: test.p_display(),
                test,
            });
            summary.cross_validation.push(report);
        }
        summary.cross_validation.insert(0, base);
    }
    if cfg.eval.holdout {
        let data = CohortVariant { cohort: &cohort, config: main };
        let (report, _) = eval::holdout(&data, cfg.eval.ratio, cfg.eval.base_seed, &params)?;
        let curve = RocCurve {
            replicate: 0,
            fold: None,
            points: report.roc.clone(),
        };
        let mut w = create(&out.join("roc").join(main.variant.as_str()).join("holdout.tsv"))?;
        eval::write_roc_tsv(&curve, &mut w)?;
        w.flush()?;
        println!("{} held-out AUC {:.4} on {} patients", report.variant, report.auc, report.n_test);
        summary.holdout = Some(report);
    }

    let (_, matrix) = FittedFeatures::fit(main, &cohort, &cohort.all_indices())?;
    let (model, _) = svm::train_calibrated(&matrix, &params)?;
    write_coefficients(&out.join("coefficients.tsv"), &model, cfg.learner.top_k)?;
    let records: Vec<PatientRecord> = cohort.patients.iter().map(|p| p.record.clone()).collect();
    descriptive(&records, &out.join("descriptive.tsv"))?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct OracleReport {
    n: usize,
    positives: usize,
    notes: usize,
    seed: u64,
    /// False when the cohort lacks a class and the oracle AUC is undefined.
    oracle_defined: bool,
    bayes_auc: Option<f64>,
}

pub fn synth(cfg: &RunConfig, seed: Option<u64>) -> Result<()> {
    let mut spec = match optional(&cfg.paths.generator, "generator")? {
        Some(p) => GeneratorSpec::load(p).with_context(|| format!("generator spec {}", p.display()))?,
        None => GeneratorSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let cohort = synth::generate(&spec)?;
    let oracle = synth::bayes_oracle(&spec, &cohort)?;
    let out = cfg.out_dir();

    let mut w = create(&out.join("patients.csv"))?;
    clinical::write_patients(&cohort.records, &mut w)?;
    w.flush()?;
    let mut w = create(&out.join("notes.jsonl"))?;
    corpus::write_notes(&cohort.notes, &mut w)?;
    w.flush()?;
    write_text(&out.join("labels.csv"), &synth::labels_csv(&cohort))?;
    write_text(&out.join("lexicon.txt"), &spec.lexicon()?.to_lines())?;
    write_text(&out.join("generator.toml"), &spec.to_toml())?;
    let mut w = create(&out.join("oracle_scores.tsv"))?;
    writeln!(w, "patient_id\tlabel\tscore")?;
    for ((r, &l), s) in cohort.records.iter().zip(&cohort.labels).zip(&oracle.scores) {
        writeln!(w, "{}\t{}\t{}", r.patient_id, u8::from(l), s)?;
    }
    w.flush()?;
    let report = OracleReport {
        n: spec.n,
        positives: cohort.positives(),
        notes: cohort.notes.len(),
        seed: spec.seed,
        oracle_defined: oracle.bayes_auc.is_some(),
        bayes_auc: oracle.bayes_auc,
    };
    write_json(&out.join("oracle.json"), &report)?;
    match report.bayes_auc {
        Some(a) => println!("{} patients ({} positive); oracle AUC {a:.4}", report.n, report.positives),
        None => println!("{} patients ({} positive); oracle AUC undefined", report.n, report.positives),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CohortSummary {
    records: usize,
    rejects: Vec<(usize, String)>,
    warnings: Vec<String>,
    labeled: usize,
    recurrence: usize,
    no_recurrence: usize,
    /// Per categorical variable, category counts among labeled patients.
    distributions: BTreeMap<String, BTreeMap<String, usize>>,
}

#[derive(Debug, Serialize)]
struct Agreement {
    pairs: usize,
    kappa: f64,
}

/// Paired annotations: a header row, then one row per item whose first two
/// columns are the raters' labels.
fn kappa_from_csv(path: &Path) -> Result<Agreement> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            bail!("{} line {}: expected two columns", path.display(), i + 1);
        }
        a.push(fields[0].to_string());
        b.push(fields[1].to_string());
    }
    let test = stats::cohens_kappa(&a, &b)?;
    Ok(Agreement {
        pairs: a.len(),
        kappa: test.statistic,
    })
}

pub fn report(cfg: &RunConfig) -> Result<()> {
    let table = load_patients(cfg)?;
    let out = cfg.out_dir();
    let labeled: Vec<PatientRecord> = table.records.iter().filter(|r| r.label.is_some()).cloned().collect();
    let recurrence = labeled.iter().filter(|r| r.label.is_some_and(|l| l.is_recurrence())).count();
    let mut distributions: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for r in &labeled {
        for (var, value) in r.categorical_values() {
            *distributions.entry(var.to_string()).or_default().entry(value.to_string()).or_default() += 1;
        }
    }
    let desc = descriptive(&labeled, &out.join("descriptive.tsv"))?;
    let summary = CohortSummary {
        records: table.records.len(),
        rejects: table.rejects,
        warnings: table.warnings,
        labeled: labeled.len(),
        recurrence,
        no_recurrence: labeled.len() - recurrence,
        distributions,
    };
    write_json(&out.join("cohort.json"), &summary)?;
    if let Some(p) = optional(&cfg.paths.annotations, "annotations")? {
        let agreement = kappa_from_csv(p)?;
        println!("kappa {:.4} over {} pairs", agreement.kappa, agreement.pairs);
        write_json(&out.join("kappa.json"), &agreement)?;
    }
    println!(
        "{} labeled patients ({} recurrence); {} descriptive rows",
        summary.labeled,
        summary.recurrence,
        desc.rows.len()
    );
    Ok(())
}
