//! Synthetic labeled cohorts with a known generative model.
//!
//! Labels are Bernoulli(prevalence). Structured variables are drawn from
//! class-conditional categoricals and concept mentions from class-conditional
//! Poisson counts. Negated and uncertain mentions and distractor sentences
//! are class-independent. [`bayes_oracle`] scores each patient with the exact
//! log-likelihood ratio of the generator.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clinical::{self, PatientRecord, RawPatientRow};
use crate::concept::{ConceptError, Cui, Lexicon, LexiconEntry};
use crate::corpus::{ClinicalNote, NoteType};
use crate::stats;

const DEFAULT_SPEC: &str = include_str!("../data/generator_default.toml");

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("generator spec: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("generator spec: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error("cohort does not match spec: {0}")]
    Mismatch(String),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> SynthError {
    SynthError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

/// Class-conditional distribution of one categorical variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalSpec {
    pub categories: Vec<String>,
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

impl CategoricalSpec {
    fn independent(categories: &[&str], p: &[f64]) -> Self {
        CategoricalSpec {
            categories: categories.iter().map(|s| s.to_string()).collect(),
            pos: p.to_vec(),
            neg: p.to_vec(),
        }
    }

    fn conditional(categories: &[&str], pos: &[f64], neg: &[f64]) -> Self {
        CategoricalSpec {
            categories: categories.iter().map(|s| s.to_string()).collect(),
            pos: pos.to_vec(),
            neg: neg.to_vec(),
        }
    }
}

/// Poisson mention rates for one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub cui: Cui,
    pub phrase: String,
    pub lambda_pos: f64,
    pub lambda_neg: f64,
    /// Whether the CUI belongs to the custom dictionary.
    pub dictionary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n: usize,
    pub prevalence: f64,
    pub seed: u64,
    pub age_mean: f64,
    pub age_sd: f64,
    /// Mean negated mentions per patient.
    pub negated_rate: f64,
    /// Mean uncertainty sentences per patient.
    pub uncertainty_rate: f64,
    /// Mean neutral sentences per patient.
    pub distractor_rate: f64,
    pub sentences_per_note: usize,
    pub variables: BTreeMap<String, CategoricalSpec>,
    pub concepts: Vec<ConceptSpec>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec::from_toml(DEFAULT_SPEC).expect("shipped generator spec is valid")
    }
}

const YES_NO: [&str; 2] = ["Yes", "No"];
const STATUS: [&str; 3] = ["Positive", "Negative", "Unknown"];

/// The built-in spec, calibrated to the published recurrence-group rates.
/// Variables without published rates are class-independent.
pub fn builtin_spec() -> GeneratorSpec {
    let mut v = BTreeMap::new();
    let ind = CategoricalSpec::independent;
    let cond = CategoricalSpec::conditional;
    v.insert("race".into(), ind(&["White", "Black", "Asian", "Other"], &[0.7, 0.15, 0.05, 0.1]));
    v.insert("smoking".into(), ind(&["Yes", "No", "Ex-smoker", "Unknown"], &[0.1, 0.6, 0.2, 0.1]));
    v.insert("alcohol".into(), ind(&["No", "Moderate", "Heavy", "Former", "Unknown"], &[0.4, 0.35, 0.05, 0.05, 0.15]));
    v.insert("family_cancer_history".into(), ind(&["Yes", "No", "Unknown"], &[0.4, 0.4, 0.2]));
    v.insert("insurance".into(), ind(&["PPO", "HMO", "Medicare", "Medicaid"], &[0.45, 0.25, 0.2, 0.1]));
    v.insert("er".into(), ind(&STATUS, &[0.7, 0.25, 0.05]));
    v.insert("pr".into(), ind(&STATUS, &[0.6, 0.35, 0.05]));
    v.insert("her2".into(), ind(&STATUS, &[0.2, 0.7, 0.1]));
    v.insert("p53".into(), ind(&STATUS, &[0.2, 0.3, 0.5]));
    v.insert("nodal_positivity".into(), cond(&STATUS, &[0.534, 0.436, 0.03], &[0.245, 0.725, 0.03]));
    v.insert("histology".into(), cond(&["IDC", "DCIS", "ILC", "Unknown"], &[0.902, 0.016, 0.078, 0.004], &[0.752, 0.153, 0.078, 0.017]));
    v.insert("grade".into(), cond(&["Grade1", "Grade2", "Grade3", "Unknown"], &[0.083, 0.378, 0.523, 0.016], &[0.245, 0.432, 0.313, 0.01]));
    v.insert("size".into(), ind(&["0-2cm", "2-5cm", ">5cm", "Unknown"], &[0.45, 0.35, 0.1, 0.1]));
    v.insert("surgery".into(), ind(&["Mastectomy", "BreastConservation", "No", "Unknown"], &[0.4, 0.45, 0.1, 0.05]));
    v.insert("deceased".into(), cond(&YES_NO, &[0.508, 0.492], &[0.033, 0.967]));
    v.insert("targeted_therapy".into(), cond(&YES_NO, &[0.228, 0.772], &[0.009, 0.991]));
    v.insert("radiation".into(), cond(&YES_NO, &[0.269, 0.731], &[0.008, 0.992]));

    let c = |cui: &str, phrase: &str, lp: f64, ln: f64, dictionary: bool| ConceptSpec {
        cui: cui.parse().expect("valid CUI"),
        phrase: phrase.into(),
        lambda_pos: lp,
        lambda_neg: ln,
        dictionary,
    };
    let concepts = vec![
        c("C0153678", "cancer metastatic to pleura", 0.155, 0.01, true),
        c("C0153690", "bone metastases", 0.44, 0.08, true),
        c("C1967552", "ixempra", 0.13, 0.01, true),
        c("C0278488", "metastatic breast cancer", 0.575, 0.15, true),
        c("C0494165", "liver metastases", 0.27, 0.04, true),
        c("C0220650", "brain metastases", 0.19, 0.03, true),
        c("C1266909", "bone", 0.45, 0.3, true),
        c("C0027627", "metastatic disease", 0.41, 0.12, true),
        c("C0036525", "metastatic", 0.55, 0.3, true),
        c("C0346993", "metastatic breast cancer to the", 0.16, 0.02, true),
        c("C0015672", "fatigue", 0.6, 0.6, false),
        c("C0600142", "hot flashes", 0.4, 0.4, false),
        c("C0003862", "arthralgia", 0.3, 0.3, false),
        c("C0024236", "lymphedema", 0.2, 0.2, false),
        c("C0020538", "hypertension", 0.3, 0.3, false),
        c("C0917801", "insomnia", 0.2, 0.2, false),
    ];

    GeneratorSpec {
        n: 5000,
        prevalence: 0.099,
        seed: 20200,
        age_mean: 57.0,
        age_sd: 12.0,
        negated_rate: 3.0,
        uncertainty_rate: 2.0,
        distractor_rate: 3.0,
        sentences_per_note: 6,
        variables: v,
        concepts,
    }
}

fn check_prob(field: &str, p: f64) -> Result<(), SynthError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(invalid(field, format!("probability {p} outside [0, 1]")))
    }
}

fn check_simplex(field: &str, ps: &[f64], len: usize) -> Result<(), SynthError> {
    if ps.len() != len {
        return Err(invalid(field, format!("expected {len} probabilities, found {}", ps.len())));
    }
    for &p in ps {
        check_prob(field, p)?;
    }
    let sum: f64 = ps.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(invalid(field, format!("invalid simplex: probabilities sum to {sum}")));
    }
    Ok(())
}

fn category_known(variable: &str, category: &str) -> bool {
    if variable == "insurance" {
        return !category.trim().is_empty();
    }
    clinical::variable_domain(variable).contains(&category)
}

impl GeneratorSpec {
    pub fn from_toml(s: &str) -> Result<Self, SynthError> {
        let spec: GeneratorSpec = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(invalid("prevalence", format!("{} outside (0, 1)", self.prevalence)));
        }
        if !(self.age_sd > 0.0 && self.age_mean > 0.0 && self.age_mean < 130.0) {
            return Err(invalid("age", "mean must be in (0, 130) and sd positive"));
        }
        for (field, r) in [
            ("negated_rate", self.negated_rate),
            ("uncertainty_rate", self.uncertainty_rate),
            ("distractor_rate", self.distractor_rate),
        ] {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(invalid(field, format!("rate {r} must be finite and non-negative")));
            }
        }
        if self.sentences_per_note == 0 {
            return Err(invalid("sentences_per_note", "must be positive"));
        }
        for var in &clinical::CLINICAL_VARIABLES[1..] {
            let Some(vs) = self.variables.get(*var) else {
                return Err(invalid(format!("variables.{var}"), "missing"));
            };
            if vs.categories.is_empty() {
                return Err(invalid(format!("variables.{var}"), "no categories"));
            }
            for cat in &vs.categories {
                if !category_known(var, cat) {
                    return Err(invalid(format!("variables.{var}"), format!("unknown category '{cat}'")));
                }
            }
            let distinct: BTreeSet<&String> = vs.categories.iter().collect();
            if distinct.len() != vs.categories.len() {
                return Err(invalid(format!("variables.{var}"), "duplicate category"));
            }
            check_simplex(&format!("variables.{var}.pos"), &vs.pos, vs.categories.len())?;
            check_simplex(&format!("variables.{var}.neg"), &vs.neg, vs.categories.len())?;
        }
        if let Some(extra) = self
            .variables
            .keys()
            .find(|k| !clinical::CLINICAL_VARIABLES[1..].contains(&k.as_str()))
        {
            return Err(invalid(format!("variables.{extra}"), "not a categorical clinical variable"));
        }
        let mut seen = BTreeSet::new();
        for (i, c) in self.concepts.iter().enumerate() {
            let field = format!("concepts[{i}]");
            if !seen.insert(&c.cui) {
                return Err(invalid(field, format!("duplicate CUI {}", c.cui)));
            }
            if !(c.lambda_pos >= 0.0 && c.lambda_neg >= 0.0 && c.lambda_pos.is_finite() && c.lambda_neg.is_finite()) {
                return Err(invalid(field, "rates must be finite and non-negative"));
            }
            if crate::text::tokenize(&c.phrase).is_empty() {
                return Err(invalid(field, "empty phrase"));
            }
        }
        Ok(())
    }

    /// Default lexicon plus any spec concept it lacks.
    pub fn lexicon(&self) -> Result<Lexicon, SynthError> {
        let base = Lexicon::default_lexicon();
        let mut entries = base.entries().to_vec();
        for c in &self.concepts {
            if base.get(&c.cui).is_none() {
                entries.push(LexiconEntry::new(c.cui.as_str(), &c.phrase, &[&c.phrase], c.dictionary)?);
            }
        }
        Ok(Lexicon::new(entries)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub records: Vec<PatientRecord>,
    pub notes: Vec<ClinicalNote>,
    pub labels: Vec<bool>,
    /// Per patient, the emitted non-negated mention count of every concept.
    pub true_counts: Vec<BTreeMap<Cui, u32>>,
}

impl SyntheticCohort {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn diagnosis_dates(&self) -> std::collections::HashMap<String, NaiveDate> {
        self.records
            .iter()
            .filter_map(|r| r.diagnosis_date.map(|d| (r.patient_id.clone(), d)))
            .collect()
    }
}

const MENTION_TEMPLATES: [&str; 4] = [
    "Imaging shows {}.",
    "Findings consistent with {}.",
    "Patient treated for {}.",
    "Oncology follow up for {}.",
];
const NEGATED_TEMPLATES: [&str; 2] = ["No evidence of {}.", "Negative for {}."];
const UNCERTAIN_TEMPLATES: [&str; 3] = ["Concern for {}.", "Evaluation for {}.", "Risk of {}."];
const DISTRACTORS: [&str; 6] = [
    "Patient tolerating treatment well.",
    "Follow up scheduled in three months.",
    "Discussed diet and exercise.",
    "Vital signs stable.",
    "Mammogram of the left breast reviewed.",
    "Medication list reconciled.",
];

fn fill(template: &str, phrase: &str) -> String {
    template.replace("{}", phrase)
}

fn draw_category(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding slack: last category with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u32 {
    if lambda <= 0.0 {
        0
    } else {
        Poisson::new(lambda).expect("positive rate").sample(rng) as u32
    }
}

struct PatientDraw {
    record: PatientRecord,
    notes: Vec<ClinicalNote>,
    label: bool,
    counts: BTreeMap<Cui, u32>,
}

fn patient_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

fn draw_patient(spec: &GeneratorSpec, i: usize) -> PatientDraw {
    let mut rng = patient_rng(spec.seed, i);
    let label = Bernoulli::new(spec.prevalence).expect("valid prevalence").sample(&mut rng);
    let pid = format!("P{i:06}");

    let age_dist = Normal::new(spec.age_mean, spec.age_sd).expect("valid age distribution");
    let age = loop {
        let a: f64 = age_dist.sample(&mut rng);
        if (20.0..=95.0).contains(&a) {
            break (a * 10.0).round() / 10.0;
        }
    };

    let mut raw = RawPatientRow {
        patient_id: Some(pid.clone()),
        age_of_diagnosis: Some(format!("{age}")),
        label: Some(if label { "DistantRecurrence" } else { "NoDistantRecurrence" }.into()),
        ..Default::default()
    };
    for var in &clinical::CLINICAL_VARIABLES[1..] {
        let vs = &spec.variables[*var];
        let k = draw_category(&mut rng, if label { &vs.pos } else { &vs.neg });
        let value = Some(vs.categories[k].clone());
        match *var {
            "race" => raw.race = value,
            "smoking" => raw.smoking = value,
            "alcohol" => raw.alcohol = value,
            "family_cancer_history" => raw.family_cancer_history = value,
            "insurance" => raw.insurance = value,
            "er" => raw.er = value,
            "pr" => raw.pr = value,
            "her2" => raw.her2 = value,
            "p53" => raw.p53 = value,
            "nodal_positivity" => raw.nodal_positivity = value,
            "histology" => raw.histology = value,
            "grade" => raw.grade = value,
            "size" => raw.size = value,
            "surgery" => raw.surgery = value,
            "deceased" => raw.deceased = value,
            "targeted_therapy" => raw.targeted_therapy = value,
            "radiation" => raw.radiation = value,
            _ => unreachable!("validated variable"),
        }
    }
    let base = NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date");
    let dx = base + Duration::days(rng.random_range(0..3650));
    raw.diagnosis_date = Some(dx.format("%Y-%m-%d").to_string());
    let record = clinical::parse_record(&raw).expect("generated row is valid").record;

    let mut sentences: Vec<String> = Vec::new();
    let mut counts = BTreeMap::new();
    for c in &spec.concepts {
        let k = poisson(&mut rng, if label { c.lambda_pos } else { c.lambda_neg });
        counts.insert(c.cui.clone(), k);
        for _ in 0..k {
            let t = MENTION_TEMPLATES.choose(&mut rng).expect("non-empty");
            sentences.push(fill(t, &c.phrase));
        }
    }
    let context_pool: Vec<&ConceptSpec> = spec
        .concepts
        .iter()
        .filter(|c| c.dictionary && (c.lambda_pos > 0.0 || c.lambda_neg > 0.0))
        .collect();
    if !context_pool.is_empty() {
        for (rate, templates) in [
            (spec.negated_rate, &NEGATED_TEMPLATES[..]),
            (spec.uncertainty_rate, &UNCERTAIN_TEMPLATES[..]),
        ] {
            for _ in 0..poisson(&mut rng, rate) {
                let c = context_pool.choose(&mut rng).expect("non-empty");
                let t = templates.choose(&mut rng).expect("non-empty");
                sentences.push(fill(t, &c.phrase));
            }
        }
    }
    for _ in 0..poisson(&mut rng, spec.distractor_rate) {
        sentences.push(DISTRACTORS.choose(&mut rng).expect("non-empty").to_string());
    }
    rand::seq::SliceRandom::shuffle(&mut sentences[..], &mut rng);

    let n_notes = sentences.len().div_ceil(spec.sentences_per_note).max(1);
    let mut notes = Vec::with_capacity(n_notes);
    let mut offsets: Vec<i64> = (0..n_notes).map(|_| rng.random_range(30..1800)).collect();
    offsets.sort_unstable();
    for (j, offset) in offsets.into_iter().enumerate() {
        let body: Vec<&str> = sentences
            .iter()
            .skip(j * spec.sentences_per_note)
            .take(spec.sentences_per_note)
            .map(String::as_str)
            .collect();
        let mut text = format!("Breast clinic visit {}.", j + 1);
        for s in body {
            text.push(' ');
            text.push_str(s);
        }
        notes.push(ClinicalNote {
            patient_id: pid.clone(),
            note_id: format!("{pid}-{j}"),
            note_type: NoteType::Progress,
            date: dx + Duration::days(offset),
            text,
        });
    }

    PatientDraw {
        record,
        notes,
        label,
        counts,
    }
}

/// Draws `spec.n` patients. Each patient uses its own stream of the seeded
/// generator, so output does not depend on thread count.
pub fn generate(spec: &GeneratorSpec) -> Result<SyntheticCohort, SynthError> {
    spec.validate()?;
    let draws: Vec<PatientDraw> = (0..spec.n).into_par_iter().map(|i| draw_patient(spec, i)).collect();
    let mut cohort = SyntheticCohort {
        records: Vec::with_capacity(spec.n),
        notes: Vec::new(),
        labels: Vec::with_capacity(spec.n),
        true_counts: Vec::with_capacity(spec.n),
    };
    for d in draws {
        cohort.records.push(d.record);
        cohort.notes.extend(d.notes);
        cohort.labels.push(d.label);
        cohort.true_counts.push(d.counts);
    }
    Ok(cohort)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// `None` when the cohort lacks one of the classes.
    pub bayes_auc: Option<f64>,
    /// Log-likelihood ratios; infinite when an observation is impossible
    /// under one class.
    pub scores: Vec<f64>,
}

fn log_ratio(p: f64, q: f64) -> f64 {
    if p == q {
        0.0
    } else {
        p.ln() - q.ln()
    }
}

/// Exact `log P(obs | DR) − log P(obs | no DR)` per patient from the
/// categorical values and the emitted non-negated concept counts.
pub fn bayes_oracle(spec: &GeneratorSpec, cohort: &SyntheticCohort) -> Result<OracleResult, SynthError> {
    if cohort.records.len() != cohort.labels.len() || cohort.records.len() != cohort.true_counts.len() {
        return Err(SynthError::Mismatch("records, labels and counts differ in length".into()));
    }
    let mut scores = Vec::with_capacity(cohort.records.len());
    for (record, counts) in cohort.records.iter().zip(&cohort.true_counts) {
        let mut s = 0.0;
        for (var, vs) in &spec.variables {
            let value = record
                .categorical_value(var)
                .ok_or_else(|| SynthError::Mismatch(format!("unknown variable {var}")))?;
            let k = vs
                .categories
                .iter()
                .position(|c| c == value)
                .ok_or_else(|| SynthError::Mismatch(format!("{}: {var}={value} not in spec", record.patient_id)))?;
            s += log_ratio(vs.pos[k], vs.neg[k]);
        }
        if counts.len() != spec.concepts.len() {
            return Err(SynthError::Mismatch(format!("{}: concept set differs", record.patient_id)));
        }
        for c in &spec.concepts {
            let k = *counts
                .get(&c.cui)
                .ok_or_else(|| SynthError::Mismatch(format!("{}: missing count for {}", record.patient_id, c.cui)))?;
            if c.lambda_pos != c.lambda_neg {
                // k·ln(λp/λn) − (λp − λn), with 0·ln(0) = 0
                if k > 0 {
                    s += f64::from(k) * log_ratio(c.lambda_pos, c.lambda_neg);
                }
                s -= c.lambda_pos - c.lambda_neg;
            }
        }
        scores.push(s);
    }
    let has_both = cohort.labels.iter().any(|&l| l) && cohort.labels.iter().any(|&l| !l);
    let bayes_auc = if has_both {
        Some(stats::auc(&scores, &cohort.labels).map_err(|e| SynthError::Mismatch(e.to_string()))?)
    } else {
        None
    };
    Ok(OracleResult { bayes_auc, scores })
}

/// `patient_id,label` rows with label 1 for distant recurrence.
pub fn labels_csv(cohort: &SyntheticCohort) -> String {
    let mut out = String::from("patient_id,label\n");
    for (r, &l) in cohort.records.iter().zip(&cohort.labels) {
        out.push_str(&format!("{},{}\n", r.patient_id, u8::from(l)));
    }
    out
}
