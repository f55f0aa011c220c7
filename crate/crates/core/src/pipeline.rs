//! Glue from notes and patient records to per-variant feature matrices.
//!
//! [`preprocess`] turns a filtered corpus into the sentence store.
//! [`narrative_features`] tags it into per-patient concept and token counts,
//! and [`Cohort`] joins those with the structured records. [`FittedFeatures`]
//! holds every fit-dependent step (encoder, TF-IDF, chi-square selection) so
//! a fold's test rows are built with training state only.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clinical::{ClinicalEncoder, ClinicalError, PatientRecord};
use crate::concept::{self, ConceptError, ConceptMention, Cui, Lexicon, PatientConceptVector};
use crate::corpus::{self, ClinicalNote, Corpus, CueLexicon, FilterReport, Sentence};
use crate::features::{
    self, AssemblyInputs, FeatureError, FeatureMatrix, TfidfVectorizer, Variant, VariantConfig,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Clinical(#[from] ClinicalError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error("sentence store: {0}")]
    Io(#[from] std::io::Error),
    #[error("sentence store: {0}")]
    Json(#[from] serde_json::Error),
    #[error("row index {0} out of range")]
    RowIndex(usize),
    #[error("no labeled patients")]
    NoLabels,
}

/// Which contextual filters run during preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextOptions {
    pub sentence_cues: bool,
    pub negex: bool,
}

impl Default for ContextOptions {
    fn default() -> Self {
        ContextOptions {
            sentence_cues: true,
            negex: true,
        }
    }
}

impl ContextOptions {
    pub fn disabled() -> Self {
        ContextOptions {
            sentence_cues: false,
            negex: false,
        }
    }
}

/// One surviving sentence with its negation mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessedSentence {
    pub patient_id: String,
    #[serde(flatten)]
    pub sentence: Sentence,
    pub negated: Vec<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceReport {
    pub notes: usize,
    pub sentences: usize,
    pub cue_dropped: usize,
    pub kept: usize,
    pub negated_tokens: usize,
}

/// Segments every note, drops cued sentences and computes NegEx masks.
pub fn preprocess(corpus: &Corpus, cues: &CueLexicon, options: ContextOptions) -> (Vec<ProcessedSentence>, SentenceReport) {
    let mut report = SentenceReport {
        notes: corpus.len(),
        ..SentenceReport::default()
    };
    let mut out = Vec::new();
    for note in &corpus.notes {
        let sentences = corpus::segment(note);
        report.sentences += sentences.len();
        let sentences = if options.sentence_cues {
            let (kept, dropped) = corpus::drop_cued_sentences(sentences, cues);
            report.cue_dropped += dropped;
            kept
        } else {
            sentences
        };
        for sentence in sentences {
            let negated = if options.negex {
                corpus::negex_scope(&sentence.tokens, cues)
            } else {
                vec![false; sentence.tokens.len()]
            };
            report.negated_tokens += negated.iter().filter(|&&m| m).count();
            out.push(ProcessedSentence {
                patient_id: note.patient_id.clone(),
                sentence,
                negated,
            });
        }
    }
    report.kept = out.len();
    (out, report)
}

pub fn write_sentences<W: Write>(sentences: &[ProcessedSentence], mut out: W) -> Result<(), PipelineError> {
    for s in sentences {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_sentences<R: BufRead>(reader: R) -> Result<Vec<ProcessedSentence>, PipelineError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Narrative-derived counts for one patient.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NarrativeCounts {
    /// Non-negated mentions of dictionary CUIs.
    pub filtered: BTreeMap<Cui, u32>,
    /// Non-negated mentions of any tagged CUI.
    pub full: BTreeMap<Cui, u32>,
    /// Token counts over surviving sentences.
    pub tokens: BTreeMap<String, u32>,
}

/// Tags the sentence store and aggregates per patient.
pub fn narrative_features(
    sentences: &[ProcessedSentence],
    lexicon: &Lexicon,
    min_score: f64,
) -> Result<BTreeMap<String, NarrativeCounts>, PipelineError> {
    let dictionary = lexicon.custom_dictionary();
    let mut mentions: BTreeMap<&str, Vec<ConceptMention>> = BTreeMap::new();
    let mut out: BTreeMap<String, NarrativeCounts> = BTreeMap::new();
    for s in sentences {
        mentions
            .entry(&s.patient_id)
            .or_default()
            .extend(concept::tag(&s.sentence, &s.negated, lexicon)?);
        let tokens = &mut out.entry(s.patient_id.clone()).or_default().tokens;
        for t in &s.sentence.tokens {
            *tokens.entry(t.clone()).or_default() += 1;
        }
    }
    for (pid, ms) in mentions {
        let entry = out.entry(pid.to_string()).or_default();
        entry.filtered = concept::aggregate(pid, &ms, Some(&dictionary), min_score).counts;
        entry.full = concept::aggregate(pid, &ms, None, min_score).counts;
    }
    Ok(out)
}

/// A labeled patient with everything needed to build any variant.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientFeatures {
    pub record: PatientRecord,
    pub narrative: NarrativeCounts,
    pub label: bool,
}

/// Labeled patients plus the dictionary that defines filtered-concept columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub patients: Vec<PatientFeatures>,
    pub dictionary: Vec<Cui>,
}

impl Cohort {
    /// Joins records and narrative counts. Unlabeled records are skipped;
    /// patients with no surviving sentences get empty narrative counts.
    pub fn build(
        records: &[PatientRecord],
        narrative: &BTreeMap<String, NarrativeCounts>,
        dictionary: &BTreeSet<Cui>,
    ) -> Result<Self, PipelineError> {
        let patients: Vec<PatientFeatures> = records
            .iter()
            .filter_map(|r| {
                r.label.map(|l| PatientFeatures {
                    record: r.clone(),
                    narrative: narrative.get(&r.patient_id).cloned().unwrap_or_default(),
                    label: l.is_recurrence(),
                })
            })
            .collect();
        if patients.is_empty() {
            return Err(PipelineError::NoLabels);
        }
        Ok(Cohort {
            patients,
            dictionary: dictionary.iter().cloned().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.patients.iter().map(|p| p.label).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    fn subset(&self, idx: &[usize]) -> Result<Vec<&PatientFeatures>, PipelineError> {
        idx.iter()
            .map(|&i| self.patients.get(i).ok_or(PipelineError::RowIndex(i)))
            .collect()
    }
}

fn vectors(patients: &[&PatientFeatures], pick: impl Fn(&NarrativeCounts) -> &BTreeMap<Cui, u32>) -> Vec<PatientConceptVector> {
    patients
        .iter()
        .map(|p| PatientConceptVector {
            patient_id: p.record.patient_id.clone(),
            counts: pick(&p.narrative).clone(),
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub filter: FilterReport,
    pub sentences: SentenceReport,
}

/// Filter, preprocess and tag `notes`, then join with `records`.
pub fn cohort_from_notes(
    notes: Vec<ClinicalNote>,
    records: &[PatientRecord],
    lexicon: &Lexicon,
    cues: &CueLexicon,
    options: ContextOptions,
    censor_date: NaiveDate,
) -> Result<(Cohort, BuildReport), PipelineError> {
    let dx = records
        .iter()
        .filter_map(|r| r.diagnosis_date.map(|d| (r.patient_id.clone(), d)))
        .collect();
    let (corpus, filter) = corpus::filter_notes(Corpus { notes }, &dx, censor_date);
    let (sentences, sentence_report) = preprocess(&corpus, cues, options);
    let narrative = narrative_features(&sentences, lexicon, 1.0)?;
    let cohort = Cohort::build(records, &narrative, &lexicon.custom_dictionary())?;
    Ok((
        cohort,
        BuildReport {
            filter,
            sentences: sentence_report,
        },
    ))
}

/// Fit-dependent state for one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedFeatures {
    pub config: VariantConfig,
    pub dictionary: Vec<Cui>,
    encoder: Option<ClinicalEncoder>,
    /// Candidate full-concept columns: CUIs seen in training.
    full_vocabulary: Option<Vec<Cui>>,
    tfidf: Option<TfidfVectorizer>,
    /// Column names surviving chi-square selection.
    selected: Option<Vec<String>>,
}

impl FittedFeatures {
    /// Fits on `cohort[idx]` and returns the training matrix.
    pub fn fit(config: VariantConfig, cohort: &Cohort, idx: &[usize]) -> Result<(Self, FeatureMatrix), PipelineError> {
        config.validate()?;
        let train = cohort.subset(idx)?;
        let mut fitted = FittedFeatures {
            config,
            dictionary: cohort.dictionary.clone(),
            encoder: None,
            full_vocabulary: None,
            tfidf: None,
            selected: None,
        };
        let variant = config.variant;
        if variant.needs_clinical() {
            let mut enc = ClinicalEncoder::new();
            let records: Vec<PatientRecord> = train.iter().map(|p| p.record.clone()).collect();
            enc.fit(&records)?;
            fitted.encoder = Some(enc);
        }
        if variant == Variant::FullConcepts {
            let vocab: BTreeSet<Cui> = train.iter().flat_map(|p| p.narrative.full.keys().cloned()).collect();
            fitted.full_vocabulary = Some(vocab.into_iter().collect());
        }
        if variant == Variant::BagOfWords {
            let docs: Vec<BTreeMap<String, u32>> = train.iter().map(|p| p.narrative.tokens.clone()).collect();
            fitted.tfidf = Some(TfidfVectorizer::fit(&docs)?);
        }
        if variant.uses_chi2() {
            let pre = fitted.pre_selection(&train)?;
            let kept = features::chi2_select(&pre, config.chi2_keep_fraction)?;
            fitted.selected = Some(kept.columns().iter().map(|c| c.name.clone()).collect());
        }
        let matrix = fitted.transform(cohort, idx)?;
        Ok((fitted, matrix))
    }

    /// The labeled matrix before chi-square selection.
    fn pre_selection(&self, patients: &[&PatientFeatures]) -> Result<FeatureMatrix, PipelineError> {
        let ids: Vec<String> = patients.iter().map(|p| p.record.patient_id.clone()).collect();
        let labels: Vec<bool> = patients.iter().map(|p| p.label).collect();
        let enc = self.config.concept_encoding;
        let filtered;
        let full;
        let clinical;
        let bow;
        let mut inputs = AssemblyInputs::default();
        if self.config.variant.needs_filtered_concepts() {
            filtered = features::concept_matrix(&vectors(patients, |n| &n.filtered), &self.dictionary, enc)?;
            inputs.filtered_concepts = Some(&filtered);
        }
        if let Some(vocab) = &self.full_vocabulary {
            full = features::concept_matrix(&vectors(patients, |n| &n.full), vocab, enc)?.with_labels(labels.clone())?;
            inputs.full_concepts = Some(&full);
        }
        if let Some(encoder) = &self.encoder {
            let records: Vec<&PatientRecord> = patients.iter().map(|p| &p.record).collect();
            clinical = encoder.encode_all(&records)?;
            inputs.clinical = Some(&clinical);
        }
        if let Some(tfidf) = &self.tfidf {
            let docs: Vec<BTreeMap<String, u32>> = patients.iter().map(|p| p.narrative.tokens.clone()).collect();
            bow = tfidf.transform(ids, &docs)?.with_labels(labels.clone())?;
            inputs.bag_of_words = Some(&bow);
        }
        let m = match self.config.variant {
            Variant::FullConcepts => full_ref(inputs.full_concepts)?.clone(),
            Variant::BagOfWords => full_ref(inputs.bag_of_words)?.clone(),
            _ => features::assemble(&self.config, inputs)?,
        };
        Ok(m.with_labels(labels)?)
    }

    /// Builds `cohort[idx]` with the fitted state.
    pub fn transform(&self, cohort: &Cohort, idx: &[usize]) -> Result<FeatureMatrix, PipelineError> {
        let patients = cohort.subset(idx)?;
        let pre = self.pre_selection(&patients)?;
        Ok(match &self.selected {
            Some(names) => pre.select_columns_by_name(names)?,
            None => pre,
        })
    }
}

fn full_ref(m: Option<&FeatureMatrix>) -> Result<&FeatureMatrix, PipelineError> {
    m.ok_or_else(|| FeatureError::RowMismatch("variant input missing".into()).into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clinical::{parse_record, Label, RawPatientRow};

    fn note(pid: &str, id: &str, text: &str) -> ClinicalNote {
        ClinicalNote {
            patient_id: pid.into(),
            note_id: id.into(),
            note_type: corpus::NoteType::Progress,
            date: NaiveDate::from_ymd_opt(2012, 1, 1).unwrap(),
            text: text.into(),
        }
    }

    fn record(pid: &str, age: &str, label: bool) -> PatientRecord {
        let mut r = parse_record(&RawPatientRow {
            patient_id: Some(pid.into()),
            age_of_diagnosis: Some(age.into()),
            insurance: Some(if label { "PPO" } else { "HMO" }.into()),
            ..Default::default()
        })
        .unwrap()
        .record;
        r.label = Some(if label { Label::DistantRecurrence } else { Label::NoDistantRecurrence });
        r
    }

    fn small_cohort() -> Cohort {
        let corpus = Corpus {
            notes: vec![
                note("a", "1", "Breast cancer follow up. Bone metastases seen on scan. Liver metastases present."),
                note("b", "2", "Breast exam. No evidence of bone metastases."),
                note("c", "3", "Breast cancer. Imaging negative for brain metastases. Patient doing well."),
                note("d", "4", "Breast cancer with brain metastases. Rule out liver metastases."),
            ],
        };
        let (sentences, _) = preprocess(&corpus, &CueLexicon::default_cues(), ContextOptions::default());
        let lex = Lexicon::default_lexicon();
        let narrative = narrative_features(&sentences, &lex, 1.0).unwrap();
        let records = vec![record("a", "50", true), record("b", "60", false), record("c", "40", false), record("d", "70", true)];
        Cohort::build(&records, &narrative, &lex.custom_dictionary()).unwrap()
    }

    #[test]
    fn preprocess_counts_and_masks() {
        let corpus = Corpus {
            notes: vec![note("a", "1", "Breast. No pain today. Negative for bone metastases.")],
        };
        let cues = CueLexicon::default_cues();
        let (s, report) = preprocess(&corpus, &cues, ContextOptions::default());
        assert_eq!(report.sentences, 3);
        assert_eq!(report.cue_dropped, 1);
        assert_eq!(s.len(), 2);
        assert!(s[1].negated.iter().skip(2).all(|&m| m));
        let (s, report) = preprocess(&corpus, &cues, ContextOptions::disabled());
        assert_eq!((report.cue_dropped, s.len(), report.negated_tokens), (0, 3, 0));
    }

    #[test]
    fn sentence_store_roundtrip() {
        let corpus = Corpus {
            notes: vec![note("a", "1", "Breast. Negative for bone metastases.")],
        };
        let (s, _) = preprocess(&corpus, &CueLexicon::default_cues(), ContextOptions::default());
        let mut buf = Vec::new();
        write_sentences(&s, &mut buf).unwrap();
        assert_eq!(read_sentences(&buf[..]).unwrap(), s);
    }

    #[test]
    fn narrative_filters_negated_and_cued() {
        let c = small_cohort();
        let bone: Cui = "C0153690".parse().unwrap();
        let brain: Cui = "C0220650".parse().unwrap();
        let liver: Cui = "C0494165".parse().unwrap();
        assert_eq!(c.patients[0].narrative.filtered.get(&bone), Some(&1));
        assert_eq!(c.patients[0].narrative.filtered.get(&liver), Some(&1));
        assert!(c.patients[1].narrative.filtered.is_empty());
        assert!(c.patients[2].narrative.filtered.get(&brain).is_none());
        assert_eq!(c.patients[3].narrative.filtered.get(&brain), Some(&1));
        assert!(c.patients[3].narrative.filtered.get(&liver).is_none());
    }

    #[test]
    fn variant_widths() {
        let c = small_cohort();
        let idx = c.all_indices();
        let (_, m) = FittedFeatures::fit(VariantConfig::new(Variant::FilteredPlusClinical), &c, &idx).unwrap();
        assert_eq!(m.variable_count(), 12 + 18);
        let (_, m) = FittedFeatures::fit(VariantConfig::new(Variant::FilteredConcepts), &c, &idx).unwrap();
        assert_eq!(m.variable_count(), 12);
        let (_, m) = FittedFeatures::fit(VariantConfig::new(Variant::ClinicalOnly), &c, &idx).unwrap();
        assert_eq!(m.variable_count(), 18);
        let (_, m) = FittedFeatures::fit(VariantConfig::new(Variant::BagOfWords), &c, &idx).unwrap();
        assert!(m.n_cols() >= 1);
        assert_eq!(m.labels().unwrap(), &[true, false, false, true]);
    }

    #[test]
    fn transform_reproduces_training_matrix() {
        let c = small_cohort();
        for v in Variant::ALL {
            let (fitted, m) = FittedFeatures::fit(VariantConfig::new(v), &c, &[0, 1, 3]).unwrap();
            assert_eq!(fitted.transform(&c, &[0, 1, 3]).unwrap(), m, "{v}");
            let test = fitted.transform(&c, &[2]).unwrap();
            assert_eq!(test.columns(), m.columns());
        }
    }

    #[test]
    fn fitted_state_serializes() {
        let c = small_cohort();
        let (fitted, m) = FittedFeatures::fit(VariantConfig::new(Variant::BagOfWords), &c, &c.all_indices()).unwrap();
        let json = serde_json::to_string(&fitted).unwrap();
        let back: FittedFeatures = serde_json::from_str(&json).unwrap();
        assert_eq!(back.transform(&c, &c.all_indices()).unwrap(), m);
    }
}
