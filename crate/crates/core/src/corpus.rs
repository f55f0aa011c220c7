//! Clinical note ingestion, relevance filtering, sentence segmentation and
//! contextual-cue handling.
//!
//! Notes arrive as JSON lines. After ingestion and deduplication, notes are
//! restricted to the post-diagnosis window, split into cleaned sentences, and
//! sentences carrying sentence-level negation or uncertainty cues are removed.
//! [`negex_scope`] computes per-token negation for the survivors.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{self, contains_phrase, find_phrase};

/// Tokens after a pre-trigger (or before a post-trigger) that fall in scope.
pub const NEGEX_WINDOW: usize = 5;

const DEFAULT_CUES: &str = include_str!("../data/default_cues.txt");

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read note stream: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to write notes: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("cue lexicon line {line}: {message}")]
    CueSyntax { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteType {
    Progress,
    Pathology,
    Telephone,
    AssessmentPlan,
    ProblemOverview,
    TreatmentSummary,
    Radiology,
    Lab,
    Procedural,
    Nursing,
    Other,
}

impl NoteType {
    pub const ALL: [NoteType; 11] = [
        NoteType::Progress,
        NoteType::Pathology,
        NoteType::Telephone,
        NoteType::AssessmentPlan,
        NoteType::ProblemOverview,
        NoteType::TreatmentSummary,
        NoteType::Radiology,
        NoteType::Lab,
        NoteType::Procedural,
        NoteType::Nursing,
        NoteType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NoteType::Progress => "progress",
            NoteType::Pathology => "pathology",
            NoteType::Telephone => "telephone",
            NoteType::AssessmentPlan => "assessment_plan",
            NoteType::ProblemOverview => "problem_overview",
            NoteType::TreatmentSummary => "treatment_summary",
            NoteType::Radiology => "radiology",
            NoteType::Lab => "lab",
            NoteType::Procedural => "procedural",
            NoteType::Nursing => "nursing",
            NoteType::Other => "other",
        }
    }

    /// Unrecognized type strings fold into [`NoteType::Other`].
    pub fn parse_lenient(s: &str) -> NoteType {
        let key = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        NoteType::ALL
            .into_iter()
            .find(|t| t.as_str() == key)
            .unwrap_or(NoteType::Other)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalNote {
    pub patient_id: String,
    pub note_id: String,
    pub note_type: NoteType,
    pub date: NaiveDate,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub notes: Vec<ClinicalNote>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestOutcome {
    pub corpus: Corpus,
    /// Rows rejected for missing fields, bad dates, bad JSON or reused note ids.
    pub rejects: usize,
    /// Exact duplicates collapsed into an earlier-dated copy.
    pub duplicates: usize,
}

#[derive(Debug, Default, Deserialize)]
struct RawNoteRow {
    patient_id: Option<String>,
    note_id: Option<String>,
    note_type: Option<String>,
    date: Option<String>,
    text: Option<String>,
}

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(d);
    }
    if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S") {
        return Some(dt.date());
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .ok()
        .map(|dt| dt.date_naive())
}

fn non_empty(v: Option<String>) -> Option<String> {
    v.filter(|s| !s.trim().is_empty())
}

/// Reads JSON-lines notes, rejecting malformed rows and collapsing per-patient
/// exact duplicates (after whitespace normalization) to the earliest-dated copy.
pub fn ingest<R: BufRead>(reader: R) -> Result<IngestOutcome, CorpusError> {
    let mut rejects = 0;
    let mut valid: Vec<ClinicalNote> = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();

    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Ok(row) = serde_json::from_str::<RawNoteRow>(&line) else {
            rejects += 1;
            continue;
        };
        let (Some(patient_id), Some(date), Some(text)) =
            (non_empty(row.patient_id), non_empty(row.date), row.text)
        else {
            rejects += 1;
            continue;
        };
        let Some(date) = parse_date(&date) else {
            rejects += 1;
            continue;
        };
        let note_id =
            non_empty(row.note_id).unwrap_or_else(|| format!("{patient_id}#{}", line_no + 1));
        if !seen_ids.insert(note_id.clone()) {
            rejects += 1;
            continue;
        }
        valid.push(ClinicalNote {
            patient_id,
            note_id,
            note_type: row
                .note_type
                .as_deref()
                .map(NoteType::parse_lenient)
                .unwrap_or(NoteType::Other),
            date,
            text,
        });
    }

    // (patient, normalized text) -> index of the retained copy
    let mut keep: HashMap<(String, String), usize> = HashMap::new();
    for (i, note) in valid.iter().enumerate() {
        let key = (note.patient_id.clone(), text::normalize_whitespace(&note.text));
        match keep.get_mut(&key) {
            Some(j) if valid[*j].date > note.date => *j = i,
            Some(_) => {}
            None => {
                keep.insert(key, i);
            }
        }
    }
    let retained: HashSet<usize> = keep.into_values().collect();
    let duplicates = valid.len() - retained.len();
    let notes = valid
        .into_iter()
        .enumerate()
        .filter(|(i, _)| retained.contains(i))
        .map(|(_, n)| n)
        .collect();

    Ok(IngestOutcome {
        corpus: Corpus { notes },
        rejects,
        duplicates,
    })
}

pub fn write_notes<W: Write>(notes: &[ClinicalNote], mut out: W) -> Result<(), CorpusError> {
    for note in notes {
        serde_json::to_writer(&mut out, note)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub notes_in: usize,
    pub notes_out: usize,
    pub missing_diagnosis: usize,
    pub before_diagnosis: usize,
    pub after_censor: usize,
    pub no_breast_mention: usize,
}

/// Keeps notes dated after the patient's diagnosis and no later than
/// `censor_date`, whose text mentions "breast" (case-insensitive).
pub fn filter_notes(
    corpus: Corpus,
    diagnosis_date_by_patient: &HashMap<String, NaiveDate>,
    censor_date: NaiveDate,
) -> (Corpus, FilterReport) {
    let mut report = FilterReport {
        notes_in: corpus.len(),
        ..FilterReport::default()
    };
    let notes: Vec<ClinicalNote> = corpus
        .notes
        .into_iter()
        .filter(|note| {
            let Some(&dx) = diagnosis_date_by_patient.get(&note.patient_id) else {
                report.missing_diagnosis += 1;
                return false;
            };
            if note.date <= dx {
                report.before_diagnosis += 1;
                false
            } else if note.date > censor_date {
                report.after_censor += 1;
                false
            } else if !note.text.to_ascii_lowercase().contains("breast") {
                report.no_breast_mention += 1;
                false
            } else {
                true
            }
        })
        .collect();
    report.notes_out = notes.len();
    (Corpus { notes }, report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub note_id: String,
    pub index: usize,
    pub text: String,
    pub tokens: Vec<String>,
}

/// Drops everything outside printable ASCII. ASCII whitespace controls
/// (tab, carriage return) become spaces so adjacent words stay apart.
pub fn clean_text(line: &str) -> String {
    line.chars()
        .filter_map(|c| match c {
            ' '..='~' => Some(c),
            '\t' | '\r' | '\x0b' | '\x0c' => Some(' '),
            _ => None,
        })
        .collect()
}

fn split_sentences(line: &str) -> Vec<&str> {
    let bytes = line.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..bytes.len() {
        if matches!(bytes[i], b'.' | b'?' | b'!')
            && bytes.get(i + 1).is_some_and(|b| b.is_ascii_whitespace())
        {
            out.push(&line[start..=i]);
            start = i + 1;
        }
    }
    out.push(&line[start..]);
    out
}

/// Splits on newlines and on `.`, `?` or `!` followed by whitespace. Sentences
/// without any alphanumeric token are discarded.
pub fn segment(note: &ClinicalNote) -> Vec<Sentence> {
    let mut sentences = Vec::new();
    for line in note.text.lines() {
        let cleaned = clean_text(line);
        for piece in split_sentences(&cleaned) {
            let tokens = text::tokenize(piece);
            if tokens.is_empty() {
                continue;
            }
            sentences.push(Sentence {
                note_id: note.note_id.clone(),
                index: sentences.len(),
                text: piece.trim().to_string(),
                tokens,
            });
        }
    }
    sentences
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueCategory {
    NegationSentence,
    UncertaintySentence,
    NegexTriggerPre,
    NegexTriggerPost,
    NegexTerminator,
}

impl CueCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            CueCategory::NegationSentence => "negation_sentence",
            CueCategory::UncertaintySentence => "uncertainty_sentence",
            CueCategory::NegexTriggerPre => "negex_trigger_pre",
            CueCategory::NegexTriggerPost => "negex_trigger_post",
            CueCategory::NegexTerminator => "negex_terminator",
        }
    }

    pub fn is_sentence_level(self) -> bool {
        matches!(
            self,
            CueCategory::NegationSentence | CueCategory::UncertaintySentence
        )
    }
}

impl fmt::Display for CueCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CueCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "negation_sentence" => Ok(CueCategory::NegationSentence),
            "uncertainty_sentence" => Ok(CueCategory::UncertaintySentence),
            "negex_trigger_pre" => Ok(CueCategory::NegexTriggerPre),
            "negex_trigger_post" => Ok(CueCategory::NegexTriggerPost),
            "negex_terminator" => Ok(CueCategory::NegexTerminator),
            other => Err(format!("unknown cue category '{other}'")),
        }
    }
}

/// A cue phrase plus the inflected surface forms that also count as a match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextCue {
    pub phrase: Vec<String>,
    pub category: CueCategory,
    pub inflections: Vec<Vec<String>>,
}

impl ContextCue {
    pub fn new(phrase: &str, category: CueCategory, inflections: &[&str]) -> Self {
        ContextCue {
            phrase: text::tokenize(phrase),
            category,
            inflections: inflections.iter().map(|s| text::tokenize(s)).collect(),
        }
    }

    pub fn forms(&self) -> impl Iterator<Item = &[String]> {
        std::iter::once(self.phrase.as_slice()).chain(self.inflections.iter().map(Vec::as_slice))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CueLexicon {
    pub cues: Vec<ContextCue>,
}

impl CueLexicon {
    /// Parses `phrase|category|inflection1;inflection2` lines. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse(source: &str) -> Result<Self, CorpusError> {
        let mut cues = Vec::new();
        for (i, raw) in source.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| CorpusError::CueSyntax {
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split('|').collect();
            if !(2..=3).contains(&fields.len()) {
                return Err(err(format!("expected 2 or 3 '|' fields, got {}", fields.len())));
            }
            let phrase = text::tokenize(fields[0]);
            if phrase.is_empty() {
                return Err(err("empty cue phrase".into()));
            }
            let category = fields[1].parse::<CueCategory>().map_err(err)?;
            let inflections = fields
                .get(2)
                .map(|f| {
                    f.split(';')
                        .map(text::tokenize)
                        .filter(|t| !t.is_empty())
                        .collect()
                })
                .unwrap_or_default();
            cues.push(ContextCue {
                phrase,
                category,
                inflections,
            });
        }
        Ok(CueLexicon { cues })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The eight published sentence cues plus a standard NegEx trigger set.
    pub fn default_cues() -> Self {
        Self::parse(DEFAULT_CUES).expect("bundled cue lexicon parses")
    }

    pub fn of_category(&self, category: CueCategory) -> impl Iterator<Item = &ContextCue> {
        self.cues.iter().filter(move |c| c.category == category)
    }
}

fn sentence_has_cue(tokens: &[String], cues: &CueLexicon) -> bool {
    cues.cues
        .iter()
        .filter(|c| c.category.is_sentence_level())
        .flat_map(ContextCue::forms)
        .any(|form| contains_phrase(tokens, form))
}

/// Removes every sentence containing a sentence-level cue (any surface form)
/// as a contiguous token run. Returns the survivors and the number dropped.
pub fn drop_cued_sentences(sentences: Vec<Sentence>, cues: &CueLexicon) -> (Vec<Sentence>, usize) {
    let before = sentences.len();
    let kept: Vec<Sentence> = sentences
        .into_iter()
        .filter(|s| !sentence_has_cue(&s.tokens, cues))
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

fn matches_of<'a>(
    tokens: &'a [String],
    cues: &'a CueLexicon,
    category: CueCategory,
) -> impl Iterator<Item = (usize, usize)> + 'a {
    cues.of_category(category)
        .flat_map(ContextCue::forms)
        .flat_map(move |form| find_phrase(tokens, form).map(move |s| (s, s + form.len())))
}

/// Per-token negation mask. A pre-trigger negates up to [`NEGEX_WINDOW`]
/// following tokens, a post-trigger up to that many preceding tokens; scope
/// stops at a terminator token or the sentence boundary. Trigger tokens are
/// only masked when they fall inside another trigger's scope.
pub fn negex_scope(tokens: &[String], cues: &CueLexicon) -> Vec<bool> {
    let len = tokens.len();
    let mut mask = vec![false; len];
    let mut terminator = vec![false; len];
    for (s, e) in matches_of(tokens, cues, CueCategory::NegexTerminator) {
        terminator[s..e].iter_mut().for_each(|t| *t = true);
    }
    for (_, e) in matches_of(tokens, cues, CueCategory::NegexTriggerPre) {
        for j in e..len.min(e + NEGEX_WINDOW) {
            if terminator[j] {
                break;
            }
            mask[j] = true;
        }
    }
    for (s, _) in matches_of(tokens, cues, CueCategory::NegexTriggerPost) {
        for j in (s.saturating_sub(NEGEX_WINDOW)..s).rev() {
            if terminator[j] {
                break;
            }
            mask[j] = true;
        }
    }
    mask
}

/// Groups notes by patient, ordered by patient id.
pub fn notes_by_patient(corpus: &Corpus) -> BTreeMap<&str, Vec<&ClinicalNote>> {
    let mut map: BTreeMap<&str, Vec<&ClinicalNote>> = BTreeMap::new();
    for note in &corpus.notes {
        map.entry(note.patient_id.as_str()).or_default().push(note);
    }
    map
}
