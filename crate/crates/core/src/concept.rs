//! Dictionary-driven concept tagging.
//!
//! Lexicon phrases are matched as contiguous lowercase token runs. Each match
//! gets a surrogate relevance score equal to its span length, so a mention
//! scoring below one is one where no full phrase matched.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sentence;
use crate::text;

const DEFAULT_LEXICON: &str = include_str!("../data/default_lexicon.txt");

#[derive(Debug, Error)]
pub enum ConceptError {
    #[error("lexicon line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("duplicate CUI {0} in lexicon")]
    DuplicateCui(Cui),
    #[error("invalid CUI '{0}': expected C followed by 7 digits")]
    InvalidCui(String),
    #[error("negation mask has {mask} entries for {tokens} tokens")]
    MaskLength { mask: usize, tokens: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Concept unique identifier: `C` followed by seven digits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Cui(String);

impl Cui {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for Cui {
    type Err = ConceptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let valid = s.len() == 8
            && s.starts_with('C')
            && s[1..].bytes().all(|b| b.is_ascii_digit());
        if valid {
            Ok(Cui(s.to_string()))
        } else {
            Err(ConceptError::InvalidCui(s.to_string()))
        }
    }
}

impl TryFrom<String> for Cui {
    type Error = ConceptError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Cui> for String {
    fn from(c: Cui) -> String {
        c.0
    }
}

impl fmt::Display for Cui {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub cui: Cui,
    pub preferred_name: String,
    pub phrases: Vec<Vec<String>>,
    pub in_custom_dictionary: bool,
}

impl LexiconEntry {
    pub fn new(cui: &str, preferred_name: &str, phrases: &[&str], in_custom_dictionary: bool) -> Result<Self, ConceptError> {
        let mut seen = HashSet::new();
        let phrases: Vec<Vec<String>> = phrases
            .iter()
            .map(|p| text::tokenize(p))
            .filter(|p| !p.is_empty() && seen.insert(p.clone()))
            .collect();
        if phrases.is_empty() {
            return Err(ConceptError::Syntax {
                line: 0,
                message: format!("{cui} has no phrases"),
            });
        }
        Ok(LexiconEntry {
            cui: cui.parse()?,
            preferred_name: preferred_name.to_string(),
            phrases,
            in_custom_dictionary,
        })
    }
}

/// Immutable phrase lexicon, indexed by first token.
#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: Vec<LexiconEntry>,
    by_first_token: HashMap<String, Vec<(usize, usize)>>,
}

impl Lexicon {
    pub fn new(entries: Vec<LexiconEntry>) -> Result<Self, ConceptError> {
        let mut cuis = HashSet::new();
        let mut by_first_token: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
        for (e, entry) in entries.iter().enumerate() {
            if !cuis.insert(entry.cui.clone()) {
                return Err(ConceptError::DuplicateCui(entry.cui.clone()));
            }
            for (p, phrase) in entry.phrases.iter().enumerate() {
                by_first_token.entry(phrase[0].clone()).or_default().push((e, p));
            }
        }
        Ok(Lexicon {
            entries,
            by_first_token,
        })
    }

    /// Parses `CUI|preferred_name|phrase1;phrase2;...|dict:{0,1}` lines.
    pub fn parse(source: &str) -> Result<Self, ConceptError> {
        let mut entries = Vec::new();
        let mut cuis = HashSet::new();
        for (i, raw) in source.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |message: String| ConceptError::Syntax {
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split('|').collect();
            if fields.len() != 4 {
                return Err(syntax(format!("expected 4 '|' fields, got {}", fields.len())));
            }
            let cui: Cui = fields[0]
                .parse()
                .map_err(|e: ConceptError| syntax(e.to_string()))?;
            if !cuis.insert(cui.clone()) {
                return Err(ConceptError::DuplicateCui(cui));
            }
            let flag = fields[3].trim();
            let in_dict = match flag.strip_prefix("dict:").unwrap_or(flag) {
                "1" => true,
                "0" => false,
                other => return Err(syntax(format!("dictionary flag must be 0 or 1, got '{other}'"))),
            };
            let phrases: Vec<&str> = fields[2].split(';').collect();
            let entry = LexiconEntry::new(cui.as_str(), fields[1].trim(), &phrases, in_dict)
                .map_err(|_| syntax(format!("{cui} has no phrases")))?;
            entries.push(entry);
        }
        Lexicon::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self, ConceptError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The twelve concepts with their partial sentences from the published
    /// top-coefficient table.
    pub fn default_lexicon() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("bundled lexicon parses")
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn get(&self, cui: &Cui) -> Option<&LexiconEntry> {
        self.entries.iter().find(|e| &e.cui == cui)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn custom_dictionary(&self) -> BTreeSet<Cui> {
        self.entries
            .iter()
            .filter(|e| e.in_custom_dictionary)
            .map(|e| e.cui.clone())
            .collect()
    }

    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let phrases: Vec<String> = e.phrases.iter().map(|p| p.join(" ")).collect();
            out.push_str(&format!(
                "{}|{}|{}|dict:{}\n",
                e.cui,
                e.preferred_name,
                phrases.join(";"),
                u8::from(e.in_custom_dictionary)
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMention {
    pub cui: Cui,
    pub note_id: String,
    pub sentence_index: usize,
    /// Half-open `[start, end)` range of sentence tokens.
    pub token_span: (usize, usize),
    pub score: f64,
    pub negated: bool,
}

/// Finds resolved mentions in one sentence.
///
/// Every phrase occurrence is a candidate. For a given span only the best
/// entry survives (highest score, then smallest CUI). Overlapping spans are
/// then resolved longest first, left to right. Output is ordered by start.
pub fn tag(sentence: &Sentence, negation_mask: &[bool], lexicon: &Lexicon) -> Result<Vec<ConceptMention>, ConceptError> {
    let tokens = &sentence.tokens;
    if negation_mask.len() != tokens.len() {
        return Err(ConceptError::MaskLength {
            mask: negation_mask.len(),
            tokens: tokens.len(),
        });
    }

    let mut best: BTreeMap<(usize, usize), &Cui> = BTreeMap::new();
    for start in 0..tokens.len() {
        let Some(cands) = lexicon.by_first_token.get(&tokens[start]) else {
            continue;
        };
        for &(e, p) in cands {
            let phrase = &lexicon.entries[e].phrases[p];
            let end = start + phrase.len();
            if end <= tokens.len() && tokens[start..end] == phrase[..] {
                let cui = &lexicon.entries[e].cui;
                best.entry((start, end))
                    .and_modify(|c| {
                        if cui < *c {
                            *c = cui
                        }
                    })
                    .or_insert(cui);
            }
        }
    }

    let mut spans: Vec<((usize, usize), &Cui)> = best.into_iter().collect();
    spans.sort_by_key(|&((s, e), _)| (std::cmp::Reverse(e - s), s));
    let mut taken = vec![false; tokens.len()];
    let mut mentions = Vec::new();
    for ((s, e), cui) in spans {
        if taken[s..e].iter().any(|&t| t) {
            continue;
        }
        taken[s..e].iter_mut().for_each(|t| *t = true);
        mentions.push(ConceptMention {
            cui: cui.clone(),
            note_id: sentence.note_id.clone(),
            sentence_index: sentence.index,
            token_span: (s, e),
            score: (e - s) as f64,
            negated: negation_mask[s..e].iter().any(|&m| m),
        });
    }
    mentions.sort_by_key(|m| m.token_span.0);
    Ok(mentions)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientConceptVector {
    pub patient_id: String,
    pub counts: BTreeMap<Cui, u32>,
}

/// Counts non-negated mentions scoring at least `min_score`. With a
/// dictionary, CUIs outside it are dropped; `None` keeps every tagged CUI.
pub fn aggregate<'a, I>(
    patient_id: &str,
    mentions: I,
    dictionary: Option<&BTreeSet<Cui>>,
    min_score: f64,
) -> PatientConceptVector
where
    I: IntoIterator<Item = &'a ConceptMention>,
{
    let mut counts: BTreeMap<Cui, u32> = BTreeMap::new();
    for m in mentions {
        if m.negated || m.score < min_score {
            continue;
        }
        if dictionary.is_some_and(|d| !d.contains(&m.cui)) {
            continue;
        }
        *counts.entry(m.cui.clone()).or_default() += 1;
    }
    PatientConceptVector {
        patient_id: patient_id.to_string(),
        counts,
    }
}

pub fn write_concept_vectors<W: Write>(vectors: &[PatientConceptVector], mut out: W) -> Result<(), ConceptError> {
    for v in vectors {
        serde_json::to_writer(&mut out, v)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_concept_vectors<R: BufRead>(reader: R) -> Result<Vec<PatientConceptVector>, ConceptError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence(text: &str) -> Sentence {
        Sentence {
            note_id: "n1".into(),
            index: 3,
            text: text.into(),
            tokens: text::tokenize(text),
        }
    }

    fn tag_plain(text: &str, lexicon: &Lexicon) -> Vec<ConceptMention> {
        let s = sentence(text);
        tag(&s, &vec![false; s.tokens.len()], lexicon).unwrap()
    }

    fn cui(s: &str) -> Cui {
        s.parse().unwrap()
    }

    #[test]
    fn default_lexicon_contents() {
        let lex = Lexicon::default_lexicon();
        assert_eq!(lex.len(), 12);
        let mbc = lex.get(&cui("C0278488")).unwrap();
        assert!(mbc.phrases.contains(&text::tokenize("metastatic breast cancer")));
        let ix = lex.get(&cui("C1967552")).unwrap();
        assert_eq!(ix.phrases, vec![vec!["ixempra".to_string()]]);
        assert_eq!(lex.custom_dictionary().len(), 12);
    }

    #[test]
    fn duplicate_cui_rejected() {
        let src = "C0000001|a|x|dict:1\nC0000001|b|y|dict:1\n";
        assert!(matches!(Lexicon::parse(src), Err(ConceptError::DuplicateCui(_))));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let src = "C0000001|a|x|dict:1\n\nC12|b|y|dict:1\n";
        match Lexicon::parse(src) {
            Err(ConceptError::Syntax { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Lexicon::parse("C0000001|a|x").is_err());
        assert!(Lexicon::parse("C0000001|a|x|dict:2").is_err());
        assert!(Lexicon::parse("C0000001|a| ; |dict:1").is_err());
    }

    #[test]
    fn cui_format() {
        assert!("C0153678".parse::<Cui>().is_ok());
        assert!("c0153678".parse::<Cui>().is_err());
        assert!("C015367".parse::<Cui>().is_err());
        assert!("C01536789".parse::<Cui>().is_err());
    }

    #[test]
    fn four_token_phrase() {
        let m = tag_plain("cancer metastatic to pleura", &Lexicon::default_lexicon());
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].cui, cui("C0153678"));
        assert_eq!(m[0].token_span, (0, 4));
        assert_eq!(m[0].score, 4.0);
        assert_eq!(m[0].sentence_index, 3);
    }

    #[test]
    fn brain_metastases() {
        let m = tag_plain("brain metastases", &Lexicon::default_lexicon());
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].cui.as_str(), m[0].score), ("C0220650", 2.0));
    }

    #[test]
    fn tie_goes_to_smaller_cui() {
        let m = tag_plain("metastatic", &Lexicon::default_lexicon());
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].cui, cui("C0036525"));
        let m = tag_plain("metastatic disease", &Lexicon::default_lexicon());
        assert_eq!(m[0].cui, cui("C0027627"));
    }

    #[test]
    fn longest_match_wins_overlap() {
        let m = tag_plain("metastatic breast cancer to the liver", &Lexicon::default_lexicon());
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].cui, cui("C0346993"));
        let m = tag_plain("bone and bone metastases", &Lexicon::default_lexicon());
        let got: Vec<(&str, (usize, usize))> = m.iter().map(|m| (m.cui.as_str(), m.token_span)).collect();
        assert_eq!(got, vec![("C1266909", (0, 1)), ("C0153690", (2, 4))]);
    }

    #[test]
    fn negated_iff_span_token_masked() {
        let s = sentence("no brain metastases or bone");
        let mask = vec![false, true, false, false, false];
        let m = tag(&s, &mask, &Lexicon::default_lexicon()).unwrap();
        assert!(m[0].negated);
        assert!(!m[1].negated);
        assert!(tag(&s, &[false], &Lexicon::default_lexicon()).is_err());
    }

    fn mention(c: &str, score: f64, negated: bool) -> ConceptMention {
        ConceptMention {
            cui: cui(c),
            note_id: "n".into(),
            sentence_index: 0,
            token_span: (0, 1),
            score,
            negated,
        }
    }

    #[test]
    fn aggregate_filters() {
        let dict = Lexicon::default_lexicon().custom_dictionary();
        let v = aggregate("p", &[mention("C0153690", 2.0, false)], Some(&dict), 1.0);
        assert_eq!(v.counts, BTreeMap::from([(cui("C0153690"), 1)]));

        let v = aggregate("p", &[mention("C0153690", 2.0, true)], Some(&dict), 1.0);
        assert!(v.counts.is_empty());

        let v = aggregate("p", &[mention("C0153690", 0.5, false)], Some(&dict), 1.0);
        assert!(v.counts.is_empty());

        let v = aggregate("p", &[mention("C9999999", 1.0, false)], Some(&dict), 1.0);
        assert!(v.counts.is_empty());
        let v = aggregate("p", &[mention("C9999999", 1.0, false)], None, 1.0);
        assert_eq!(v.counts.len(), 1);
    }

    #[test]
    fn concept_vector_jsonl_roundtrip() {
        let v = vec![PatientConceptVector {
            patient_id: "p1".into(),
            counts: BTreeMap::from([(cui("C0153690"), 3)]),
        }];
        let mut buf = Vec::new();
        write_concept_vectors(&v, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"patient_id\":\"p1\",\"counts\":{\"C0153690\":3}}\n"
        );
        assert_eq!(read_concept_vectors(&buf[..]).unwrap(), v);
    }

    #[test]
    fn lexicon_lines_roundtrip() {
        let lex = Lexicon::default_lexicon();
        let again = Lexicon::parse(&lex.to_lines()).unwrap();
        assert_eq!(lex.entries(), again.entries());
    }
}
