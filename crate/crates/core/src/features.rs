//! Sparse feature matrices, TF-IDF weighting, chi-square column selection and
//! assembly of the five model variants.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept::{Cui, PatientConceptVector};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("duplicate column name '{0}'")]
    DuplicateColumn(String),
    #[error("column index {index} out of range for {columns} columns")]
    ColumnOutOfRange { index: usize, columns: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("row misalignment: {0}")]
    RowMismatch(String),
    #[error("labels required")]
    MissingLabels,
    #[error("label count {labels} does not match row count {rows}")]
    LabelCount { labels: usize, rows: usize },
    #[error("class {0} has no members")]
    EmptyClass(&'static str),
    #[error("keep fraction {0} outside (0, 1]")]
    KeepFraction(f64),
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("unknown variant '{0}'")]
    UnknownVariant(String),
    #[error("unknown column '{0}'")]
    UnknownColumn(String),
    #[error("malformed matrix file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Concept,
    Clinical,
    Token,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Concept => "concept",
            Source::Clinical => "clinical",
            Source::Token => "token",
        }
    }
}

/// Column provenance. `variable` names the originating variable so that
/// one-hot expansions of one clinical variable count once.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub source: Source,
    pub variable: String,
}

impl Column {
    pub fn new(name: impl Into<String>, source: Source, variable: impl Into<String>) -> Self {
        Column {
            name: name.into(),
            source,
            variable: variable.into(),
        }
    }

    /// A column that is its own variable.
    pub fn simple(name: impl Into<String>, source: Source) -> Self {
        let name = name.into();
        Column {
            variable: name.clone(),
            name,
            source,
        }
    }
}

/// Row-major sparse matrix with explicit zeros removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: Vec<String>,
    columns: Vec<Column>,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
    labels: Option<Vec<bool>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureCounts {
    pub variables: usize,
    pub columns: usize,
    pub by_source: BTreeMap<String, SourceCount>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCount {
    pub variables: usize,
    pub columns: usize,
}

impl FeatureMatrix {
    /// Builds a matrix from per-row `(column, value)` entries. Entries may be
    /// unsorted; zeros are dropped and duplicate columns within a row summed.
    pub fn from_rows(
        rows: Vec<String>,
        columns: Vec<Column>,
        entries: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self, FeatureError> {
        if entries.len() != rows.len() {
            return Err(FeatureError::RowMismatch(format!(
                "{} row ids but {} rows of entries",
                rows.len(),
                entries.len()
            )));
        }
        let mut names = HashSet::new();
        for c in &columns {
            if !names.insert(c.name.as_str()) {
                return Err(FeatureError::DuplicateColumn(c.name.clone()));
            }
        }
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for (r, mut row) in entries.into_iter().enumerate() {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                if c >= columns.len() {
                    return Err(FeatureError::ColumnOutOfRange {
                        index: c,
                        columns: columns.len(),
                    });
                }
                if !v.is_finite() {
                    return Err(FeatureError::NonFinite { row: r, col: c });
                }
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            // drop zeros (including sums that cancelled)
            let start = indptr[r];
            let mut w = start;
            for k in start..indices.len() {
                if values[k] != 0.0 {
                    indices[w] = indices[k];
                    values[w] = values[k];
                    w += 1;
                }
            }
            indices.truncate(w);
            values.truncate(w);
            indptr.push(indices.len());
        }
        Ok(FeatureMatrix {
            rows,
            columns,
            indptr,
            indices,
            values,
            labels: None,
        })
    }

    pub fn from_dense(rows: Vec<String>, columns: Vec<Column>, dense: &[Vec<f64>]) -> Result<Self, FeatureError> {
        let entries = dense
            .iter()
            .map(|r| r.iter().copied().enumerate().filter(|&(_, v)| v != 0.0).collect())
            .collect();
        Self::from_rows(rows, columns, entries)
    }

    pub fn with_labels(mut self, labels: Vec<bool>) -> Result<Self, FeatureError> {
        if labels.len() != self.rows.len() {
            return Err(FeatureError::LabelCount {
                labels: labels.len(),
                rows: self.rows.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ids(&self) -> &[String] {
        &self.rows
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (s, e) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[s..e], &self.values[s..e])
    }

    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols()];
        let (idx, val) = self.row(i);
        for (&c, &v) in idx.iter().zip(val) {
            out[c] = v;
        }
        out
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n_rows()).map(|i| self.dense_row(i)).collect()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (idx, val) = self.row(i);
        idx.binary_search(&j).map(|k| val[k]).unwrap_or(0.0)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn counts(&self) -> FeatureCounts {
        let mut per_source: BTreeMap<String, (BTreeSet<&str>, usize)> = BTreeMap::new();
        let mut all_vars = BTreeSet::new();
        for c in &self.columns {
            let e = per_source.entry(c.source.as_str().to_string()).or_default();
            e.0.insert(&c.variable);
            e.1 += 1;
            all_vars.insert((c.source, c.variable.as_str()));
        }
        FeatureCounts {
            variables: all_vars.len(),
            columns: self.columns.len(),
            by_source: per_source
                .into_iter()
                .map(|(k, (vars, cols))| {
                    (
                        k,
                        SourceCount {
                            variables: vars.len(),
                            columns: cols,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Number of distinct originating variables.
    pub fn variable_count(&self) -> usize {
        self.counts().variables
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for &r in rows {
            let (idx, val) = self.row(r);
            indices.extend_from_slice(idx);
            values.extend_from_slice(val);
            indptr.push(indices.len());
        }
        FeatureMatrix {
            rows: rows.iter().map(|&r| self.rows[r].clone()).collect(),
            columns: self.columns.clone(),
            indptr,
            indices,
            values,
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r]).collect()),
        }
    }

    /// Keeps the given columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<FeatureMatrix, FeatureError> {
        let mut remap: HashMap<usize, usize> = HashMap::new();
        for (new, &old) in cols.iter().enumerate() {
            if old >= self.n_cols() {
                return Err(FeatureError::ColumnOutOfRange {
                    index: old,
                    columns: self.n_cols(),
                });
            }
            remap.insert(old, new);
        }
        let entries = (0..self.n_rows())
            .map(|i| {
                let (idx, val) = self.row(i);
                idx.iter()
                    .zip(val)
                    .filter_map(|(c, &v)| remap.get(c).map(|&n| (n, v)))
                    .collect()
            })
            .collect();
        let columns = cols.iter().map(|&c| self.columns[c].clone()).collect();
        let mut m = FeatureMatrix::from_rows(self.rows.clone(), columns, entries)?;
        m.labels = self.labels.clone();
        Ok(m)
    }

    pub fn select_columns_by_name(&self, names: &[String]) -> Result<FeatureMatrix, FeatureError> {
        let lookup: HashMap<&str, usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(i, c)| (c.name.as_str(), i))
            .collect();
        let cols = names
            .iter()
            .map(|n| {
                lookup
                    .get(n.as_str())
                    .copied()
                    .ok_or_else(|| FeatureError::UnknownColumn(n.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.select_columns(&cols)
    }

    /// Horizontal concatenation. Row ids must agree; labels are taken from
    /// the first part that has them.
    pub fn hstack(parts: &[&FeatureMatrix]) -> Result<FeatureMatrix, FeatureError> {
        let Some(first) = parts.first() else {
            return FeatureMatrix::from_rows(vec![], vec![], vec![]);
        };
        for p in parts {
            if p.rows != first.rows {
                return Err(FeatureError::RowMismatch(
                    "parts do not share the same row ids".into(),
                ));
            }
        }
        let mut columns = Vec::new();
        let mut offsets = Vec::new();
        for p in parts {
            offsets.push(columns.len());
            columns.extend(p.columns.iter().cloned());
        }
        let entries = (0..first.n_rows())
            .map(|i| {
                parts
                    .iter()
                    .zip(&offsets)
                    .flat_map(|(p, &off)| {
                        let (idx, val) = p.row(i);
                        idx.iter().zip(val).map(move |(&c, &v)| (c + off, v))
                    })
                    .collect()
            })
            .collect();
        let mut m = FeatureMatrix::from_rows(first.rows.clone(), columns, entries)?;
        m.labels = parts.iter().find_map(|p| p.labels.clone());
        Ok(m)
    }

    fn class_sizes(&self) -> Result<(&[bool], usize, usize), FeatureError> {
        let labels = self.labels.as_deref().ok_or(FeatureError::MissingLabels)?;
        let pos = labels.iter().filter(|&&l| l).count();
        let neg = labels.len() - pos;
        if pos == 0 {
            return Err(FeatureError::EmptyClass("positive"));
        }
        if neg == 0 {
            return Err(FeatureError::EmptyClass("negative"));
        }
        Ok((labels, pos, neg))
    }

    /// Writes `<stem>.columns.json` metadata and `<stem>.tsv` triplets.
    pub fn write<W1: Write, W2: Write>(&self, mut meta: W1, mut triplets: W2) -> Result<(), FeatureError> {
        let m = MatrixMeta {
            n_rows: self.n_rows(),
            n_cols: self.n_cols(),
            ordering: "columns in assembly order: concept columns by CUI, then clinical columns by variable and domain order, tokens lexicographic".into(),
            rows: self.rows.clone(),
            columns: self.columns.clone(),
            labels: self.labels.clone(),
        };
        serde_json::to_writer_pretty(&mut meta, &m)?;
        meta.write_all(b"\n")?;
        writeln!(triplets, "row\tcol\tvalue")?;
        for i in 0..self.n_rows() {
            let (idx, val) = self.row(i);
            for (c, v) in idx.iter().zip(val) {
                writeln!(triplets, "{i}\t{c}\t{v:?}")?;
            }
        }
        Ok(())
    }

    pub fn read<R1: std::io::Read, R2: BufRead>(meta: R1, triplets: R2) -> Result<FeatureMatrix, FeatureError> {
        let m: MatrixMeta = serde_json::from_reader(meta)?;
        let mut entries: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m.rows.len()];
        for (n, line) in triplets.lines().enumerate() {
            let line = line?;
            if n == 0 || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let parse_err = || FeatureError::Format(format!("line {}: '{line}'", n + 1));
            if f.len() != 3 {
                return Err(parse_err());
            }
            let r: usize = f[0].parse().map_err(|_| parse_err())?;
            let c: usize = f[1].parse().map_err(|_| parse_err())?;
            let v: f64 = f[2].parse().map_err(|_| parse_err())?;
            entries.get_mut(r).ok_or_else(parse_err)?.push((c, v));
        }
        let mut out = FeatureMatrix::from_rows(m.rows, m.columns, entries)?;
        out.labels = m.labels;
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixMeta {
    n_rows: usize,
    n_cols: usize,
    ordering: String,
    rows: Vec<String>,
    columns: Vec<Column>,
    labels: Option<Vec<bool>>,
}

/// Smooth-idf TF-IDF with L2-normalized rows.
///
/// `idf = ln((1 + N) / (1 + df)) + 1`, where `df` counts training documents
/// containing the token. Vocabulary is every training token, sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfVectorizer {
    vocabulary: Vec<String>,
    idf: Vec<f64>,
    n_documents: usize,
}

impl TfidfVectorizer {
    pub fn fit(documents: &[BTreeMap<String, u32>]) -> Result<Self, FeatureError> {
        let n = documents.len();
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for doc in documents {
            for (tok, &count) in doc {
                if count > 0 {
                    *df.entry(tok.as_str()).or_default() += 1;
                }
            }
        }
        if n == 0 || df.is_empty() {
            return Err(FeatureError::EmptyCorpus);
        }
        let (vocabulary, idf) = df
            .into_iter()
            .map(|(tok, d)| {
                let idf = ((1.0 + n as f64) / (1.0 + d as f64)).ln() + 1.0;
                (tok.to_string(), idf)
            })
            .unzip();
        Ok(TfidfVectorizer {
            vocabulary,
            idf,
            n_documents: n,
        })
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    pub fn idf_of(&self, token: &str) -> Option<f64> {
        self.vocabulary
            .binary_search_by(|t| t.as_str().cmp(token))
            .ok()
            .map(|i| self.idf[i])
    }

    /// Out-of-vocabulary tokens are ignored; empty documents give zero rows.
    pub fn transform(&self, ids: Vec<String>, documents: &[BTreeMap<String, u32>]) -> Result<FeatureMatrix, FeatureError> {
        let columns = self
            .vocabulary
            .iter()
            .map(|t| Column::simple(t.clone(), Source::Token))
            .collect();
        let entries = documents
            .iter()
            .map(|doc| {
                let mut row: Vec<(usize, f64)> = doc
                    .iter()
                    .filter(|(_, &c)| c > 0)
                    .filter_map(|(tok, &count)| {
                        self.vocabulary
                            .binary_search_by(|t| t.as_str().cmp(tok))
                            .ok()
                            .map(|i| (i, f64::from(count) * self.idf[i]))
                    })
                    .collect();
                let norm = row.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|(_, v)| *v /= norm);
                }
                row
            })
            .collect();
        FeatureMatrix::from_rows(ids, columns, entries)
    }

    pub fn fit_transform(ids: Vec<String>, documents: &[BTreeMap<String, u32>]) -> Result<(Self, FeatureMatrix), FeatureError> {
        let v = Self::fit(documents)?;
        let m = v.transform(ids, documents)?;
        Ok((v, m))
    }
}

/// Per-column chi-square statistic of non-negative features against the
/// labels: observed per-class column sums versus class-proportional shares
/// of the column total. All-zero columns score 0.
pub fn chi2_scores(matrix: &FeatureMatrix) -> Result<Vec<f64>, FeatureError> {
    let (labels, pos, neg) = matrix.class_sizes()?;
    let n = (pos + neg) as f64;
    let (p_pos, p_neg) = (pos as f64 / n, neg as f64 / n);
    let mut obs_pos = vec![0.0; matrix.n_cols()];
    let mut total = vec![0.0; matrix.n_cols()];
    for (i, &label) in labels.iter().enumerate() {
        let (idx, val) = matrix.row(i);
        for (&c, &v) in idx.iter().zip(val) {
            total[c] += v;
            if label {
                obs_pos[c] += v;
            }
        }
    }
    Ok(obs_pos
        .iter()
        .zip(&total)
        .map(|(&o_pos, &t)| {
            if t == 0.0 {
                return 0.0;
            }
            let o_neg = t - o_pos;
            let (e_pos, e_neg) = (t * p_pos, t * p_neg);
            (o_pos - e_pos).powi(2) / e_pos + (o_neg - e_neg).powi(2) / e_neg
        })
        .collect())
}

/// Number of columns kept for a fraction: the ceiling, at least one.
pub fn keep_count(keep_fraction: f64, n_cols: usize) -> usize {
    let raw = keep_fraction * n_cols as f64;
    // absorb representation error such as 0.05 * 20 = 1.0000000000000002
    let k = (raw - 1e-9).ceil().max(0.0) as usize;
    k.clamp(1.min(n_cols), n_cols)
}

/// Column indices ranked by statistic descending, ties by name ascending.
pub fn chi2_rank(matrix: &FeatureMatrix) -> Result<Vec<(usize, f64)>, FeatureError> {
    let scores = chi2_scores(matrix)?;
    let mut order: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
    order.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| matrix.columns[a.0].name.cmp(&matrix.columns[b.0].name))
    });
    Ok(order)
}

/// Keeps the top `⌈keep_fraction × columns⌉` columns by chi-square rank.
/// Surviving columns keep their original relative order.
pub fn chi2_select(matrix: &FeatureMatrix, keep_fraction: f64) -> Result<FeatureMatrix, FeatureError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(FeatureError::KeepFraction(keep_fraction));
    }
    let ranked = chi2_rank(matrix)?;
    let k = keep_count(keep_fraction, matrix.n_cols());
    let mut kept: Vec<usize> = ranked.into_iter().take(k).map(|(c, _)| c).collect();
    kept.sort_unstable();
    matrix.select_columns(&kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FilteredPlusClinical,
    FullConcepts,
    FilteredConcepts,
    ClinicalOnly,
    BagOfWords,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::FilteredPlusClinical,
        Variant::FullConcepts,
        Variant::FilteredConcepts,
        Variant::ClinicalOnly,
        Variant::BagOfWords,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::FilteredPlusClinical => "filtered_plus_clinical",
            Variant::FullConcepts => "full_concepts",
            Variant::FilteredConcepts => "filtered_concepts",
            Variant::ClinicalOnly => "clinical_only",
            Variant::BagOfWords => "bag_of_words",
        }
    }

    pub fn uses_chi2(self) -> bool {
        matches!(self, Variant::FullConcepts | Variant::BagOfWords)
    }

    pub fn needs_clinical(self) -> bool {
        matches!(self, Variant::FilteredPlusClinical | Variant::ClinicalOnly)
    }

    pub fn needs_filtered_concepts(self) -> bool {
        matches!(self, Variant::FilteredPlusClinical | Variant::FilteredConcepts)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim())
            .ok_or_else(|| FeatureError::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptEncoding {
    #[default]
    Counts,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub variant: Variant,
    pub chi2_keep_fraction: f64,
    #[serde(default)]
    pub concept_encoding: ConceptEncoding,
}

impl VariantConfig {
    pub fn new(variant: Variant) -> Self {
        VariantConfig {
            variant,
            chi2_keep_fraction: 0.05,
            concept_encoding: ConceptEncoding::Counts,
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.chi2_keep_fraction > 0.0 && self.chi2_keep_fraction <= 1.0 {
            Ok(())
        } else {
            Err(FeatureError::KeepFraction(self.chi2_keep_fraction))
        }
    }
}

/// One column per CUI in `columns` (zero-filled when absent). CUIs outside
/// `columns` are ignored.
pub fn concept_matrix(
    vectors: &[PatientConceptVector],
    columns: &[Cui],
    encoding: ConceptEncoding,
) -> Result<FeatureMatrix, FeatureError> {
    let index: HashMap<&Cui, usize> = columns.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let entries = vectors
        .iter()
        .map(|v| {
            v.counts
                .iter()
                .filter_map(|(cui, &n)| {
                    index.get(cui).map(|&i| {
                        let value = match encoding {
                            ConceptEncoding::Counts => f64::from(n),
                            ConceptEncoding::Binary => f64::from(u8::from(n > 0)),
                        };
                        (i, value)
                    })
                })
                .collect()
        })
        .collect();
    FeatureMatrix::from_rows(
        vectors.iter().map(|v| v.patient_id.clone()).collect(),
        columns
            .iter()
            .map(|c| Column::simple(c.as_str(), Source::Concept))
            .collect(),
        entries,
    )
}

/// Row-aligned inputs to [`assemble`]. Only the parts a variant needs are read.
#[derive(Debug, Clone, Copy, Default)]
pub struct AssemblyInputs<'a> {
    pub filtered_concepts: Option<&'a FeatureMatrix>,
    pub full_concepts: Option<&'a FeatureMatrix>,
    pub clinical: Option<&'a FeatureMatrix>,
    pub bag_of_words: Option<&'a FeatureMatrix>,
}

fn required<'a>(m: Option<&'a FeatureMatrix>, what: &str) -> Result<&'a FeatureMatrix, FeatureError> {
    m.ok_or_else(|| FeatureError::RowMismatch(format!("{what} matrix not provided")))
}

pub fn assemble(config: &VariantConfig, inputs: AssemblyInputs<'_>) -> Result<FeatureMatrix, FeatureError> {
    config.validate()?;
    let present: Vec<&FeatureMatrix> = [
        inputs.filtered_concepts,
        inputs.full_concepts,
        inputs.clinical,
        inputs.bag_of_words,
    ]
    .into_iter()
    .flatten()
    .collect();
    if let Some(first) = present.first() {
        if present.iter().any(|m| m.row_ids() != first.row_ids()) {
            return Err(FeatureError::RowMismatch(
                "input matrices are not aligned by patient".into(),
            ));
        }
    }
    match config.variant {
        Variant::FilteredPlusClinical => FeatureMatrix::hstack(&[
            required(inputs.filtered_concepts, "filtered concept")?,
            required(inputs.clinical, "clinical")?,
        ]),
        Variant::FilteredConcepts => Ok(required(inputs.filtered_concepts, "filtered concept")?.clone()),
        Variant::ClinicalOnly => Ok(required(inputs.clinical, "clinical")?.clone()),
        Variant::FullConcepts => chi2_select(
            required(inputs.full_concepts, "full concept")?,
            config.chi2_keep_fraction,
        ),
        Variant::BagOfWords => chi2_select(
            required(inputs.bag_of_words, "bag-of-words")?,
            config.chi2_keep_fraction,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    fn cols(names: &[&str]) -> Vec<Column> {
        names.iter().map(|n| Column::simple(*n, Source::Token)).collect()
    }

    fn doc(pairs: &[(&str, u32)]) -> BTreeMap<String, u32> {
        pairs.iter().map(|(t, c)| (t.to_string(), *c)).collect()
    }

    #[test]
    fn from_rows_drops_zeros_and_rejects_duplicates() {
        let m = FeatureMatrix::from_rows(ids(1), cols(&["a", "b"]), vec![vec![(1, 2.0), (0, 0.0)]]).unwrap();
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get(0, 1), 2.0);
        assert!(matches!(
            FeatureMatrix::from_rows(ids(1), cols(&["a", "a"]), vec![vec![]]),
            Err(FeatureError::DuplicateColumn(_))
        ));
        assert!(FeatureMatrix::from_rows(ids(1), cols(&["a"]), vec![vec![(0, f64::NAN)]]).is_err());
    }

    #[test]
    fn tfidf_single_document() {
        let (v, m) = TfidfVectorizer::fit_transform(ids(1), &[doc(&[("bone", 3), ("liver", 4)])]).unwrap();
        assert!(v.idf().iter().all(|&x| x == 1.0));
        assert!((m.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((m.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn tfidf_idf_values() {
        let docs = [doc(&[("a", 1), ("b", 1)]), doc(&[("a", 2)])];
        let v = TfidfVectorizer::fit(&docs).unwrap();
        assert_eq!(v.idf_of("a"), Some(1.0));
        assert!((v.idf_of("b").unwrap() - 1.405_465_108_108_164_4).abs() < 1e-12);
    }

    #[test]
    fn tfidf_empty_corpus_and_oov() {
        assert!(matches!(TfidfVectorizer::fit(&[]), Err(FeatureError::EmptyCorpus)));
        assert!(TfidfVectorizer::fit(&[doc(&[])]).is_err());
        let v = TfidfVectorizer::fit(&[doc(&[("a", 1)])]).unwrap();
        let m = v.transform(ids(2), &[doc(&[("zzz", 5)]), doc(&[])]).unwrap();
        assert_eq!(m.nnz(), 0);
    }

    #[test]
    fn chi2_label_column_scores_five() {
        // class-sum statistic: O = (5, 0), E = (2.5, 2.5)
        let labels: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let dense: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| vec![f64::from(u8::from(l)), 1.0])
            .collect();
        let m = FeatureMatrix::from_dense(ids(10), cols(&["label", "const"]), &dense)
            .unwrap()
            .with_labels(labels)
            .unwrap();
        let s = chi2_scores(&m).unwrap();
        assert!((s[0] - 5.0).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
        let ranked = chi2_rank(&m).unwrap();
        assert_eq!(ranked[0].0, 0);
    }

    #[test]
    fn chi2_requires_both_classes() {
        let m = FeatureMatrix::from_dense(ids(2), cols(&["a"]), &[vec![1.0], vec![0.0]]).unwrap();
        assert!(matches!(chi2_scores(&m), Err(FeatureError::MissingLabels)));
        let m = m.with_labels(vec![true, true]).unwrap();
        assert!(matches!(chi2_scores(&m), Err(FeatureError::EmptyClass("negative"))));
    }

    #[test]
    fn chi2_keep_all_is_identity() {
        let m = FeatureMatrix::from_dense(ids(3), cols(&["a", "b"]), &[vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]])
            .unwrap()
            .with_labels(vec![true, false, true])
            .unwrap();
        assert_eq!(chi2_select(&m, 1.0).unwrap(), m);
        assert!(chi2_select(&m, 0.0).is_err());
        assert!(chi2_select(&m, 1.5).is_err());
    }

    #[test]
    fn keep_count_uses_ceiling() {
        assert_eq!(keep_count(0.05, 20), 1);
        assert_eq!(keep_count(0.05, 21), 2);
        assert_eq!(keep_count(0.05, 1537), 77);
        assert_eq!(keep_count(0.05, 3), 1);
        assert_eq!(keep_count(1.0, 7), 7);
        assert_eq!(keep_count(0.5, 0), 0);
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("svm".parse::<Variant>().is_err());
    }

    #[test]
    fn assemble_rejects_misaligned_rows() {
        let a = FeatureMatrix::from_rows(ids(2), vec![Column::simple("C0000001", Source::Concept)], vec![vec![], vec![]]).unwrap();
        let b = FeatureMatrix::from_rows(vec!["x".into(), "y".into()], vec![Column::simple("age", Source::Clinical)], vec![vec![], vec![]]).unwrap();
        let cfg = VariantConfig::new(Variant::FilteredPlusClinical);
        let err = assemble(
            &cfg,
            AssemblyInputs {
                filtered_concepts: Some(&a),
                clinical: Some(&b),
                ..Default::default()
            },
        );
        assert!(matches!(err, Err(FeatureError::RowMismatch(_))));
    }

    #[test]
    fn matrix_file_roundtrip() {
        let m = FeatureMatrix::from_dense(ids(2), cols(&["a", "b"]), &[vec![0.1, 0.0], vec![-2.5, 1.0 / 3.0]])
            .unwrap()
            .with_labels(vec![true, false])
            .unwrap();
        let (mut meta, mut trip) = (Vec::new(), Vec::new());
        m.write(&mut meta, &mut trip).unwrap();
        let back = FeatureMatrix::read(&meta[..], &trip[..]).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn hstack_and_counts() {
        let a = FeatureMatrix::from_rows(ids(1), vec![Column::simple("C0000001", Source::Concept)], vec![vec![(0, 1.0)]]).unwrap();
        let b = FeatureMatrix::from_rows(
            ids(1),
            vec![
                Column::new("race=White", Source::Clinical, "race"),
                Column::new("race=Black", Source::Clinical, "race"),
            ],
            vec![vec![(0, 1.0)]],
        )
        .unwrap();
        let m = FeatureMatrix::hstack(&[&a, &b]).unwrap();
        assert_eq!(m.n_cols(), 3);
        assert_eq!(m.get(0, 1), 1.0);
        let c = m.counts();
        assert_eq!((c.variables, c.columns), (2, 3));
        assert_eq!(c.by_source["clinical"], SourceCount { variables: 1, columns: 2 });
    }
}
