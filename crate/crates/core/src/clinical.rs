//! Structured clinical variables: parsing, derivation and numeric encoding.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::parse_date;
use crate::features::{Column, FeatureError, FeatureMatrix, Source};
use crate::text;

/// Patients CSV header, in order.
pub const PATIENT_COLUMNS: [&str; 22] = [
    "patient_id",
    "age_of_diagnosis",
    "race",
    "smoking",
    "alcohol",
    "family_cancer_history",
    "insurance",
    "er",
    "pr",
    "her2",
    "p53",
    "nodal_positivity",
    "histology",
    "grade",
    "size",
    "surgery",
    "deceased",
    "targeted_therapy",
    "radiation",
    "label",
    "diagnosis_date",
    "death_date",
];

/// The 18 clinical variables, in encoding order.
pub const CLINICAL_VARIABLES: [&str; 18] = [
    "age_of_diagnosis",
    "race",
    "smoking",
    "alcohol",
    "family_cancer_history",
    "insurance",
    "er",
    "pr",
    "her2",
    "p53",
    "nodal_positivity",
    "histology",
    "grade",
    "size",
    "surgery",
    "deceased",
    "targeted_therapy",
    "radiation",
];

pub const DECEASED_AGE_CUTOFF: f64 = 75.0;

#[derive(Debug, Error)]
pub enum ClinicalError {
    #[error("record rejected: missing {0}")]
    Missing(&'static str),
    #[error("record {patient_id}: age {age} outside (0, 130)")]
    AgeOutOfRange { patient_id: String, age: f64 },
    #[error("record {patient_id}: unparseable age '{value}'")]
    BadAge { patient_id: String, value: String },
    #[error("patients header mismatch: expected {expected}, found {found}")]
    Header { expected: String, found: String },
    #[error("encoder used before fit")]
    NotFitted,
    #[error("cannot fit encoder on an empty record set")]
    EmptyFit,
    #[error("drug list must not be empty")]
    EmptyDrugList,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

fn normalize_key(s: &str) -> String {
    s.trim()
        .to_ascii_lowercase()
        .chars()
        .filter(|c| !matches!(c, ' ' | '_' | '-'))
        .collect()
}

/// Categorical variable with a closed domain.
pub trait Categorical: Sized + Copy + 'static {
    const DOMAIN: &'static [Self];
    /// Value an unrecognized input maps to.
    const FALLBACK: Self;
    fn label(self) -> &'static str;
    fn aliases(self) -> &'static [&'static str];

    fn parse_value(s: &str) -> Option<Self> {
        let key = normalize_key(s);
        Self::DOMAIN.iter().copied().find(|v| {
            normalize_key(v.label()) == key || v.aliases().iter().any(|a| *a == key)
        })
    }

    fn domain_labels() -> Vec<&'static str> {
        Self::DOMAIN.iter().map(|v| v.label()).collect()
    }
}

macro_rules! categorical {
    ($(#[$meta:meta])* $name:ident, fallback = $fb:ident, { $($variant:ident => $label:literal $([$($alias:literal),*])?),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl Categorical for $name {
            const DOMAIN: &'static [Self] = &[$($name::$variant),+];
            const FALLBACK: Self = $name::$fb;

            fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }

            fn aliases(self) -> &'static [&'static str] {
                match self {
                    $($name::$variant => &[$($($alias),*)?]),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }
    };
}

categorical!(Race, fallback = Other, {
    White => "White",
    Black => "Black" ["africanamerican"],
    Asian => "Asian",
    Other => "Other",
});

categorical!(Smoking, fallback = Unknown, {
    Yes => "Yes" ["current", "smoker"],
    No => "No" ["never"],
    ExSmoker => "Ex-smoker" ["former", "formersmoker"],
    Unknown => "Unknown",
});

categorical!(Alcohol, fallback = Unknown, {
    No => "No" ["none"],
    Moderate => "Moderate",
    Heavy => "Heavy",
    Former => "Former",
    Unknown => "Unknown",
});

categorical!(YesNoUnknown, fallback = Unknown, {
    Yes => "Yes",
    No => "No",
    Unknown => "Unknown",
});

categorical!(
    /// Receptor, p53 and nodal status.
    Status, fallback = Unknown, {
    Positive => "Positive" ["pos", "+"],
    Negative => "Negative" ["neg", "-"],
    Unknown => "Unknown",
});

categorical!(Histology, fallback = Unknown, {
    Idc => "IDC" ["invasiveductalcarcinoma"],
    Dcis => "DCIS" ["ductalcarcinomainsitu"],
    Ilc => "ILC" ["invasivelobularcarcinoma"],
    Unknown => "Unknown",
});

categorical!(Grade, fallback = Unknown, {
    Grade1 => "Grade1" ["1", "g1"],
    Grade2 => "Grade2" ["2", "g2"],
    Grade3 => "Grade3" ["3", "g3"],
    Unknown => "Unknown",
});

categorical!(TumorSize, fallback = Unknown, {
    UpTo2cm => "0-2cm" ["02", "<2cm"],
    From2To5cm => "2-5cm" ["2cm5cm", "25"],
    Over5cm => ">5cm" ["5cm+"],
    Unknown => "Unknown",
});

categorical!(Surgery, fallback = Unknown, {
    Mastectomy => "Mastectomy",
    BreastConservation => "BreastConservation" ["breastconservationsurgery", "bcs", "lumpectomy"],
    No => "No" ["none"],
    Unknown => "Unknown",
});

categorical!(YesNo, fallback = No, {
    Yes => "Yes" ["y", "1", "true"],
    No => "No" ["n", "0", "false"],
});

impl YesNo {
    pub fn from_bool(b: bool) -> Self {
        if b {
            YesNo::Yes
        } else {
            YesNo::No
        }
    }

    pub fn is_yes(self) -> bool {
        self == YesNo::Yes
    }
}

categorical!(Label, fallback = NoDistantRecurrence, {
    DistantRecurrence => "DistantRecurrence" ["dr", "1", "yes", "true", "positive"],
    NoDistantRecurrence => "NoDistantRecurrence" ["nodr", "0", "no", "false", "negative"],
});

impl Label {
    pub fn is_recurrence(self) -> bool {
        self == Label::DistantRecurrence
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub age_of_diagnosis: f64,
    pub race: Race,
    pub smoking: Smoking,
    pub alcohol: Alcohol,
    pub family_cancer_history: YesNoUnknown,
    pub insurance: String,
    pub er: Status,
    pub pr: Status,
    pub her2: Status,
    pub p53: Status,
    pub nodal_positivity: Status,
    pub histology: Histology,
    pub grade: Grade,
    pub size: TumorSize,
    pub surgery: Surgery,
    pub deceased: YesNo,
    pub targeted_therapy: YesNo,
    pub radiation: YesNo,
    pub label: Option<Label>,
    pub diagnosis_date: Option<NaiveDate>,
    pub death_date: Option<NaiveDate>,
}

impl PatientRecord {
    /// `(variable, value label)` for every categorical variable except
    /// insurance, in encoding order.
    pub fn categorical_values(&self) -> [(&'static str, &'static str); 16] {
        [
            ("race", self.race.label()),
            ("smoking", self.smoking.label()),
            ("alcohol", self.alcohol.label()),
            ("family_cancer_history", self.family_cancer_history.label()),
            ("er", self.er.label()),
            ("pr", self.pr.label()),
            ("her2", self.her2.label()),
            ("p53", self.p53.label()),
            ("nodal_positivity", self.nodal_positivity.label()),
            ("histology", self.histology.label()),
            ("grade", self.grade.label()),
            ("size", self.size.label()),
            ("surgery", self.surgery.label()),
            ("deceased", self.deceased.label()),
            ("targeted_therapy", self.targeted_therapy.label()),
            ("radiation", self.radiation.label()),
        ]
    }

    /// Value label of any categorical variable, including insurance.
    pub fn categorical_value(&self, variable: &str) -> Option<&str> {
        if variable == "insurance" {
            return Some(&self.insurance);
        }
        self.categorical_values()
            .into_iter()
            .find(|(v, _)| *v == variable)
            .map(|(_, l)| l)
    }

    pub fn to_raw(&self) -> RawPatientRow {
        let s = |v: &str| Some(v.to_string());
        let date = |d: Option<NaiveDate>| d.map(|d| d.format("%Y-%m-%d").to_string());
        RawPatientRow {
            patient_id: s(&self.patient_id),
            age_of_diagnosis: Some(format!("{:?}", self.age_of_diagnosis)),
            race: s(self.race.label()),
            smoking: s(self.smoking.label()),
            alcohol: s(self.alcohol.label()),
            family_cancer_history: s(self.family_cancer_history.label()),
            insurance: s(&self.insurance),
            er: s(self.er.label()),
            pr: s(self.pr.label()),
            her2: s(self.her2.label()),
            p53: s(self.p53.label()),
            nodal_positivity: s(self.nodal_positivity.label()),
            histology: s(self.histology.label()),
            grade: s(self.grade.label()),
            size: s(self.size.label()),
            surgery: s(self.surgery.label()),
            deceased: s(self.deceased.label()),
            targeted_therapy: s(self.targeted_therapy.label()),
            radiation: s(self.radiation.label()),
            label: self.label.map(|l| l.label().to_string()),
            diagnosis_date: date(self.diagnosis_date),
            death_date: date(self.death_date),
        }
    }
}

/// One patients-CSV row as text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPatientRow {
    pub patient_id: Option<String>,
    pub age_of_diagnosis: Option<String>,
    pub race: Option<String>,
    pub smoking: Option<String>,
    pub alcohol: Option<String>,
    pub family_cancer_history: Option<String>,
    pub insurance: Option<String>,
    pub er: Option<String>,
    pub pr: Option<String>,
    pub her2: Option<String>,
    pub p53: Option<String>,
    pub nodal_positivity: Option<String>,
    pub histology: Option<String>,
    pub grade: Option<String>,
    pub size: Option<String>,
    pub surgery: Option<String>,
    pub deceased: Option<String>,
    pub targeted_therapy: Option<String>,
    pub radiation: Option<String>,
    pub label: Option<String>,
    pub diagnosis_date: Option<String>,
    pub death_date: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRecord {
    pub record: PatientRecord,
    pub warnings: Vec<String>,
}

fn present(v: &Option<String>) -> Option<&str> {
    v.as_deref().map(str::trim).filter(|s| !s.is_empty())
}

fn parse_cat<T: Categorical>(field: &'static str, raw: &Option<String>, warnings: &mut Vec<String>) -> T {
    match present(raw) {
        None => T::FALLBACK,
        Some(v) => T::parse_value(v).unwrap_or_else(|| {
            warnings.push(format!("{field}: unrecognized value '{v}' mapped to {}", T::FALLBACK.label()));
            T::FALLBACK
        }),
    }
}

/// Validates one row. Categorical values are matched case-insensitively and
/// out-of-domain values fall back (usually to `Unknown`) with a warning.
/// When `deceased` is blank it is derived from the death and diagnosis dates.
pub fn parse_record(row: &RawPatientRow) -> Result<ParsedRecord, ClinicalError> {
    let patient_id = present(&row.patient_id)
        .ok_or(ClinicalError::Missing("patient_id"))?
        .to_string();
    let age_raw = present(&row.age_of_diagnosis).ok_or(ClinicalError::Missing("age_of_diagnosis"))?;
    let age: f64 = age_raw.parse().map_err(|_| ClinicalError::BadAge {
        patient_id: patient_id.clone(),
        value: age_raw.to_string(),
    })?;
    if !(age > 0.0 && age < 130.0) {
        return Err(ClinicalError::AgeOutOfRange { patient_id, age });
    }

    let mut w = Vec::new();
    let date = |field: &'static str, raw: &Option<String>, w: &mut Vec<String>| {
        present(raw).and_then(|s| {
            let d = parse_date(s);
            if d.is_none() {
                w.push(format!("{field}: unparseable date '{s}'"));
            }
            d
        })
    };
    let diagnosis_date = date("diagnosis_date", &row.diagnosis_date, &mut w);
    let death_date = date("death_date", &row.death_date, &mut w);

    let deceased = match present(&row.deceased) {
        Some(_) => parse_cat("deceased", &row.deceased, &mut w),
        None => derive_deceased(death_age(age, diagnosis_date, death_date)),
    };
    let label = match present(&row.label) {
        None => None,
        Some(v) => {
            let l = Label::parse_value(v);
            if l.is_none() {
                w.push(format!("label: unrecognized value '{v}' treated as unlabeled"));
            }
            l
        }
    };

    let record = PatientRecord {
        patient_id,
        age_of_diagnosis: age,
        race: parse_cat("race", &row.race, &mut w),
        smoking: parse_cat("smoking", &row.smoking, &mut w),
        alcohol: parse_cat("alcohol", &row.alcohol, &mut w),
        family_cancer_history: parse_cat("family_cancer_history", &row.family_cancer_history, &mut w),
        insurance: present(&row.insurance).unwrap_or("Unknown").to_string(),
        er: parse_cat("er", &row.er, &mut w),
        pr: parse_cat("pr", &row.pr, &mut w),
        her2: parse_cat("her2", &row.her2, &mut w),
        p53: parse_cat("p53", &row.p53, &mut w),
        nodal_positivity: parse_cat("nodal_positivity", &row.nodal_positivity, &mut w),
        histology: parse_cat("histology", &row.histology, &mut w),
        grade: parse_cat("grade", &row.grade, &mut w),
        size: parse_cat("size", &row.size, &mut w),
        surgery: parse_cat("surgery", &row.surgery, &mut w),
        deceased,
        targeted_therapy: parse_cat("targeted_therapy", &row.targeted_therapy, &mut w),
        radiation: parse_cat("radiation", &row.radiation, &mut w),
        label,
        diagnosis_date,
        death_date,
    };
    Ok(ParsedRecord { record, warnings: w })
}

#[derive(Debug, Clone, Default)]
pub struct PatientTable {
    pub records: Vec<PatientRecord>,
    /// `(1-based data row, reason)` for rejected rows.
    pub rejects: Vec<(usize, String)>,
    pub warnings: Vec<String>,
}

impl PatientTable {
    pub fn diagnosis_dates(&self) -> HashMap<String, NaiveDate> {
        self.records
            .iter()
            .filter_map(|r| r.diagnosis_date.map(|d| (r.patient_id.clone(), d)))
            .collect()
    }
}

pub fn read_patients<R: Read>(reader: R) -> Result<PatientTable, ClinicalError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != PATIENT_COLUMNS {
        return Err(ClinicalError::Header {
            expected: PATIENT_COLUMNS.join(","),
            found: header.join(","),
        });
    }
    let mut table = PatientTable::default();
    for (i, row) in rdr.deserialize::<RawPatientRow>().enumerate() {
        match row.map_err(ClinicalError::from).and_then(|r| parse_record(&r)) {
            Ok(parsed) => {
                table
                    .warnings
                    .extend(parsed.warnings.into_iter().map(|w| format!("row {}: {w}", i + 1)));
                table.records.push(parsed.record);
            }
            Err(e) => table.rejects.push((i + 1, e.to_string())),
        }
    }
    Ok(table)
}

pub fn write_patients<W: Write>(records: &[PatientRecord], writer: W) -> Result<(), ClinicalError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r.to_raw())?;
    }
    if records.is_empty() {
        w.write_record(PATIENT_COLUMNS)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Age at death from the diagnosis age and the two dates.
pub fn death_age(age_of_diagnosis: f64, diagnosis: Option<NaiveDate>, death: Option<NaiveDate>) -> Option<f64> {
    let (dx, dd) = (diagnosis?, death?);
    Some(age_of_diagnosis + (dd - dx).num_days() as f64 / 365.25)
}

/// Yes iff a death is recorded before age 75.
pub fn derive_deceased(death_age: Option<f64>) -> YesNo {
    YesNo::from_bool(death_age.is_some_and(|a| a < DECEASED_AGE_CUTOFF))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugList {
    names: BTreeSet<String>,
}

impl DrugList {
    pub fn new<I: IntoIterator<Item = S>, S: AsRef<str>>(names: I) -> Result<Self, ClinicalError> {
        let names: BTreeSet<String> = names
            .into_iter()
            .map(|s| s.as_ref().trim().to_ascii_lowercase())
            .filter(|s| !s.is_empty())
            .collect();
        if names.is_empty() {
            return Err(ClinicalError::EmptyDrugList);
        }
        Ok(DrugList { names })
    }

    pub fn names(&self) -> &BTreeSet<String> {
        &self.names
    }
}

impl Default for DrugList {
    fn default() -> Self {
        DrugList::new(["afinitor", "everolimus", "bevacizumab", "avastin", "ibrance", "palbociclib"])
            .expect("non-empty")
    }
}

/// Yes iff any medication name contains a listed drug as a whole word.
pub fn derive_targeted_therapy<S: AsRef<str>>(medications: &[S], drugs: &DrugList) -> YesNo {
    YesNo::from_bool(
        medications
            .iter()
            .any(|m| text::tokenize(m.as_ref()).iter().any(|t| drugs.names.contains(t))),
    )
}

pub fn default_metastatic_sites() -> BTreeSet<String> {
    ["brain", "lung", "bone", "liver"].into_iter().map(String::from).collect()
}

/// Yes iff any treated site is a metastatic site.
pub fn derive_radiation<S: AsRef<str>>(sites: &[S], metastatic_sites: &BTreeSet<String>) -> YesNo {
    YesNo::from_bool(sites.iter().any(|s| metastatic_sites.contains(s.as_ref().trim())))
}

/// Reads a `patient_id,value` auxiliary CSV into per-patient value lists.
pub fn read_auxiliary<R: Read>(reader: R) -> Result<BTreeMap<String, Vec<String>>, ClinicalError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if let (Some(pid), Some(value)) = (rec.get(0), rec.get(1)) {
            out.entry(pid.to_string()).or_default().push(value.to_string());
        }
    }
    Ok(out)
}

/// Re-derives targeted therapy and radiation from auxiliary lists. Patients
/// absent from a provided list are set to No.
pub fn apply_auxiliary(
    records: &mut [PatientRecord],
    medications: Option<&BTreeMap<String, Vec<String>>>,
    radiation_sites: Option<&BTreeMap<String, Vec<String>>>,
    drugs: &DrugList,
    metastatic_sites: &BTreeSet<String>,
) {
    for r in records {
        if let Some(meds) = medications {
            let list = meds.get(&r.patient_id).map(Vec::as_slice).unwrap_or(&[]);
            r.targeted_therapy = derive_targeted_therapy(list, drugs);
        }
        if let Some(sites) = radiation_sites {
            let list: Vec<String> = sites
                .get(&r.patient_id)
                .map(|v| v.iter().map(|s| s.to_ascii_lowercase()).collect())
                .unwrap_or_default();
            r.radiation = derive_radiation(&list, metastatic_sites);
        }
    }
}

const BINARY_VARIABLES: [&str; 3] = ["deceased", "targeted_therapy", "radiation"];

fn domain_of(variable: &str) -> Vec<&'static str> {
    match variable {
        "race" => Race::domain_labels(),
        "smoking" => Smoking::domain_labels(),
        "alcohol" => Alcohol::domain_labels(),
        "family_cancer_history" => YesNoUnknown::domain_labels(),
        "er" | "pr" | "her2" | "p53" | "nodal_positivity" => Status::domain_labels(),
        "histology" => Histology::domain_labels(),
        "grade" => Grade::domain_labels(),
        "size" => TumorSize::domain_labels(),
        "surgery" => Surgery::domain_labels(),
        "deceased" | "targeted_therapy" | "radiation" => YesNo::domain_labels(),
        _ => Vec::new(),
    }
}

/// Domain of a closed categorical variable (empty for age and insurance).
pub fn variable_domain(variable: &str) -> Vec<&'static str> {
    domain_of(variable)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EncoderState {
    age_mean: f64,
    age_sd: f64,
    insurance: Vec<String>,
    columns: Vec<Column>,
}

/// Standardizes age and one-hot encodes categoricals using statistics and
/// insurance categories from the training records only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClinicalEncoder {
    state: Option<EncoderState>,
}

impl ClinicalEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_fitted(&self) -> bool {
        self.state.is_some()
    }

    pub fn fit(&mut self, records: &[PatientRecord]) -> Result<(), ClinicalError> {
        if records.is_empty() {
            return Err(ClinicalError::EmptyFit);
        }
        let n = records.len() as f64;
        let mean = records.iter().map(|r| r.age_of_diagnosis).sum::<f64>() / n;
        let var = if records.len() > 1 {
            records
                .iter()
                .map(|r| (r.age_of_diagnosis - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0)
        } else {
            0.0
        };
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        let insurance: Vec<String> = records
            .iter()
            .map(|r| r.insurance.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();

        let mut columns = vec![Column::simple("age_of_diagnosis", Source::Clinical)];
        for var in &CLINICAL_VARIABLES[1..] {
            if BINARY_VARIABLES.contains(var) {
                columns.push(Column::simple(*var, Source::Clinical));
            } else if *var == "insurance" {
                for cat in &insurance {
                    columns.push(Column::new(format!("insurance={cat}"), Source::Clinical, "insurance"));
                }
            } else {
                for cat in domain_of(var) {
                    columns.push(Column::new(format!("{var}={cat}"), Source::Clinical, *var));
                }
            }
        }
        self.state = Some(EncoderState {
            age_mean: mean,
            age_sd: sd,
            insurance,
            columns,
        });
        Ok(())
    }

    pub fn columns(&self) -> Result<&[Column], ClinicalError> {
        Ok(&self.state.as_ref().ok_or(ClinicalError::NotFitted)?.columns)
    }

    /// Sparse `(column, value)` encoding of one record.
    pub fn encode_sparse(&self, record: &PatientRecord) -> Result<Vec<(usize, f64)>, ClinicalError> {
        let st = self.state.as_ref().ok_or(ClinicalError::NotFitted)?;
        let mut out = vec![(0, (record.age_of_diagnosis - st.age_mean) / st.age_sd)];
        let mut offset = 1;
        let values = record.categorical_values();
        for var in &CLINICAL_VARIABLES[1..] {
            if BINARY_VARIABLES.contains(var) {
                let yes = values.iter().any(|(v, l)| v == var && *l == "Yes");
                if yes {
                    out.push((offset, 1.0));
                }
                offset += 1;
            } else if *var == "insurance" {
                if let Ok(i) = st.insurance.binary_search(&record.insurance) {
                    out.push((offset + i, 1.0));
                }
                offset += st.insurance.len();
            } else {
                let domain = domain_of(var);
                let label = values.iter().find(|(v, _)| v == var).map(|(_, l)| *l);
                if let Some(i) = domain.iter().position(|d| Some(*d) == label) {
                    out.push((offset + i, 1.0));
                }
                offset += domain.len();
            }
        }
        Ok(out)
    }

    pub fn encode(&self, record: &PatientRecord) -> Result<Vec<f64>, ClinicalError> {
        let mut dense = vec![0.0; self.columns()?.len()];
        for (i, v) in self.encode_sparse(record)? {
            dense[i] = v;
        }
        Ok(dense)
    }

    pub fn encode_all(&self, records: &[&PatientRecord]) -> Result<FeatureMatrix, ClinicalError> {
        let columns = self.columns()?.to_vec();
        let entries = records
            .iter()
            .map(|r| self.encode_sparse(r))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FeatureMatrix::from_rows(
            records.iter().map(|r| r.patient_id.clone()).collect(),
            columns,
            entries,
        )?)
    }
}
