//! AUC/ROC, two-sample and independence tests, inter-rater agreement and the
//! descriptive cohort table.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::clinical::{variable_domain, PatientRecord, CLINICAL_VARIABLES};

/// Smallest p-value printed as a number.
pub const P_FLOOR: f64 = 2.2e-16;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("both classes must be present")]
    SingleClass,
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    Length { scores: usize, labels: usize },
    #[error("NaN score")]
    NonFinite,
    #[error("each sample needs at least 2 observations")]
    SampleSize,
    #[error("contingency table has a zero marginal")]
    ZeroMarginal,
    #[error("contingency table must be at least 2x2 and rectangular")]
    TableShape,
    #[error("annotation sequences differ in length")]
    AnnotationLength,
    #[error("no labeled records")]
    NoLabels,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    StudentsTTwoSample,
    WelchTTwoSample,
    ChiSquaredIndependence,
    CohensKappa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: TestKind,
    pub statistic: f64,
    pub df: Option<f64>,
    pub p_value: Option<f64>,
    /// Zero variance with unequal means.
    #[serde(default)]
    pub degenerate: bool,
}

impl TestResult {
    pub fn p_display(&self) -> String {
        self.p_value.map(format_p).unwrap_or_else(|| "NA".into())
    }
}

/// p-values under [`P_FLOOR`] print as `"< 2.2e-16"`.
pub fn format_p(p: f64) -> String {
    if p < P_FLOOR {
        "< 2.2e-16".into()
    } else if p >= 0.001 {
        format!("{p:.4}")
    } else {
        format!("{p:.2e}")
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), StatsError> {
    if scores.len() != labels.len() {
        return Err(StatsError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(StatsError::NonFinite);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(StatsError::SingleClass);
    }
    Ok((pos, neg))
}

/// Mann–Whitney AUC with midranks for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, StatsError> {
    let (n_pos, n_neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1
        let midrank = (i + j + 2) as f64 / 2.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC points with a threshold at every distinct score, highest first.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>, StatsError> {
    let (n_pos, n_neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(points)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Two-sided two-sample t-test, pooled variance unless `welch`.
pub fn t_test_two_sample(a: &[f64], b: &[f64], welch: bool) -> Result<TestResult, StatsError> {
    if a.len() < 2 || b.len() < 2 || a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(StatsError::SampleSize);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_sd(a).powi(2), sample_sd(b).powi(2));
    let (se, df, kind) = if welch {
        let se2 = va / na + vb / nb;
        let df = if se2 > 0.0 {
            se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0))
        } else {
            na + nb - 2.0
        };
        (se2.sqrt(), df, TestKind::WelchTTwoSample)
    } else {
        let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
        ((pooled * (1.0 / na + 1.0 / nb)).sqrt(), na + nb - 2.0, TestKind::StudentsTTwoSample)
    };
    let diff = ma - mb;
    if se == 0.0 {
        let degenerate = diff != 0.0;
        return Ok(TestResult {
            kind,
            statistic: if degenerate { diff.signum() * f64::INFINITY } else { 0.0 },
            df: Some(df),
            p_value: Some(if degenerate { 0.0 } else { 1.0 }),
            degenerate,
        });
    }
    let t = diff / se;
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    Ok(TestResult {
        kind,
        statistic: t,
        df: Some(df),
        p_value: Some((2.0 * dist.sf(t.abs())).min(1.0)),
        degenerate: false,
    })
}

/// Pearson chi-square test of independence without continuity correction.
pub fn chi2_independence(table: &[Vec<f64>]) -> Result<TestResult, StatsError> {
    let r = table.len();
    let c = table.first().map_or(0, Vec::len);
    if r < 2 || c < 2 || table.iter().any(|row| row.len() != c) {
        return Err(StatsError::TableShape);
    }
    let row_sums: Vec<f64> = table.iter().map(|row| row.iter().sum()).collect();
    let col_sums: Vec<f64> = (0..c).map(|j| table.iter().map(|row| row[j]).sum()).collect();
    if row_sums.iter().chain(&col_sums).any(|&s| s <= 0.0) {
        return Err(StatsError::ZeroMarginal);
    }
    let total: f64 = row_sums.iter().sum();
    let mut stat = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &o) in row.iter().enumerate() {
            let e = row_sums[i] * col_sums[j] / total;
            stat += (o - e).powi(2) / e;
        }
    }
    let df = ((r - 1) * (c - 1)) as f64;
    let dist = ChiSquared::new(df).expect("df > 0");
    Ok(TestResult {
        kind: TestKind::ChiSquaredIndependence,
        statistic: stat,
        df: Some(df),
        p_value: Some(dist.sf(stat)),
        degenerate: false,
    })
}

/// Cohen's kappa from a square confusion table. Defined as 1 when chance
/// agreement is 1.
pub fn cohens_kappa_table(table: &[Vec<f64>]) -> Result<TestResult, StatsError> {
    let k = table.len();
    if k == 0 || table.iter().any(|row| row.len() != k) {
        return Err(StatsError::TableShape);
    }
    let n: f64 = table.iter().flatten().sum();
    if n <= 0.0 {
        return Err(StatsError::ZeroMarginal);
    }
    let p_o = (0..k).map(|i| table[i][i]).sum::<f64>() / n;
    let p_e = (0..k)
        .map(|i| {
            let row: f64 = table[i].iter().sum();
            let col: f64 = table.iter().map(|r| r[i]).sum();
            row * col
        })
        .sum::<f64>()
        / (n * n);
    let kappa = if p_e == 1.0 { 1.0 } else { (p_o - p_e) / (1.0 - p_e) };
    Ok(TestResult {
        kind: TestKind::CohensKappa,
        statistic: kappa,
        df: None,
        p_value: None,
        degenerate: false,
    })
}

pub fn cohens_kappa<T: Ord + Clone>(a: &[T], b: &[T]) -> Result<TestResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::AnnotationLength);
    }
    let cats: Vec<T> = a
        .iter()
        .chain(b)
        .cloned()
        .collect::<std::collections::BTreeSet<T>>()
        .into_iter()
        .collect();
    let mut table = vec![vec![0.0; cats.len()]; cats.len()];
    for (x, y) in a.iter().zip(b) {
        let i = cats.binary_search(x).expect("collected");
        let j = cats.binary_search(y).expect("collected");
        table[i][j] += 1.0;
    }
    cohens_kappa_table(&table)
}

/// One line of the descriptive table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveRow {
    pub variable: String,
    /// Category label, or `mean (sd)` for age.
    pub category: String,
    pub recurrence: String,
    pub no_recurrence: String,
    pub test: TestResult,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveTable {
    pub n_recurrence: usize,
    pub n_no_recurrence: usize,
    pub rows: Vec<DescriptiveRow>,
    /// Variables left out, with the reason.
    pub skipped: Vec<(String, String)>,
}

fn pct(k: usize, n: usize) -> String {
    format!("{k} ({:.1}%)", 100.0 * k as f64 / n as f64)
}

/// Compares recurrence and non-recurrence groups on every clinical variable:
/// t-test for age, chi-square for categoricals. With `only_significant`,
/// variables with p ≥ 0.05 are dropped.
pub fn descriptive_table(records: &[PatientRecord], only_significant: bool) -> Result<DescriptiveTable, StatsError> {
    let labeled: Vec<(&PatientRecord, bool)> = records
        .iter()
        .filter_map(|r| r.label.map(|l| (r, l.is_recurrence())))
        .collect();
    let dr: Vec<&PatientRecord> = labeled.iter().filter(|(_, l)| *l).map(|(r, _)| *r).collect();
    let nodr: Vec<&PatientRecord> = labeled.iter().filter(|(_, l)| !*l).map(|(r, _)| *r).collect();
    if dr.is_empty() || nodr.is_empty() {
        return Err(StatsError::NoLabels);
    }
    let mut table = DescriptiveTable {
        n_recurrence: dr.len(),
        n_no_recurrence: nodr.len(),
        ..Default::default()
    };
    let keep = |t: &TestResult| !only_significant || t.p_value.is_some_and(|p| p < 0.05);

    let ages = |g: &[&PatientRecord]| g.iter().map(|r| r.age_of_diagnosis).collect::<Vec<_>>();
    let (a, b) = (ages(&dr), ages(&nodr));
    match t_test_two_sample(&a, &b, false) {
        Ok(t) if keep(&t) => table.rows.push(DescriptiveRow {
            variable: "age_of_diagnosis".into(),
            category: "mean (sd)".into(),
            recurrence: format!("{:.1} ({:.1})", mean(&a), sample_sd(&a)),
            no_recurrence: format!("{:.1} ({:.1})", mean(&b), sample_sd(&b)),
            test: t,
        }),
        Ok(_) => {}
        Err(e) => table.skipped.push(("age_of_diagnosis".into(), e.to_string())),
    }

    for var in &CLINICAL_VARIABLES[1..] {
        let mut cats: Vec<String> = variable_domain(var).into_iter().map(String::from).collect();
        if cats.is_empty() {
            let mut seen: Vec<String> = labeled
                .iter()
                .filter_map(|(r, _)| r.categorical_value(var).map(String::from))
                .collect();
            seen.sort();
            seen.dedup();
            cats = seen;
        }
        let count = |g: &[&PatientRecord], cat: &str| g.iter().filter(|r| r.categorical_value(var) == Some(cat)).count();
        let observed: Vec<(String, usize, usize)> = cats
            .into_iter()
            .map(|c| {
                let (x, y) = (count(&dr, &c), count(&nodr, &c));
                (c, x, y)
            })
            .filter(|(_, x, y)| x + y > 0)
            .collect();
        if observed.len() < 2 {
            table.skipped.push((var.to_string(), "single observed category".into()));
            continue;
        }
        let contingency = vec![
            observed.iter().map(|(_, x, _)| *x as f64).collect::<Vec<_>>(),
            observed.iter().map(|(_, _, y)| *y as f64).collect::<Vec<_>>(),
        ];
        let test = match chi2_independence(&contingency) {
            Ok(t) => t,
            Err(e) => {
                table.skipped.push((var.to_string(), e.to_string()));
                continue;
            }
        };
        if !keep(&test) {
            continue;
        }
        for (cat, x, y) in observed {
            table.rows.push(DescriptiveRow {
                variable: var.to_string(),
                category: cat,
                recurrence: pct(x, dr.len()),
                no_recurrence: pct(y, nodr.len()),
                test: test.clone(),
            });
        }
    }
    Ok(table)
}

/// Tab-separated rendering with header
/// `variable, category, recurrence, no_recurrence, statistic, df, p_value`.
pub fn write_descriptive_tsv<W: Write>(table: &DescriptiveTable, mut out: W) -> Result<(), StatsError> {
    writeln!(
        out,
        "variable\tcategory\trecurrence (n={})\tno_recurrence (n={})\tstatistic\tdf\tp_value",
        table.n_recurrence, table.n_no_recurrence
    )?;
    for row in &table.rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.4}\t{}\t{}",
            row.variable,
            row.category,
            row.recurrence,
            row.no_recurrence,
            row.test.statistic,
            row.test.df.map(|d| format!("{d}")).unwrap_or_default(),
            row.test.p_display()
        )?;
    }
    Ok(())
}
