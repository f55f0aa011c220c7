//! L2-regularized hinge-loss linear SVM trained by dual coordinate descent,
//! with Platt-scaled probabilities.
//!
//! The bias is learned as the weight of an implicit constant feature equal
//! to 1, so it is regularized together with `w`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval;
use crate::features::{Column, FeatureMatrix, Source};

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("training matrix has no labels")]
    MissingLabels,
    #[error("training data contains a single class")]
    SingleClass,
    #[error("non-finite feature value at row {row}")]
    NonFinite { row: usize },
    #[error("C must be positive and finite, got {0}")]
    BadC(f64),
    #[error("row width {found} does not match model width {expected}")]
    Width { expected: usize, found: usize },
    #[error("matrix columns do not match model columns")]
    ColumnMismatch,
    #[error("model is not calibrated")]
    Uncalibrated,
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    pub tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            c: 1.0,
            tol: 1e-4,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

/// Solver diagnostics. Objectives are recorded at the end of every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub converged: bool,
    /// Largest projected-gradient magnitude over all examples at the final
    /// iterate.
    pub max_violation: f64,
    pub primal: Vec<f64>,
    pub dual: Vec<f64>,
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub columns: Vec<Column>,
    pub weights: Vec<f64>,
    pub bias: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub tol: f64,
    pub seed: u64,
    pub platt_a: Option<f64>,
    pub platt_b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCoefficient {
    pub name: String,
    pub source: Source,
    pub coefficient: f64,
}

fn sparse_dot(w: &[f64], idx: &[usize], val: &[f64]) -> f64 {
    idx.iter().zip(val).map(|(&j, &v)| w[j] * v).sum()
}

fn check_training(matrix: &FeatureMatrix, c: f64) -> Result<Vec<f64>, SvmError> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(SvmError::BadC(c));
    }
    let labels = matrix.labels().ok_or(SvmError::MissingLabels)?;
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(SvmError::SingleClass);
    }
    for i in 0..matrix.n_rows() {
        if matrix.row(i).1.iter().any(|v| !v.is_finite()) {
            return Err(SvmError::NonFinite { row: i });
        }
    }
    Ok(labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect())
}

fn primal_objective(matrix: &FeatureMatrix, y: &[f64], w: &[f64], b: f64, c: f64) -> f64 {
    let reg = 0.5 * (w.iter().map(|x| x * x).sum::<f64>() + b * b);
    let loss: f64 = (0..matrix.n_rows())
        .map(|i| {
            let (idx, val) = matrix.row(i);
            (1.0 - y[i] * (sparse_dot(w, idx, val) + b)).max(0.0)
        })
        .sum();
    reg + c * loss
}

fn dual_objective(w: &[f64], b: f64, alpha: &[f64]) -> f64 {
    alpha.iter().sum::<f64>() - 0.5 * (w.iter().map(|x| x * x).sum::<f64>() + b * b)
}

fn projected_gradient(g: f64, alpha: f64, c: f64) -> f64 {
    if alpha <= 0.0 {
        g.min(0.0)
    } else if alpha >= c {
        g.max(0.0)
    } else {
        g
    }
}

/// Trains an uncalibrated model.
pub fn train(matrix: &FeatureMatrix, params: &SvmParams) -> Result<(TrainedModel, TrainReport), SvmError> {
    let c = params.c;
    let y = check_training(matrix, c)?;
    let n = matrix.n_rows();
    let mut w = vec![0.0; matrix.n_cols()];
    let mut b = 0.0;
    let mut alpha = vec![0.0; n];
    let qii: Vec<f64> = (0..n)
        .map(|i| matrix.row(i).1.iter().map(|v| v * v).sum::<f64>() + 1.0)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport {
        epochs: 0,
        converged: false,
        max_violation: f64::INFINITY,
        primal: Vec::new(),
        dual: Vec::new(),
        alphas: Vec::new(),
    };

    while report.epochs < params.max_epochs {
        order.shuffle(&mut rng);
        let mut max_pg: f64 = 0.0;
        for &i in &order {
            let (idx, val) = matrix.row(i);
            let g = y[i] * (sparse_dot(&w, idx, val) + b) - 1.0;
            let pg = projected_gradient(g, alpha[i], c);
            max_pg = max_pg.max(pg.abs());
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qii[i]).clamp(0.0, c);
                let d = (alpha[i] - old) * y[i];
                for (&j, &v) in idx.iter().zip(val) {
                    w[j] += d * v;
                }
                b += d;
            }
        }
        report.epochs += 1;
        report.primal.push(primal_objective(matrix, &y, &w, b, c));
        report.dual.push(dual_objective(&w, b, &alpha));
        if max_pg < params.tol {
            report.converged = true;
            break;
        }
    }

    report.max_violation = (0..n)
        .map(|i| {
            let (idx, val) = matrix.row(i);
            let g = y[i] * (sparse_dot(&w, idx, val) + b) - 1.0;
            projected_gradient(g, alpha[i], c).abs()
        })
        .fold(0.0, f64::max);
    report.alphas = alpha;

    let model = TrainedModel {
        columns: matrix.columns().to_vec(),
        weights: w,
        bias: b,
        c,
        tol: params.tol,
        seed: params.seed,
        platt_a: None,
        platt_b: None,
    };
    Ok((model, report))
}

impl TrainedModel {
    pub fn is_calibrated(&self) -> bool {
        self.platt_a.is_some() && self.platt_b.is_some()
    }

    /// `w·x + b` for a dense row.
    pub fn decision(&self, row: &[f64]) -> Result<f64, SvmError> {
        if row.len() != self.weights.len() {
            return Err(SvmError::Width {
                expected: self.weights.len(),
                found: row.len(),
            });
        }
        Ok(self.weights.iter().zip(row).map(|(w, x)| w * x).sum::<f64>() + self.bias)
    }

    /// Decision values for every row. Columns must match the model's by name
    /// and order.
    pub fn decision_values(&self, matrix: &FeatureMatrix) -> Result<Vec<f64>, SvmError> {
        if matrix.n_cols() != self.columns.len()
            || matrix.columns().iter().zip(&self.columns).any(|(a, b)| a.name != b.name)
        {
            return Err(SvmError::ColumnMismatch);
        }
        Ok((0..matrix.n_rows())
            .map(|i| {
                let (idx, val) = matrix.row(i);
                sparse_dot(&self.weights, idx, val) + self.bias
            })
            .collect())
    }

    pub fn probability_of(&self, decision: f64) -> Result<f64, SvmError> {
        match (self.platt_a, self.platt_b) {
            (Some(a), Some(b)) => Ok(sigmoid_prob(a * decision + b)),
            _ => Err(SvmError::Uncalibrated),
        }
    }

    pub fn predict_proba(&self, row: &[f64]) -> Result<f64, SvmError> {
        self.probability_of(self.decision(row)?)
    }

    pub fn predict_proba_matrix(&self, matrix: &FeatureMatrix) -> Result<Vec<f64>, SvmError> {
        self.decision_values(matrix)?
            .into_iter()
            .map(|f| self.probability_of(f))
            .collect()
    }

    /// Columns by coefficient descending, ties by name, truncated to `top_k`.
    pub fn rank_coefficients(&self, top_k: usize) -> Vec<RankedCoefficient> {
        let mut ranked: Vec<RankedCoefficient> = self
            .columns
            .iter()
            .zip(&self.weights)
            .map(|(col, &w)| RankedCoefficient {
                name: col.name.clone(),
                source: col.source,
                coefficient: w,
            })
            .collect();
        ranked.sort_by(|a, b| b.coefficient.total_cmp(&a.coefficient).then_with(|| a.name.cmp(&b.name)));
        ranked.truncate(top_k);
        ranked
    }

    pub fn to_json(&self) -> Result<String, SvmError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, SvmError> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `1 / (1 + exp(z))` without overflow.
pub fn sigmoid_prob(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// Platt sigmoid parameters `(a, b)` with `P(y=1|f) = 1/(1+exp(a·f+b))`.
///
/// Newton's method with backtracking on the regularized targets. When every
/// decision value is equal, returns `a = 0` and the `b` that reproduces the
/// mean target.
pub fn fit_platt(decisions: &[f64], labels: &[bool]) -> Result<(f64, f64), SvmError> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(SvmError::SingleClass);
    }
    let hi = (n_pos as f64 + 1.0) / (n_pos as f64 + 2.0);
    let lo = 1.0 / (n_neg as f64 + 2.0);
    let t: Vec<f64> = labels.iter().map(|&l| if l { hi } else { lo }).collect();

    if decisions.iter().all(|&f| f == decisions[0]) {
        let m = t.iter().sum::<f64>() / t.len() as f64;
        return Ok((0.0, ((1.0 - m) / m).ln()));
    }

    const MAX_ITER: usize = 100;
    const MIN_STEP: f64 = 1e-10;
    const SIGMA: f64 = 1e-12;
    const EPS: f64 = 1e-8;

    let objective = |a: f64, b: f64| -> f64 {
        decisions
            .iter()
            .zip(&t)
            .map(|(&f, &ti)| {
                let z = f * a + b;
                if z >= 0.0 {
                    ti * z + (-z).exp().ln_1p()
                } else {
                    (ti - 1.0) * z + z.exp().ln_1p()
                }
            })
            .sum()
    };

    let mut a = 0.0;
    let mut b = ((n_neg as f64 + 1.0) / (n_pos as f64 + 1.0)).ln();
    let mut fval = objective(a, b);
    for _ in 0..MAX_ITER {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (SIGMA, SIGMA, 0.0, 0.0, 0.0);
        for (&f, &ti) in decisions.iter().zip(&t) {
            let z = f * a + b;
            let (p, q) = if z >= 0.0 {
                let e = (-z).exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = z.exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            let d2 = p * q;
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = ti - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.hypot(g2) < EPS {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        while step >= MIN_STEP {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                break;
            }
            step /= 2.0;
        }
        if step < MIN_STEP {
            break;
        }
    }
    Ok((a, b))
}

const PLATT_FOLDS: usize = 3;

/// Trains on all rows, then fits Platt scaling on decision values from an
/// internal stratified 3-fold cross-fit. If a class has fewer than three
/// members, in-sample decision values are used instead.
pub fn train_calibrated(matrix: &FeatureMatrix, params: &SvmParams) -> Result<(TrainedModel, TrainReport), SvmError> {
    let (mut model, report) = train(matrix, params)?;
    let labels = matrix.labels().ok_or(SvmError::MissingLabels)?.to_vec();
    let decisions = match eval::stratified_kfold(&labels, PLATT_FOLDS, params.seed) {
        Ok(folds) => {
            let mut out = vec![0.0; labels.len()];
            for k in 0..PLATT_FOLDS {
                let (tr, te): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| folds[i] != k);
                let (sub, _) = train(&matrix.select_rows(&tr), params)?;
                for (i, f) in te.iter().zip(sub.decision_values(&matrix.select_rows(&te))?) {
                    out[*i] = f;
                }
            }
            out
        }
        Err(_) => model.decision_values(matrix)?,
    };
    let (a, b) = fit_platt(&decisions, &labels)?;
    model.platt_a = Some(a);
    model.platt_b = Some(b);
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[Vec<f64>], labels: &[bool]) -> FeatureMatrix {
        let ids = (0..rows.len()).map(|i| format!("r{i}")).collect();
        let cols = (0..rows[0].len()).map(|j| Column::simple(format!("x{j}"), Source::Clinical)).collect();
        FeatureMatrix::from_dense(ids, cols, rows).unwrap().with_labels(labels.to_vec()).unwrap()
    }

    fn tight() -> SvmParams {
        SvmParams {
            tol: 1e-10,
            max_epochs: 100_000,
            ..SvmParams::default()
        }
    }

    #[test]
    fn one_dimensional_toy() {
        let m = matrix(&[vec![-1.0], vec![1.0]], &[false, true]);
        let (model, report) = train(&m, &tight()).unwrap();
        assert!(report.converged);
        assert!((model.weights[0] - 1.0).abs() < 1e-6);
        assert!(model.bias.abs() < 1e-6);
        assert!((model.decision(&[0.5]).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn decision_examples() {
        let model = TrainedModel {
            columns: vec![Column::simple("a", Source::Concept), Column::simple("b", Source::Concept)],
            weights: vec![1.0, 0.0],
            bias: 0.0,
            c: 1.0,
            tol: 1e-4,
            seed: 0,
            platt_a: None,
            platt_b: None,
        };
        assert_eq!(model.decision(&[2.0, 5.0]).unwrap(), 2.0);
        assert_eq!(model.decision(&[0.0, 0.0]).unwrap(), model.bias);
        assert!(matches!(model.decision(&[1.0]), Err(SvmError::Width { .. })));
        assert!(matches!(model.predict_proba(&[1.0, 0.0]), Err(SvmError::Uncalibrated)));
    }

    #[test]
    fn rejects_bad_input() {
        let m = matrix(&[vec![1.0], vec![2.0]], &[true, true]);
        assert!(matches!(train(&m, &SvmParams::default()), Err(SvmError::SingleClass)));
        let m = matrix(&[vec![1.0], vec![2.0]], &[true, false]);
        assert!(matches!(
            train(&m, &SvmParams { c: 0.0, ..SvmParams::default() }),
            Err(SvmError::BadC(_))
        ));
    }

    #[test]
    fn zero_column_has_zero_weight() {
        let rows = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![2.0, 0.0], vec![-0.5, 0.0]];
        let (model, _) = train(&matrix(&rows, &[true, false, true, false]), &SvmParams::default()).unwrap();
        assert_eq!(model.weights[1], 0.0);
    }

    #[test]
    fn duplicated_rows_with_half_c() {
        let rows = vec![vec![1.0, 0.3], vec![-1.0, 0.5], vec![0.2, -0.4], vec![-0.3, 0.1], vec![0.7, 0.9]];
        let labels = [true, false, true, false, false];
        let (m1, _) = train(&matrix(&rows, &labels), &tight()).unwrap();
        let doubled: Vec<Vec<f64>> = rows.iter().chain(&rows).cloned().collect();
        let dl: Vec<bool> = labels.iter().chain(&labels).copied().collect();
        let (m2, _) = train(&matrix(&doubled, &dl), &SvmParams { c: 0.5, ..tight() }).unwrap();
        for (a, b) in m1.weights.iter().zip(&m2.weights) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((m1.bias - m2.bias).abs() < 1e-6);
    }

    #[test]
    fn platt_examples() {
        assert_eq!(sigmoid_prob(0.0), 0.5);
        let (a, b) = fit_platt(&[-2.0, -1.0, 1.0, 2.0], &[false, false, true, true]).unwrap();
        assert!(b.abs() < 1e-6);
        assert!(a < 0.0);

        let labels: Vec<bool> = (0..10).map(|i| i < 3).collect();
        let (a, b) = fit_platt(&[0.7; 10], &labels).unwrap();
        assert_eq!(a, 0.0);
        let expected = (3.0 * 0.8 + 7.0 / 9.0) / 10.0;
        assert!((sigmoid_prob(b) - expected).abs() < 1e-12);
        assert!((expected - 0.3178).abs() < 1e-4);
    }

    #[test]
    fn calibrated_probabilities_are_ordered() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 - 20.0) / 10.0 + if i % 7 == 0 { 1.5 } else { 0.0 }]).collect();
        let labels: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        let (model, _) = train_calibrated(&matrix(&rows, &labels), &SvmParams::default()).unwrap();
        assert!(model.platt_a.unwrap() < 0.0);
        let p: Vec<f64> = [0.1, 0.5, 2.0]
            .iter()
            .map(|&f| model.probability_of(f).unwrap())
            .collect();
        assert!(p[0] < p[1] && p[1] < p[2]);
        let mid = -model.platt_b.unwrap() / model.platt_a.unwrap();
        assert!((model.probability_of(mid).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ranking_and_json_roundtrip() {
        let model = TrainedModel {
            columns: ["a", "b", "c"].iter().map(|n| Column::simple(*n, Source::Concept)).collect(),
            weights: vec![0.2, 0.9, -0.1],
            bias: 0.1 + 0.2,
            c: 1.0,
            tol: 1e-4,
            seed: 7,
            platt_a: Some(-1.234_567_890_123_456_7),
            platt_b: Some(1e-17),
        };
        let names: Vec<String> = model.rank_coefficients(3).into_iter().map(|r| r.name).collect();
        assert_eq!(names, ["b", "a", "c"]);
        assert_eq!(model.rank_coefficients(1).len(), 1);
        let back = TrainedModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        assert!(model.to_json().unwrap().contains("\"C\""));
    }
}
