//! Stratified splitting, repeated stratified cross-validation and held-out
//! evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureCounts, FeatureError, FeatureMatrix, VariantConfig};
use crate::pipeline::{Cohort, FittedFeatures, PipelineError};
use crate::stats::{self, StatsError};
use crate::svm::{self, SvmError, SvmParams, TrainedModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("split ratio must be in (0, 1), got {0}")]
    Ratio(f64),
    #[error("need at least 2 folds, got {0}")]
    Folds(usize),
    #[error("{} class has {count} member(s) but the split needs at least {needed}, so a fold or part would hold none", if *.class { "positive" } else { "negative" })]
    SmallClass { class: bool, count: usize, needed: usize },
    #[error("matrix has no labels")]
    MissingLabels,
    #[error("replicates must be at least 1")]
    Replicates,
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

fn class_members(labels: &[bool], class: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
    members.shuffle(rng);
    members
}

/// Per-class shuffled split. The training size is `ratio·n` rounded half to
/// even; it is divided among classes in proportion to class size with
/// largest-remainder rounding.
pub fn stratified_split(labels: &[bool], ratio: f64, seed: u64) -> Result<SplitPlan, EvalError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(EvalError::Ratio(ratio));
    }
    let n = labels.len();
    let n_pos = labels.iter().filter(|&&l| l).count();
    for (class, count) in [(true, n_pos), (false, n - n_pos)] {
        if count < 2 {
            return Err(EvalError::SmallClass { class, count, needed: 2 });
        }
    }
    let n_train = (ratio * n as f64).round_ties_even() as usize;
    let classes = [true, false];
    let exact: Vec<f64> = classes
        .iter()
        .map(|&c| {
            let nc = if c { n_pos } else { n - n_pos };
            nc as f64 * n_train as f64 / n as f64
        })
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut by_remainder: Vec<usize> = (0..classes.len()).collect();
    by_remainder.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = n_train - quota.iter().sum::<usize>();
    for &c in by_remainder.iter().take(short) {
        quota[c] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(n_train);
    let mut heldout = Vec::with_capacity(n - n_train);
    for (ci, &class) in classes.iter().enumerate() {
        let members = class_members(labels, class, &mut rng);
        train.extend_from_slice(&members[..quota[ci]]);
        heldout.extend_from_slice(&members[quota[ci]..]);
    }
    train.sort_unstable();
    heldout.sort_unstable();
    Ok(SplitPlan { seed, train, heldout })
}

/// Fold id per row. Each class is shuffled and dealt round-robin, the
/// negatives continuing where the positives stopped, so fold sizes and
/// per-fold class counts differ by at most one.
pub fn stratified_kfold(labels: &[bool], k: usize, seed: u64) -> Result<Vec<usize>, EvalError> {
    if k < 2 {
        return Err(EvalError::Folds(k));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    for (class, count) in [(true, n_pos), (false, labels.len() - n_pos)] {
        if count < k {
            return Err(EvalError::SmallClass { class, count, needed: k });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for class in [true, false] {
        for i in class_members(labels, class, &mut rng) {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(folds)
}

/// Anything that can produce per-fold train and test matrices.
pub trait FoldData: Sync {
    fn labels(&self) -> Result<Vec<bool>, EvalError>;
    fn name(&self) -> String;
    /// Matrices for `train` and `test` rows; fit-dependent steps see only
    /// `train`.
    fn fold(&self, train: &[usize], test: &[usize]) -> Result<(FeatureMatrix, FeatureMatrix), EvalError>;
}

impl FoldData for FeatureMatrix {
    fn labels(&self) -> Result<Vec<bool>, EvalError> {
        Ok(FeatureMatrix::labels(self).ok_or(EvalError::MissingLabels)?.to_vec())
    }

    fn name(&self) -> String {
        "matrix".into()
    }

    fn fold(&self, train: &[usize], test: &[usize]) -> Result<(FeatureMatrix, FeatureMatrix), EvalError> {
        Ok((self.select_rows(train), self.select_rows(test)))
    }
}

/// A cohort built into one variant per fold.
#[derive(Debug, Clone, Copy)]
pub struct CohortVariant<'a> {
    pub cohort: &'a Cohort,
    pub config: VariantConfig,
}

impl FoldData for CohortVariant<'_> {
    fn labels(&self) -> Result<Vec<bool>, EvalError> {
        Ok(self.cohort.labels())
    }

    fn name(&self) -> String {
        self.config.variant.to_string()
    }

    fn fold(&self, train: &[usize], test: &[usize]) -> Result<(FeatureMatrix, FeatureMatrix), EvalError> {
        let (fitted, tr) = FittedFeatures::fit(self.config, self.cohort, train)?;
        let te = fitted.transform(self.cohort, test)?;
        Ok((tr, te))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// AUC over all held-out scores of a replicate.
    #[default]
    Pooled,
    /// Mean of per-fold AUCs.
    FoldMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvSettings {
    pub k: usize,
    pub replicates: usize,
    pub base_seed: u64,
    pub svm: SvmParams,
    pub pooling: Pooling,
}

impl Default for CvSettings {
    fn default() -> Self {
        CvSettings {
            k: 5,
            replicates: 20,
            base_seed: 0,
            svm: SvmParams::default(),
            pooling: Pooling::Pooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub replicate: usize,
    pub fold: Option<usize>,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub k: usize,
    pub replicates: usize,
    pub base_seed: u64,
    pub pooling: Pooling,
    pub replicate_aucs: Vec<f64>,
    /// `fold_aucs[r][f]`.
    pub fold_aucs: Vec<Vec<f64>>,
    /// Held-out positives per fold, `[r][f]`.
    pub fold_positives: Vec<Vec<usize>>,
    pub n_rows: usize,
    pub n_positive: usize,
    pub mean_auc: f64,
    pub sd_auc: f64,
    /// `mean (sd)` to two decimals.
    pub summary: String,
    /// One pooled curve per replicate.
    pub roc_curves: Vec<RocCurve>,
    /// Counts of the first fold's training matrix.
    pub feature_counts: FeatureCounts,
}

pub fn format_mean_sd(mean: f64, sd: f64) -> String {
    format!("{mean:.2} ({sd:.2})")
}

struct ReplicateResult {
    auc: f64,
    fold_aucs: Vec<f64>,
    fold_positives: Vec<usize>,
    roc: Vec<(f64, f64)>,
    counts: FeatureCounts,
}

fn fold_svm_params(base: &SvmParams, replicate_seed: u64, fold: usize) -> SvmParams {
    SvmParams {
        seed: replicate_seed.wrapping_mul(1000).wrapping_add(fold as u64),
        ..*base
    }
}

fn run_replicate<D: FoldData + ?Sized>(data: &D, labels: &[bool], settings: &CvSettings, r: usize) -> Result<ReplicateResult, EvalError> {
    let seed = settings.base_seed.wrapping_add(r as u64);
    let folds = stratified_kfold(labels, settings.k, seed)?;
    let mut scores = vec![0.0; labels.len()];
    let mut fold_aucs = Vec::with_capacity(settings.k);
    let mut fold_positives = Vec::with_capacity(settings.k);
    let mut counts = None;
    for f in 0..settings.k {
        let (train, test): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| folds[i] != f);
        let (tr, te) = data.fold(&train, &test)?;
        if counts.is_none() {
            counts = Some(tr.counts());
        }
        let (model, _) = svm::train_calibrated(&tr, &fold_svm_params(&settings.svm, seed, f))?;
        let probs = model.predict_proba_matrix(&te)?;
        let test_labels: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
        fold_aucs.push(stats::auc(&probs, &test_labels)?);
        fold_positives.push(test_labels.iter().filter(|&&l| l).count());
        for (&i, p) in test.iter().zip(probs) {
            scores[i] = p;
        }
    }
    let auc = match settings.pooling {
        Pooling::Pooled => stats::auc(&scores, labels)?,
        Pooling::FoldMean => stats::mean(&fold_aucs),
    };
    Ok(ReplicateResult {
        auc,
        fold_aucs,
        fold_positives,
        roc: stats::roc_points(&scores, labels)?,
        counts: counts.unwrap_or_default(),
    })
}

/// Repeated stratified k-fold CV. Replicate `r` uses seed `base_seed + r`;
/// replicates run in parallel and are collected in order.
pub fn repeated_cv<D: FoldData + ?Sized>(data: &D, settings: &CvSettings) -> Result<EvalReport, EvalError> {
    if settings.replicates == 0 {
        return Err(EvalError::Replicates);
    }
    let labels = data.labels()?;
    let results: Vec<ReplicateResult> = (0..settings.replicates)
        .into_par_iter()
        .map(|r| run_replicate(data, &labels, settings, r))
        .collect::<Result<_, _>>()?;
    let replicate_aucs: Vec<f64> = results.iter().map(|r| r.auc).collect();
    let mean_auc = stats::mean(&replicate_aucs);
    let sd_auc = stats::sample_sd(&replicate_aucs);
    Ok(EvalReport {
        variant: data.name(),
        k: settings.k,
        replicates: settings.replicates,
        base_seed: settings.base_seed,
        pooling: settings.pooling,
        n_rows: labels.len(),
        n_positive: labels.iter().filter(|&&l| l).count(),
        summary: format_mean_sd(mean_auc, sd_auc),
        mean_auc,
        sd_auc,
        feature_counts: results[0].counts.clone(),
        fold_aucs: results.iter().map(|r| r.fold_aucs.clone()).collect(),
        fold_positives: results.iter().map(|r| r.fold_positives.clone()).collect(),
        roc_curves: results
            .into_iter()
            .enumerate()
            .map(|(i, r)| RocCurve {
                replicate: i,
                fold: None,
                points: r.roc,
            })
            .collect(),
        replicate_aucs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub variant: String,
    pub n_train: usize,
    pub n_test: usize,
    pub positives_train: usize,
    pub positives_test: usize,
    pub auc: f64,
    pub roc: Vec<(f64, f64)>,
    pub feature_counts: FeatureCounts,
}

fn holdout_report(
    variant: String,
    tr: &FeatureMatrix,
    te: &FeatureMatrix,
    model: &TrainedModel,
) -> Result<HoldoutReport, EvalError> {
    let probs = model.predict_proba_matrix(te)?;
    let test_labels = te.labels().ok_or(EvalError::MissingLabels)?;
    let train_labels = tr.labels().ok_or(EvalError::MissingLabels)?;
    Ok(HoldoutReport {
        variant,
        n_train: tr.n_rows(),
        n_test: te.n_rows(),
        positives_train: train_labels.iter().filter(|&&l| l).count(),
        positives_test: test_labels.iter().filter(|&&l| l).count(),
        auc: stats::auc(&probs, test_labels)?,
        roc: stats::roc_points(&probs, test_labels)?,
        feature_counts: tr.counts(),
    })
}

/// Trains on the training part of a stratified split and scores the rest.
pub fn holdout<D: FoldData + ?Sized>(data: &D, ratio: f64, seed: u64, params: &SvmParams) -> Result<(HoldoutReport, TrainedModel), EvalError> {
    let labels = data.labels()?;
    let plan = stratified_split(&labels, ratio, seed)?;
    let (tr, te) = data.fold(&plan.train, &plan.heldout)?;
    let (model, _) = svm::train_calibrated(&tr, params)?;
    Ok((holdout_report(data.name(), &tr, &te, &model)?, model))
}

/// Fits on every patient of `train` and scores every patient of `test`.
pub fn train_test(train: &Cohort, test: &Cohort, config: VariantConfig, params: &SvmParams) -> Result<(HoldoutReport, TrainedModel), EvalError> {
    let (fitted, tr) = FittedFeatures::fit(config, train, &train.all_indices())?;
    let te = fitted.transform(test, &test.all_indices())?;
    let (model, _) = svm::train_calibrated(&tr, params)?;
    Ok((holdout_report(config.variant.to_string(), &tr, &te, &model)?, model))
}

/// ROC points as `fpr, tpr, replicate, fold` rows; `fold` is `pooled` for
/// replicate-level curves.
pub fn write_roc_tsv<W: Write>(curve: &RocCurve, mut out: W) -> Result<(), EvalError> {
    writeln!(out, "fpr\ttpr\treplicate\tfold")?;
    let fold = curve.fold.map_or_else(|| "pooled".to_string(), |f| f.to_string());
    for (x, y) in &curve.points {
        writeln!(out, "{x}\t{y}\t{}\t{fold}", curve.replicate)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Column, Source};

    #[test]
    fn split_examples() {
        let labels: Vec<bool> = (0..10).map(|i| i < 2).collect();
        let plan = stratified_split(&labels, 0.5, 3).unwrap();
        assert_eq!(plan.train.iter().filter(|&&i| labels[i]).count(), 1);
        assert_eq!(plan.heldout.iter().filter(|&&i| labels[i]).count(), 1);
        assert!(matches!(stratified_split(&labels, 1.0, 0), Err(EvalError::Ratio(_))));
        let one: Vec<bool> = (0..10).map(|i| i == 0).collect();
        assert!(matches!(stratified_split(&one, 0.5, 0), Err(EvalError::SmallClass { .. })));
    }

    #[test]
    fn split_partitions_rows() {
        let labels: Vec<bool> = (0..1995).map(|i| i < 193).collect();
        let plan = stratified_split(&labels, 0.7, 1).unwrap();
        assert_eq!((plan.train.len(), plan.heldout.len()), (1396, 599));
        let mut all: Vec<usize> = plan.train.iter().chain(&plan.heldout).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1995).collect::<Vec<_>>());
    }

    #[test]
    fn kfold_balance() {
        let labels: Vec<bool> = (0..103).map(|i| i % 9 == 0).collect();
        let folds = stratified_kfold(&labels, 5, 11).unwrap();
        let n_pos = labels.iter().filter(|&&l| l).count() as f64;
        for f in 0..5 {
            let pos = (0..103).filter(|&i| folds[i] == f && labels[i]).count() as f64;
            let size = folds.iter().filter(|&&x| x == f).count() as f64;
            assert!((pos - n_pos / 5.0).abs() <= 1.0);
            assert!((size - 103.0 / 5.0).abs() <= 1.0);
        }
        assert!(stratified_kfold(&labels, 1, 0).is_err());
        assert!(stratified_kfold(&labels[..20], 5, 0).is_err());
    }

    fn separable(n: usize) -> FeatureMatrix {
        let labels: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
        let dense: Vec<Vec<f64>> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| vec![if l { 2.0 } else { -2.0 }, (i % 7) as f64 / 7.0])
            .collect();
        FeatureMatrix::from_dense(
            (0..n).map(|i| format!("p{i}")).collect(),
            vec![Column::simple("x", Source::Clinical), Column::simple("noise", Source::Clinical)],
            &dense,
        )
        .unwrap()
        .with_labels(labels)
        .unwrap()
    }

    #[test]
    fn separable_cv_is_perfect_and_deterministic() {
        let m = separable(80);
        let settings = CvSettings {
            replicates: 3,
            ..CvSettings::default()
        };
        let a = repeated_cv(&m, &settings).unwrap();
        assert_eq!(a.mean_auc, 1.0);
        assert_eq!(a.sd_auc, 0.0);
        assert_eq!(a.summary, "1.00 (0.00)");
        assert_eq!(a.fold_aucs.len(), 3);
        assert_eq!(a.roc_curves.len(), 3);
        let b = repeated_cv(&m, &settings).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn roc_tsv_layout() {
        let curve = RocCurve {
            replicate: 2,
            fold: None,
            points: vec![(0.0, 0.0), (0.5, 1.0), (1.0, 1.0)],
        };
        let mut buf = Vec::new();
        write_roc_tsv(&curve, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().next(), Some("fpr\ttpr\treplicate\tfold"));
        assert_eq!(s.lines().nth(2), Some("0.5\t1\t2\tpooled"));
    }
}
