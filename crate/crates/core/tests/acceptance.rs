//! Acceptance criteria. One PASS/FAIL line per criterion; exits nonzero when
//! any criterion fails.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recur_core::concept::{Lexicon, LexiconEntry};
use recur_core::corpus::CueLexicon;
use recur_core::eval::{self, CohortVariant, CvSettings};
use recur_core::features::{self, Column, FeatureMatrix, Source, Variant, VariantConfig};
use recur_core::pipeline::{self, Cohort, ContextOptions, FittedFeatures};
use recur_core::stats;
use recur_core::svm::{self, SvmParams};
use recur_core::synth::{self, GeneratorSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// 1. published-count contingency tables

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let tables: [(&str, [[f64; 2]; 2], f64); 4] = [
        ("deceased", [[98.0, 95.0], [59.0, 1743.0]], 2.2e-16),
        ("radiation", [[52.0, 141.0], [15.0, 1787.0]], 2.2e-16),
        ("targeted_therapy", [[44.0, 149.0], [16.0, 1786.0]], 2.2e-16),
        ("nodal_positivity", [[103.0, 90.0], [441.0, 1361.0]], 1e-10),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, t, bound) in tables {
        let rows: Vec<Vec<f64>> = t.iter().map(|r| r.to_vec()).collect();
        let r = stats::chi2_independence(&rows).expect("chi-square");
        let p = r.p_value.unwrap();
        let ok = p < bound && (bound > 1e-15 || r.p_display() == "< 2.2e-16");
        pass &= ok;
        parts.push(format!("{name} p={}", r.p_display()));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(1);
    outcome(pass, format!("{}; {:.1} ms", parts.join(", "), elapsed.as_secs_f64() * 1e3))
}

// ---------------------------------------------------------------------------
// 2. feature counts with an 83-entry dictionary

fn criterion_2() -> Outcome {
    let mut entries = Lexicon::default_lexicon().entries().to_vec();
    let base = entries.iter().filter(|e| e.in_custom_dictionary).count();
    for i in 0..(83 - base) {
        let cui = format!("C99{i:05}");
        let phrase = format!("marker{i}");
        entries.push(LexiconEntry::new(&cui, &phrase, &[&phrase], true).unwrap());
    }
    let lexicon = Lexicon::new(entries).unwrap();
    let dictionary = lexicon.custom_dictionary();

    let spec = GeneratorSpec {
        n: 300,
        ..GeneratorSpec::default()
    };
    let cohort = synth::generate(&spec).unwrap();
    let (built, _) = pipeline::cohort_from_notes(
        cohort.notes,
        &cohort.records,
        &lexicon,
        &CueLexicon::default_cues(),
        ContextOptions::default(),
        NaiveDate::MAX,
    )
    .unwrap();
    assert_eq!(built.dictionary.len(), dictionary.len());

    let mut found = BTreeMap::new();
    for v in [Variant::FilteredPlusClinical, Variant::ClinicalOnly, Variant::FilteredConcepts] {
        let (_, m) = FittedFeatures::fit(VariantConfig::new(v), &built, &built.all_indices()).unwrap();
        found.insert(v, m.counts().variables);
    }
    let expected = [
        (Variant::FilteredPlusClinical, 101),
        (Variant::ClinicalOnly, 18),
        (Variant::FilteredConcepts, 83),
    ];
    let pass = dictionary.len() == 83 && expected.iter().all(|(v, n)| found[v] == *n);
    let detail = expected
        .iter()
        .map(|(v, n)| format!("{v}={} (want {n})", found[v]))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("dictionary={}; {detail}", dictionary.len()))
}

// ---------------------------------------------------------------------------
// 3 and 4. synthetic held-out reproduction

struct Heldout {
    train: Cohort,
    test: Cohort,
    bayes_auc: f64,
}

fn synthetic_heldout(options: ContextOptions) -> Heldout {
    let train_spec = GeneratorSpec::default();
    let test_spec = GeneratorSpec {
        n: 2000,
        seed: train_spec.seed + 1,
        ..train_spec.clone()
    };
    let lexicon = train_spec.lexicon().unwrap();
    let cues = CueLexicon::default_cues();
    let build = |spec: &GeneratorSpec| {
        let c = synth::generate(spec).unwrap();
        let oracle = synth::bayes_oracle(spec, &c).unwrap();
        let (cohort, _) =
            pipeline::cohort_from_notes(c.notes, &c.records, &lexicon, &cues, options, NaiveDate::MAX).unwrap();
        (cohort, oracle.bayes_auc.unwrap())
    };
    let (train, _) = build(&train_spec);
    let (test, bayes_auc) = build(&test_spec);
    Heldout { train, test, bayes_auc }
}

fn heldout_auc(h: &Heldout, v: Variant) -> f64 {
    let (report, _) = eval::train_test(&h.train, &h.test, VariantConfig::new(v), &SvmParams::default()).unwrap();
    report.auc
}

fn criterion_3() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let start = Instant::now();
        let h = synthetic_heldout(ContextOptions::default());
        let combined = heldout_auc(&h, Variant::FilteredPlusClinical);
        let clinical = heldout_auc(&h, Variant::ClinicalOnly);
        let concepts = heldout_auc(&h, Variant::FilteredConcepts);
        let elapsed = start.elapsed().as_secs_f64();
        let pass = combined >= clinical + 0.01
            && combined >= concepts + 0.01
            && combined >= h.bayes_auc - 0.03
            && elapsed < 60.0;
        outcome(
            pass,
            format!(
                "combined={combined:.4} clinical_only={clinical:.4} filtered_concepts={concepts:.4} bayes={:.4}; {elapsed:.1} s on 1 thread",
                h.bayes_auc
            ),
        )
    })
}

fn criterion_4() -> Outcome {
    let full = heldout_auc(&synthetic_heldout(ContextOptions::default()), Variant::FilteredPlusClinical);
    let raw = heldout_auc(&synthetic_heldout(ContextOptions::disabled()), Variant::FilteredPlusClinical);
    outcome(
        full - raw >= 0.02,
        format!("with filters={full:.4} without={raw:.4} drop={:.4}", full - raw),
    )
}

// ---------------------------------------------------------------------------
// 5. AUC against brute-force pair counting

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_mw: f64 = 0.0;
    let mut worst_trap: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=50);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let levels = rng.random_range(1..=8);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels)) * 0.25).collect();
        let expected = brute_auc(&scores, &labels);
        let a = stats::auc(&scores, &labels).unwrap();
        let area = stats::trapezoid_area(&stats::roc_points(&scores, &labels).unwrap());
        worst_mw = worst_mw.max((a - expected).abs());
        worst_trap = worst_trap.max((area - a).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst_mw <= 1e-12 && worst_trap <= 1e-12 && elapsed < Duration::from_secs(5),
        format!(
            "max |MW - brute|={worst_mw:.1e}, max |trapezoid - MW|={worst_trap:.1e}; {:.0} ms",
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. SVM solver

fn matrix(rows: &[Vec<f64>], labels: &[bool]) -> FeatureMatrix {
    let ncol = rows[0].len();
    let columns = (0..ncol).map(|j| Column::simple(format!("x{j}"), Source::Clinical)).collect();
    let ids = (0..rows.len()).map(|i| format!("r{i}")).collect();
    FeatureMatrix::from_dense(ids, columns, rows).unwrap().with_labels(labels.to_vec()).unwrap()
}

fn criterion_6() -> Outcome {
    // ±1 are the support vectors; ±2 sit outside the margin
    let toy = matrix(
        &[vec![-2.0], vec![-1.0], vec![1.0], vec![2.0]],
        &[false, false, true, true],
    );
    let params = SvmParams {
        c: 10.0,
        tol: 1e-8,
        ..SvmParams::default()
    };
    let (m, r) = svm::train(&toy, &params).unwrap();
    let toy_ok = (m.weights[0] - 1.0).abs() <= 1e-3 && m.bias.abs() <= 1e-3 && r.converged;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut monotone = true;
    let mut kkt = true;
    let mut identical = true;
    let mut worst_rise: f64 = 0.0;
    let mut worst_kkt: f64 = 0.0;
    let mut worst_dual_drop: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    for trial in 0..20 {
        let n = 60;
        let d = 5;
        let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| {
                (0..d)
                    .map(|_| rng.random_range(-1.0..1.0) + if l { 0.6 } else { 0.0 })
                    .collect()
            })
            .collect();
        let data = matrix(&rows, &labels);
        let params = SvmParams {
            c: [0.1, 1.0, 10.0][trial % 3],
            seed: trial as u64,
            // the KKT bound is stated at convergence; C = 10 can need
            // a few thousand epochs
            max_epochs: 50_000,
            ..SvmParams::default()
        };
        let (m1, r1) = svm::train(&data, &params).unwrap();
        let (m2, _) = svm::train(&data, &params).unwrap();
        identical &= m1.to_json().unwrap() == m2.to_json().unwrap();
        for w in r1.primal.windows(2) {
            let rise = w[1] - w[0];
            worst_rise = worst_rise.max(rise);
            monotone &= rise <= 1e-12 * w[0].abs().max(1.0);
        }
        for w in r1.dual.windows(2) {
            worst_dual_drop = worst_dual_drop.max(w[0] - w[1]);
        }
        let (p, d) = (*r1.primal.last().unwrap(), *r1.dual.last().unwrap());
        worst_gap = worst_gap.max((p - d) / p);
        worst_kkt = worst_kkt.max(r1.max_violation);
        kkt &= r1.converged && r1.max_violation <= 10.0 * params.tol;
    }
    outcome(
        toy_ok && monotone && kkt && identical,
        format!(
            "toy (w,b)=({:.6},{:.6}); max primal rise={worst_rise:.2e} (dual max drop={worst_dual_drop:.1e}, final relative gap<={worst_gap:.1e}); max KKT violation={worst_kkt:.2e}; bit-identical={identical}",
            m.weights[0], m.bias
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. chi-square ranking against exact recomputation

/// `(Op·Nn − On·Np)² / (Np·Nn·T)` kept as an exact fraction.
fn exact_chi2(col: &[u32], labels: &[bool]) -> (i128, i128) {
    let np = labels.iter().filter(|&&l| l).count() as i128;
    let nn = labels.len() as i128 - np;
    let (mut op, mut on) = (0i128, 0i128);
    for (&v, &l) in col.iter().zip(labels) {
        if l {
            op += i128::from(v);
        } else {
            on += i128::from(v);
        }
    }
    let t = op + on;
    if t == 0 {
        return (0, 1);
    }
    let d = op * nn - on * np;
    (d * d, np * nn * t)
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..100 {
        let n = rng.random_range(4..=20);
        let m = rng.random_range(2..=12);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let cols: Vec<Vec<u32>> = (0..m)
            .map(|_| (0..n).map(|_| if rng.random_bool(0.5) { 0 } else { rng.random_range(1..3) }).collect())
            .collect();
        // shuffled names so name order differs from index order
        let mut names: Vec<String> = (0..m).map(|j| format!("f{:02}", (j * 7 + 3) % 97)).collect();
        names.dedup();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| cols.iter().map(|c| f64::from(c[i])).collect()).collect();
        let columns = names.iter().map(|s| Column::simple(s.clone(), Source::Concept)).collect();
        let ids = (0..n).map(|i| format!("r{i}")).collect();
        let fm = FeatureMatrix::from_dense(ids, columns, &rows).unwrap().with_labels(labels.clone()).unwrap();

        let exact: Vec<(i128, i128)> = cols.iter().map(|c| exact_chi2(c, &labels)).collect();
        let mut expected: Vec<usize> = (0..m).collect();
        expected.sort_by(|&a, &b| {
            let (na, da) = exact[a];
            let (nb, db) = exact[b];
            (nb * da).cmp(&(na * db)).then_with(|| names[a].cmp(&names[b]))
        });
        for w in expected.windows(2) {
            if exact[w[0]].0 * exact[w[1]].1 == exact[w[1]].0 * exact[w[0]].1 {
                ties += 1;
            }
        }
        let got: Vec<usize> = features::chi2_rank(&fm).unwrap().into_iter().map(|(j, _)| j).collect();
        if got != expected {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} of 100 rankings differ; {ties} tied neighbours exercised"),
    )
}

// ---------------------------------------------------------------------------
// 8. repeated stratified CV on the synthetic cohort

fn criterion_8() -> Outcome {
    let spec = GeneratorSpec::default();
    let c = synth::generate(&spec).unwrap();
    let (cohort, _) = pipeline::cohort_from_notes(
        c.notes,
        &c.records,
        &spec.lexicon().unwrap(),
        &CueLexicon::default_cues(),
        ContextOptions::default(),
        NaiveDate::MAX,
    )
    .unwrap();
    let data = CohortVariant {
        cohort: &cohort,
        config: VariantConfig::new(Variant::FilteredPlusClinical),
    };
    let settings = CvSettings {
        base_seed: 2020,
        ..CvSettings::default()
    };
    let a = eval::repeated_cv(&data, &settings).unwrap();
    let b = eval::repeated_cv(&data, &settings).unwrap();
    let target = a.n_positive as f64 / 5.0;
    let worst = a
        .fold_positives
        .iter()
        .flatten()
        .map(|&p| (p as f64 - target).abs())
        .fold(0.0, f64::max);
    let folds = a.fold_positives.iter().map(Vec::len).sum::<usize>();
    let s = &a.summary;
    let layout = s.len() == 11
        && s.as_bytes()[1] == b'.'
        && s[5..7] == *"(0"
        && s.ends_with(')')
        && s.chars().filter(char::is_ascii_digit).count() == 6;
    let identical = serde_json::to_string(&a).unwrap() == serde_json::to_string(&b).unwrap();
    outcome(
        folds == 100 && worst <= 1.0 && layout && identical,
        format!(
            "{folds} folds, max |positives - {target:.1}|={worst:.1}; summary \"{s}\"; identical reruns={identical}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. statistics unit oracles

fn criterion_9() -> Outcome {
    let kappa = stats::cohens_kappa_table(&[vec![45.0, 5.0], vec![5.0, 45.0]]).unwrap().statistic;
    let same = [1.0, 2.0, 3.0, 4.0, 5.0];
    let t = stats::t_test_two_sample(&same, &same, false).unwrap().p_value.unwrap();
    let chi = stats::chi2_independence(&[vec![20.0, 10.0], vec![10.0, 20.0]]).unwrap();
    let chi_p = chi.p_value.unwrap();
    let pass = kappa == 0.8
        && t == 1.0
        && (chi.statistic - 6.667).abs() <= 0.001
        && (chi_p - 0.0098).abs() <= 0.0002;
    outcome(
        pass,
        format!(
            "kappa={kappa}; identical-sample p={t}; chi2={:.4} p={chi_p:.5}",
            chi.statistic
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. split sizes

fn criterion_10() -> Outcome {
    let labels: Vec<bool> = (0..1995).map(|i| i < 193).collect();
    let plan = eval::stratified_split(&labels, 0.7, 0).unwrap();
    let pos_train = plan.train.iter().filter(|&&i| labels[i]).count();
    let pos_test = plan.heldout.iter().filter(|&&i| labels[i]).count();
    let pass = plan.train.len() == 1396
        && plan.heldout.len() == 599
        && pos_train.abs_diff(138) <= 1
        && pos_test.abs_diff(55) <= 1;
    outcome(
        pass,
        format!(
            "sizes {}/{}; positives {pos_train}/{pos_test} (want 138±1/55±1)",
            plan.train.len(),
            plan.heldout.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("published-count chi-square", criterion_1),
        ("feature-count parity", criterion_2),
        ("synthetic held-out reproduction", criterion_3),
        ("context-filter sensitivity", criterion_4),
        ("AUC oracle equivalence", criterion_5),
        ("SVM correctness", criterion_6),
        ("chi-square selection equivalence", criterion_7),
        ("stratified repeated CV", criterion_8),
        ("statistics unit oracles", criterion_9),
        ("split parity", criterion_10),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "{} criterion {id:>2} {name}: {}",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
