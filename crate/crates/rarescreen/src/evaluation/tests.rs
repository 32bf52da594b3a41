use proptest::prelude::*;

use super::*;
use crate::dataset::{assign_folds, assign_splits, build_balanced_subset};
use crate::synth::{generate, SynthSpec};

// ---------------------------------------------------------------------------
// roc_auc
// ---------------------------------------------------------------------------

#[test]
fn perfect_separation_gives_one() {
    let scores = [0.9, 0.8, 0.7, 0.2, 0.1];
    let labels = [1, 1, 1, 0, 0];
    let roc = roc_auc(&scores, &labels).unwrap();
    assert_eq!(roc.auc, 1.0);
    assert_eq!(roc.positives, 3);
    assert_eq!(roc.negatives, 2);
}

#[test]
fn all_tied_scores_give_half() {
    let scores = [0.5; 6];
    let labels = [1, 0, 1, 0, 1, 0];
    let roc = roc_auc(&scores, &labels).unwrap();
    assert_eq!(roc.auc, 0.5);
    // single tie group: curve jumps from (0,0) to (1,1)
    assert_eq!(roc.points.len(), 2);
}

/// Brute-force all-pairs Mann-Whitney: the oracle the implementation must
/// match exactly.
pub(crate) fn mann_whitney_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let mut concordant = 0u64;
    let mut tied = 0u64;
    let mut pairs = 0u64;
    for (i, (&si, &yi)) in scores.iter().zip(labels).enumerate() {
        if yi != 1 {
            continue;
        }
        for (j, (&sj, &yj)) in scores.iter().zip(labels).enumerate() {
            if yj != 0 || i == j {
                continue;
            }
            pairs += 1;
            if si > sj {
                concordant += 1;
            } else if si == sj {
                tied += 1;
            }
        }
    }
    (concordant as f64 + 0.5 * tied as f64) / pairs as f64
}

#[test]
fn tie_handling_matches_pair_enumeration() {
    let scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.4];
    let labels = [0, 0, 1, 1, 1, 0];
    let roc = roc_auc(&scores, &labels).unwrap();
    assert_eq!(roc.auc, mann_whitney_oracle(&scores, &labels));
}

#[test]
fn trapezoid_area_equals_auc() {
    let scores = [0.3, 0.3, 0.7, 0.1, 0.9, 0.5, 0.5, 0.2];
    let labels = [0, 1, 1, 0, 1, 0, 1, 0];
    let roc = roc_auc(&scores, &labels).unwrap();
    assert!((roc.trapezoid_area() - roc.auc).abs() < 1e-12);
}

#[test]
fn single_class_reported() {
    assert!(matches!(
        roc_auc(&[0.1, 0.2], &[1, 1]),
        Err(Error::SingleClass(_))
    ));
}

#[test]
fn curve_is_monotone() {
    let scores = [0.2, 0.9, 0.5, 0.5, 0.1, 0.7, 0.3];
    let labels = [0, 1, 1, 0, 0, 1, 1];
    let roc = roc_auc(&scores, &labels).unwrap();
    for w in roc.points.windows(2) {
        assert!(w[1].fpr >= w[0].fpr);
        assert!(w[1].tpr >= w[0].tpr);
        assert!(w[1].threshold <= w[0].threshold);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_matches_oracle_on_random_instances(
        raw in proptest::collection::vec((0u8..4, 0u8..2), 4..50),
    ) {
        // Coarse score grid so ties actually occur.
        let scores: Vec<f64> = raw.iter().map(|&(s, _)| f64::from(s) / 4.0).collect();
        let labels: Vec<u8> = raw.iter().map(|&(_, y)| y).collect();
        let positives = labels.iter().filter(|&&y| y == 1).count();
        prop_assume!(positives > 0 && positives < labels.len());
        let roc = roc_auc(&scores, &labels).unwrap();
        prop_assert_eq!(roc.auc, mann_whitney_oracle(&scores, &labels));
    }

    #[test]
    fn negated_scores_mirror_auc(
        raw in proptest::collection::vec((0.0f64..1.0, 0u8..2), 4..40),
    ) {
        let scores: Vec<f64> = raw.iter().map(|&(s, _)| s).collect();
        let labels: Vec<u8> = raw.iter().map(|&(_, y)| y).collect();
        let positives = labels.iter().filter(|&&y| y == 1).count();
        prop_assume!(positives > 0 && positives < labels.len());
        // continuous draws: ties have probability zero
        let forward = roc_auc(&scores, &labels).unwrap().auc;
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        let backward = roc_auc(&negated, &labels).unwrap().auc;
        prop_assert!((forward + backward - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_under_increasing_transform(
        raw in proptest::collection::vec((0.0f64..1.0, 0u8..2), 4..40),
    ) {
        let scores: Vec<f64> = raw.iter().map(|&(s, _)| s).collect();
        let labels: Vec<u8> = raw.iter().map(|&(_, y)| y).collect();
        let positives = labels.iter().filter(|&&y| y == 1).count();
        prop_assume!(positives > 0 && positives < labels.len());
        let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s + 1.0).exp()).collect();
        let a = roc_auc(&scores, &labels).unwrap().auc;
        let b = roc_auc(&transformed, &labels).unwrap().auc;
        prop_assert!((a - b).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------------------
// Protocol fixtures
// ---------------------------------------------------------------------------

struct Fixture {
    dataset: Dataset,
    splits: SplitAssignment,
    valid_folds: FoldAssignment,
    test_folds: FoldAssignment,
    params: PipelineParams,
}

fn protocol_fixture(seed: u64) -> Fixture {
    let spec = SynthSpec {
        p: 10,
        n_frequent: 3,
        n_rare: 1,
        samples_per_frequent: 40,
        samples_per_rare: 8,
        n_normal: Some(30),
        separation: 10.0,
        label_noise: 0.0,
        co_occurrence: 0.0,
        seed,
    };
    let dataset = generate(&spec).unwrap().to_dataset().unwrap();
    let balanced = build_balanced_subset(&dataset, 3, 1500, 5000, seed).unwrap();
    let splits = assign_splits(&dataset, &balanced, seed).unwrap();
    let folds_for = |split: Split| {
        let mut ids = Vec::new();
        let mut patients = Vec::new();
        for r in &dataset.records {
            if splits.get(&r.sample_id) == Some(split) {
                ids.push(r.sample_id.clone());
                patients.push(r.patient_id.clone());
            }
        }
        assign_folds(&ids, &patients, 5, seed).unwrap()
    };
    let valid_folds = folds_for(Split::Valid);
    let test_folds = folds_for(Split::Test);
    let params = PipelineParams {
        p_prime: Some(5),
        perplexity: 5.0,
        tsne_iterations: 250,
        n_folds: 5,
        ..PipelineParams::defaults(3, seed)
    };
    Fixture {
        dataset,
        splits,
        valid_folds,
        test_folds,
        params,
    }
}

#[test]
fn defaults_match_selected_parameter_values() {
    let params = PipelineParams::defaults(11, 0);
    assert_eq!(params.p_prime, Some(50));
    assert_eq!(params.output_dim, 2);
    assert_eq!(params.perplexity, 30.0);
    assert_eq!(params.k, 3);
    assert_eq!(params.n_folds, 10);
}

#[test]
fn cross_validation_scores_every_valid_sample_once() {
    let f = protocol_fixture(3);
    let report = cross_validate(&f.dataset, &f.splits, &f.valid_folds, &f.params).unwrap();
    assert_eq!(report.mode, "cross_validation");
    let n_valid = f
        .dataset
        .records
        .iter()
        .filter(|r| f.splits.get(&r.sample_id) == Some(Split::Valid))
        .count();
    // Every condition with a full set of usable folds pools each validation
    // sample exactly once.
    for outcome in &report.conditions {
        if outcome.folds_used == f.params.n_folds {
            let roc = outcome.roc.as_ref().expect("usable folds but no ROC");
            assert_eq!(roc.positives + roc.negatives, n_valid, "{}", outcome.name);
        }
    }
    assert_eq!(report.fold_reference_sizes.len(), 5);
    for (fold, &size) in report.fold_reference_sizes.iter().enumerate() {
        let in_fold = f.valid_folds.folds.values().filter(|&&v| v == fold).count();
        assert_eq!(size, n_valid - in_fold);
    }
}

#[test]
fn cross_testing_scores_every_test_sample_once() {
    let f = protocol_fixture(7);
    let report = cross_test(&f.dataset, &f.splits, &f.test_folds, &f.params).unwrap();
    assert_eq!(report.mode, "cross_testing");
    let n_valid = f
        .dataset
        .records
        .iter()
        .filter(|r| f.splits.get(&r.sample_id) == Some(Split::Valid))
        .count();
    let n_test = f
        .dataset
        .records
        .iter()
        .filter(|r| f.splits.get(&r.sample_id) == Some(Split::Test))
        .count();
    for outcome in &report.conditions {
        if outcome.folds_used == f.params.n_folds {
            let roc = outcome.roc.as_ref().unwrap();
            assert_eq!(roc.positives + roc.negatives, n_test, "{}", outcome.name);
        }
    }
    // Reference per fold: all of the validation split plus the other folds.
    for (fold, &size) in report.fold_reference_sizes.iter().enumerate() {
        let in_fold = f.test_folds.folds.values().filter(|&&v| v == fold).count();
        assert_eq!(size, n_valid + n_test - in_fold);
    }
}

#[test]
fn separable_fixture_reaches_high_auc() {
    let f = protocol_fixture(11);
    let report = cross_test(&f.dataset, &f.splits, &f.test_folds, &f.params).unwrap();
    for outcome in &report.conditions {
        let roc = outcome
            .roc
            .as_ref()
            .unwrap_or_else(|| panic!("{} skipped: {:?}", outcome.name, outcome.skipped_reason));
        assert!(roc.auc >= 0.95, "{}: AUC {}", outcome.name, roc.auc);
    }
    assert!(report.average_auc.unwrap() >= 0.95);
    assert!(report.average_auc_rare.unwrap() >= 0.95);
}

#[test]
fn same_seed_reports_identical() {
    let f = protocol_fixture(13);
    let a = cross_validate(&f.dataset, &f.splits, &f.valid_folds, &f.params).unwrap();
    let b = cross_validate(&f.dataset, &f.splits, &f.valid_folds, &f.params).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

#[test]
fn gaussian_output_variant_runs_the_full_protocol() {
    let mut f = protocol_fixture(37);
    f.params.kernel_variant = crate::tsne::KernelVariant::PaperSne;
    let report = cross_test(&f.dataset, &f.splits, &f.test_folds, &f.params).unwrap();
    for outcome in &report.conditions {
        let roc = outcome
            .roc
            .as_ref()
            .unwrap_or_else(|| panic!("{} skipped: {:?}", outcome.name, outcome.skipped_reason));
        assert!(roc.auc >= 0.9, "{}: AUC {}", outcome.name, roc.auc);
    }
}

#[test]
fn rare_average_covers_only_rare_conditions() {
    let f = protocol_fixture(17);
    let report = cross_test(&f.dataset, &f.splits, &f.test_folds, &f.params).unwrap();
    let rare_aucs: Vec<f64> = report
        .conditions
        .iter()
        .filter(|o| o.index > 3)
        .filter_map(|o| o.roc.as_ref().map(|r| r.auc))
        .collect();
    let expected = rare_aucs.iter().sum::<f64>() / rare_aucs.len() as f64;
    assert!((report.average_auc_rare.unwrap() - expected).abs() < 1e-15);
}

#[test]
fn patient_leak_detected() {
    let f = protocol_fixture(19);
    // Corrupt the split assignment: move one reference patient's sample into
    // the predicted side without regrouping.
    let mut splits = f.splits.clone();
    let mut folds = f.test_folds.clone();
    let valid_sample = f
        .dataset
        .records
        .iter()
        .find(|r| splits.get(&r.sample_id) == Some(Split::Valid))
        .unwrap();
    let patient = valid_sample.patient_id.clone();
    let other = f
        .dataset
        .records
        .iter()
        .find(|r| r.patient_id == patient && r.sample_id != valid_sample.sample_id)
        .cloned();
    let sample_id = valid_sample.sample_id.clone();
    if other.is_none() {
        // Give the patient a second sample on the predicted side.
        splits.assignments.insert(sample_id.clone(), Split::Valid);
    }
    // Plant the same patient in the test folds.
    let planted = other.map_or(sample_id, |r| r.sample_id);
    splits.assignments.insert(planted.clone(), Split::Test);
    folds.folds.insert(planted, 0);
    match cross_test(&f.dataset, &splits, &folds, &f.params) {
        Err(Error::PatientLeak { .. }) => {}
        other => panic!("expected patient leak, got {other:?}"),
    }
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

#[test]
fn sweep_emits_one_row_per_value() {
    let f = protocol_fixture(23);
    let values = vec!["1".to_string(), "3".into(), "5".into()];
    let table = parameter_sweep(
        &f.dataset,
        &f.splits,
        &f.valid_folds,
        &f.params,
        SweepParam::K,
        &values,
    )
    .unwrap();
    assert_eq!(table.rows.len(), 3);
    for (row, value) in table.rows.iter().zip(&values) {
        assert_eq!(row.param, "k");
        assert_eq!(&row.value, value);
        assert!(row.avg_auc.is_some());
    }
}

#[test]
fn sweep_defaults_row_matches_standalone_run() {
    let f = protocol_fixture(29);
    let table = parameter_sweep(
        &f.dataset,
        &f.splits,
        &f.valid_folds,
        &f.params,
        SweepParam::K,
        &["3".to_string()],
    )
    .unwrap();
    let standalone = cross_validate(&f.dataset, &f.splits, &f.valid_folds, &f.params).unwrap();
    assert_eq!(table.rows[0].avg_auc, standalone.average_auc);
    assert_eq!(table.rows[0].avg_auc_rare, standalone.average_auc_rare);
}

#[test]
fn sweep_pprime_inf_disables_projection() {
    let f = protocol_fixture(31);
    let table = parameter_sweep(
        &f.dataset,
        &f.splits,
        &f.valid_folds,
        &f.params,
        SweepParam::PPrime,
        &["inf".to_string()],
    )
    .unwrap();
    assert!(table.rows[0].avg_auc.is_some());
}

#[test]
fn sweep_rejects_unknown_param() {
    assert!(SweepParam::parse("gamma").is_err());
    assert_eq!(SweepParam::parse("pprime").unwrap(), SweepParam::PPrime);
}
