use proptest::prelude::*;

use super::*;
use crate::pca::fit_pca;
use crate::rng::SeededRng;

fn bare_predictor(reference_pi: Vec<Vec<f64>>, reference_q: Vec<Vec<f64>>, k: usize) -> Predictor {
    let n_cond = reference_q.first().map_or(0, Vec::len);
    Predictor {
        pca: None,
        reference_pi: Mat::from_rows(&reference_pi),
        reference_q: Mat::from_rows(&reference_q),
        k,
        condition_names: (0..n_cond).map(|c| format!("c{c}")).collect(),
        metadata: PredictorMetadata::default(),
    }
}

fn random_predictor(seed: u64, m: usize, p: usize, p_prime: usize, k: usize) -> (Predictor, Mat) {
    let mut rng = SeededRng::new(seed);
    let data = Mat::from_vec(m, p, (0..m * p).map(|_| rng.normal() * 2.0).collect());
    let model = fit_pca(&data, p_prime).unwrap();
    let pi = crate::pca::project_batch(&model, &data).unwrap();
    let q: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.uniform(), rng.uniform()]).collect();
    (
        Predictor {
            pca: Some(model),
            reference_pi: pi,
            reference_q: Mat::from_rows(&q),
            k,
            condition_names: vec!["a".into(), "b".into()],
            metadata: PredictorMetadata::default(),
        },
        data,
    )
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[test]
fn exact_match_returns_reference_q() {
    let predictor = bare_predictor(
        vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]],
        vec![vec![0.9], vec![0.2], vec![0.4]],
        1,
    );
    let out = predictor.predict(&[0.0, 0.0]).unwrap();
    assert_eq!(out, vec![0.9]);
}

#[test]
fn equidistant_neighbors_average() {
    let predictor = bare_predictor(
        vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
        vec![vec![0.2], vec![0.8]],
        2,
    );
    let out = predictor.predict(&[0.0, 0.0]).unwrap();
    assert!((out[0] - 0.5).abs() < 1e-15);
}

#[test]
fn inverse_distance_weighting() {
    // distances 1 and 3, q values 1.0 and 0.0 -> (1/1)/(1/1 + 1/3) = 0.75
    let predictor = bare_predictor(
        vec![vec![1.0, 0.0], vec![-3.0, 0.0]],
        vec![vec![1.0], vec![0.0]],
        2,
    );
    let out = predictor.predict(&[0.0, 0.0]).unwrap();
    assert!((out[0] - 0.75).abs() < 1e-15, "{}", out[0]);
}

#[test]
fn multiple_exact_matches_average_unweighted() {
    let predictor = bare_predictor(
        vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![9.0, 9.0]],
        vec![vec![0.2], vec![0.6], vec![1.0]],
        2,
    );
    let out = predictor.predict(&[0.0, 0.0]).unwrap();
    assert!((out[0] - 0.4).abs() < 1e-15);
}

#[test]
fn ties_break_by_lower_row_index() {
    let predictor = bare_predictor(
        vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]],
        vec![vec![1.0], vec![0.0], vec![0.0]],
        1,
    );
    // all three rows are at distance 1; row 0 wins
    let out = predictor.predict(&[0.0, 0.0]).unwrap();
    assert_eq!(out, vec![1.0]);
}

#[test]
fn radial_move_from_single_neighbor_changes_nothing() {
    let predictor = bare_predictor(
        vec![vec![0.0, 0.0], vec![100.0, 100.0]],
        vec![vec![0.7], vec![0.1]],
        1,
    );
    let a = predictor.predict(&[1.0, 0.0]).unwrap();
    let b = predictor.predict(&[3.0, 0.0]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn length_mismatch_and_empty_reference_rejected() {
    let predictor = bare_predictor(vec![vec![0.0, 0.0]], vec![vec![0.5]], 1);
    assert!(matches!(
        predictor.predict(&[1.0]),
        Err(Error::DimensionMismatch { .. })
    ));
    let empty = bare_predictor(vec![], vec![], 1);
    assert!(matches!(empty.predict(&[1.0]), Err(Error::EmptyReferenceSet)));
}

// ---------------------------------------------------------------------------
// predict_batch
// ---------------------------------------------------------------------------

#[test]
fn batch_matches_loop_of_predict() {
    let (predictor, _) = random_predictor(3, 40, 12, 5, 3);
    let mut rng = SeededRng::new(99);
    let batch = Mat::from_vec(100, 12, (0..1200).map(|_| rng.normal() * 2.0).collect());
    let out = predictor.predict_batch(&batch).unwrap();
    for (i, row) in batch.rows_iter().enumerate() {
        let single = predictor.predict(row).unwrap();
        for (a, b) in out.row(i).iter().zip(&single) {
            assert_eq!(a, b, "row {i} differs");
        }
    }
}

#[test]
fn permuted_batch_gives_permuted_output() {
    let (predictor, _) = random_predictor(5, 20, 8, 4, 3);
    let mut rng = SeededRng::new(7);
    let rows: Vec<Vec<f64>> = (0..10).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
    let forward = predictor.predict_batch(&Mat::from_rows(&rows)).unwrap();
    let reversed: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
    let backward = predictor.predict_batch(&Mat::from_rows(&reversed)).unwrap();
    for i in 0..10 {
        assert_eq!(forward.row(i), backward.row(9 - i));
    }
}

// ---------------------------------------------------------------------------
// prediction_gradient
// ---------------------------------------------------------------------------

#[test]
fn constant_neighbor_values_give_zero_gradient() {
    let predictor = bare_predictor(
        vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![-3.0, 0.0]],
        vec![vec![0.6], vec![0.6], vec![0.6]],
        3,
    );
    let grad = predictor.prediction_gradient(&[0.1, 0.2], 0).unwrap();
    for g in grad {
        assert!(g.abs() < 1e-12, "gradient {g}");
    }
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in [11u64, 12, 13] {
        let (predictor, _) = random_predictor(seed, 30, 10, 4, 3);
        let mut rng = SeededRng::new(seed + 1000);
        let gamma: Vec<f64> = (0..10).map(|_| rng.normal() * 2.0).collect();
        for condition in 0..2 {
            let analytic = predictor.prediction_gradient(&gamma, condition).unwrap();
            let step = 1e-6;
            let mut fd = vec![0.0; gamma.len()];
            let mut work = gamma.clone();
            for i in 0..gamma.len() {
                work[i] = gamma[i] + step;
                let plus = predictor.predict(&work).unwrap()[condition];
                work[i] = gamma[i] - step;
                let minus = predictor.predict(&work).unwrap()[condition];
                work[i] = gamma[i];
                fd[i] = (plus - minus) / (2.0 * step);
            }
            let diff: f64 = analytic
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(
                diff / norm.max(1e-12) < 1e-4,
                "seed {seed} condition {condition}: relative error {}",
                diff / norm.max(1e-12)
            );
        }
    }
}

#[test]
fn perturbation_in_projection_nullspace_is_invisible() {
    let (predictor, _) = random_predictor(21, 25, 6, 2, 3);
    let model = predictor.pca.as_ref().unwrap();
    let mut rng = SeededRng::new(4242);
    let gamma: Vec<f64> = (0..6).map(|_| rng.normal() * 2.0).collect();
    let grad = predictor.prediction_gradient(&gamma, 0).unwrap();

    // Build a vector orthogonal to both retained components via Gram-Schmidt.
    let mut v = vec![0.3, -0.7, 0.25, 0.1, -0.4, 0.55];
    for comp in &model.components {
        let proj = crate::linalg::dot(&v, comp);
        for (x, c) in v.iter_mut().zip(comp) {
            *x -= proj * c;
        }
    }
    // The analytic gradient lives in the span of the components.
    let along = crate::linalg::dot(&grad, &v);
    assert!(along.abs() < 1e-10, "gradient leaks into the nullspace: {along}");

    let shifted: Vec<f64> = gamma.iter().zip(&v).map(|(g, d)| g + d).collect();
    let a = predictor.predict(&gamma).unwrap();
    let b = predictor.predict(&shifted).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12, "prediction moved: {x} vs {y}");
    }
}

#[test]
fn tied_neighbor_set_rejected() {
    let predictor = bare_predictor(
        vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]],
        vec![vec![0.1], vec![0.9], vec![0.4]],
        2,
    );
    // neighbors 2 and 3 are both at distance 1 from the origin
    match predictor.prediction_gradient(&[0.0, 0.0], 0) {
        Err(Error::UnstableNeighborSet { .. }) => {}
        other => panic!("expected tie error, got {other:?}"),
    }
}

#[test]
fn zero_distance_gradient_rejected() {
    let predictor = bare_predictor(
        vec![vec![0.0, 0.0], vec![5.0, 5.0]],
        vec![vec![0.1], vec![0.9]],
        1,
    );
    match predictor.prediction_gradient(&[0.0, 0.0], 0) {
        Err(Error::ZeroDistanceNeighbor { index: 0 }) => {}
        other => panic!("expected zero-distance error, got {other:?}"),
    }
}

#[test]
fn continuity_under_small_perturbation() {
    let (predictor, _) = random_predictor(31, 40, 8, 3, 3);
    let mut rng = SeededRng::new(777);
    for _ in 0..20 {
        let gamma: Vec<f64> = (0..8).map(|_| rng.normal() * 2.0).collect();
        let base = predictor.predict(&gamma).unwrap();
        // Skip query points with an ambiguous neighbor set.
        if predictor.prediction_gradient(&gamma, 0).is_err() {
            continue;
        }
        let eps = 1e-7;
        let shifted: Vec<f64> = gamma.iter().map(|g| g + eps).collect();
        let moved = predictor.predict(&shifted).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            assert!(
                (a - b).abs() < 1e-3,
                "prediction jumped by {} under {eps} perturbation",
                (a - b).abs()
            );
        }
    }
}

#[test]
fn json_roundtrip_and_validation() {
    let (predictor, _) = random_predictor(41, 15, 6, 3, 3);
    let json = predictor.to_json().unwrap();
    let back = Predictor::from_json(&json).unwrap();
    assert_eq!(back.k, predictor.k);
    assert_eq!(back.reference_pi.as_slice(), predictor.reference_pi.as_slice());
    assert_eq!(back.condition_names, predictor.condition_names);

    let mut broken: serde_json::Value = serde_json::from_str(&json).unwrap();
    broken["k"] = serde_json::json!(0);
    assert!(Predictor::from_json(&broken.to_string()).is_err());
}

#[test]
fn shape_mismatched_bundle_rejected_at_parse() {
    // Declared matrix shape must be backed by the data, or indexing inside
    // predict would go out of bounds.
    let json = r#"{
        "pca": null,
        "reference_pi": {"rows": 50, "cols": 50, "data": [0.0, 1.0]},
        "reference_q": {"rows": 50, "cols": 1, "data": [0.5]},
        "k": 1,
        "condition_names": ["c"],
        "metadata": {"seed": 0, "config_digest": ""}
    }"#;
    assert!(Predictor::from_json(json).is_err());
}

#[test]
fn deserialized_predictor_scores_bitwise_identically() {
    let (predictor, _) = random_predictor(43, 25, 8, 4, 3);
    let back = Predictor::from_json(&predictor.to_json().unwrap()).unwrap();
    let mut rng = SeededRng::new(888);
    for _ in 0..25 {
        let gamma: Vec<f64> = (0..8).map(|_| rng.normal() * 2.0).collect();
        let a = predictor.predict(&gamma).unwrap();
        let b = back.predict(&gamma).unwrap();
        assert_eq!(a, b, "serialization changed a prediction");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prediction_is_convex_combination_of_neighbor_values(
        seed in 0u64..500,
        k in 1usize..6,
    ) {
        let mut rng = SeededRng::new(seed);
        let m = 12;
        let reference: Vec<Vec<f64>> = (0..m)
            .map(|_| vec![rng.normal() * 3.0, rng.normal() * 3.0])
            .collect();
        let q: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.uniform()]).collect();
        let predictor = bare_predictor(reference.clone(), q.clone(), k);
        let gamma = vec![rng.normal() * 3.0, rng.normal() * 3.0];
        let out = predictor.predict(&gamma).unwrap()[0];

        let mut dists: Vec<(f64, usize)> = reference
            .iter()
            .enumerate()
            .map(|(j, r)| (crate::linalg::sq_dist(&gamma, r).sqrt(), j))
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let neighbor_q: Vec<f64> = dists[..k].iter().map(|&(_, j)| q[j][0]).collect();
        let lo = neighbor_q.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = neighbor_q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out >= lo - 1e-12 && out <= hi + 1e-12, "{out} outside [{lo}, {hi}]");
    }
}
