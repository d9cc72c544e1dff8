use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use shapefuse::eval::*;
use shapefuse::synth::{SyntheticWorld, WorldConfig};
use shapefuse::{fit_pdm, Error, ShapeModel, TriMesh};

fn small_world(seed: u64) -> SyntheticWorld {
    let config = WorldConfig { n_vertices: 240, n_face_vertices: 90, n_landmarks: 30, ..Default::default() };
    SyntheticWorld::generate(&config, seed).unwrap()
}

fn train_test(seed: u64, n_train: usize, n_test: usize) -> (ShapeModel, Vec<TriMesh>, Vec<TriMesh>) {
    let world = small_world(seed);
    let heads = world.sample_population(n_train + n_test, seed + 100).heads;
    let (train, test) = heads.split_at(n_train);
    let model = fit_pdm(train, n_train - 1).unwrap();
    (model, train.to_vec(), test.to_vec())
}

/// Eigenvalues of the sample covariance through the small Gram matrix of
/// the centred data, independent of the model-fitting route.
fn gram_eigenvalues(shapes: &[TriMesh]) -> Vec<f64> {
    let n = shapes.len();
    let flats: Vec<DVector<f64>> = shapes.iter().map(|s| s.to_flat()).collect();
    let mean = flats.iter().fold(DVector::zeros(flats[0].len()), |a, f| a + f) / n as f64;
    let x = DMatrix::from_columns(&flats.iter().map(|f| f - &mean).collect::<Vec<_>>());
    let gram = x.transpose() * &x / (n - 1) as f64;
    let mut ev: Vec<f64> = SymmetricEigen::new(gram).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

#[test]
fn compactness_matches_the_gram_spectrum() {
    let (model, train, _) = train_test(3, 12, 1);
    let ev = gram_eigenvalues(&train);
    let total: f64 = ev.iter().sum();
    let curve = compactness(&model, model.n_components()).unwrap();
    assert_eq!(curve.len(), 11);
    let mut acc = 0.0;
    for (m, &y) in curve.y.iter().enumerate() {
        acc += ev[m];
        assert!((y - acc / total).abs() < 1e-9, "m = {}: {y} vs {}", m + 1, acc / total);
    }
    assert_eq!(*curve.y.last().unwrap(), 1.0);
    assert!(curve.y.windows(2).all(|w| w[0] <= w[1]));
    assert!(curve.to_csv().trim_end().ends_with("11,1"));
    assert!(matches!(compactness(&model, 12), Err(Error::OutOfRange(_))));
}

#[test]
fn generalization_matches_per_truncation_reconstruction() {
    let (model, train, test) = train_test(4, 10, 5);
    let grid = [1, 3, 9];
    let curve = generalization(&model, &test, &grid).unwrap();
    for (g, &m) in grid.iter().enumerate() {
        let sub = model.truncate(m).unwrap();
        let oracle = test.iter().map(|s| s.mean_distance_to(&sub.reconstruct(s).unwrap()).unwrap()).sum::<f64>()
            / test.len() as f64;
        assert!((curve.y[g] - oracle).abs() < 1e-9, "m = {m}");
    }
    assert!(curve.y.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    // Training shapes lie in the span of the full model.
    let on_train = generalization(&model, &train, &[9]).unwrap();
    assert!(on_train.y[0] < 1e-9, "{}", on_train.y[0]);
}

#[test]
fn uniform_spectrum_compactness() {
    let (model, _, _) = train_test(3, 6, 1);
    let basis = model.basis().columns(0, 4).into_owned();
    let equal = ShapeModel::new(model.mean().clone(), basis, DVector::from_element(4, 2.5), model.topology().clone())
        .unwrap();
    assert_eq!(compactness(&equal, 4).unwrap().y, vec![0.25, 0.5, 0.75, 1.0]);
}

#[test]
fn single_component_offsets_reconstruct_exactly() {
    let (model, _, _) = train_test(9, 8, 1);
    let shape = model.mean() + model.basis().column(0) * 7.5;
    let mesh = TriMesh::from_flat(model.topology().clone(), &shape).unwrap();
    let curve = generalization(&model, &[mesh], &[1, 2, 7]).unwrap();
    assert!(curve.y.iter().all(|&e| e < 1e-9), "{:?}", curve.y);
}

#[test]
fn generalization_grid_guards() {
    let (model, _, test) = train_test(4, 6, 2);
    assert!(matches!(generalization(&model, &test, &[]), Err(Error::InvalidConfig(_))));
    assert!(matches!(generalization(&model, &test, &[2, 2]), Err(Error::InvalidConfig(_))));
    assert!(matches!(generalization(&model, &test, &[0, 1]), Err(Error::OutOfRange(_))));
    assert!(matches!(generalization(&model, &test, &[6]), Err(Error::OutOfRange(_))));
    assert!(generalization(&model, &[], &[1]).is_err());
}

#[test]
fn cohort_generalization_averages_per_cohort_projections() {
    let (a, _, test_a) = train_test(5, 8, 3);
    let world_b = small_world(5);
    let heads_b = world_b.sample_population(10, 999).heads;
    let b = fit_pdm(&heads_b[..8], 7).unwrap();
    let test_b = heads_b[8..].to_vec();
    let models: BTreeMap<String, ShapeModel> = [("a".to_string(), a.clone()), ("b".to_string(), b.clone())].into();
    let mut labelled: Vec<(String, TriMesh)> = test_a.iter().map(|s| ("a".to_string(), s.clone())).collect();
    labelled.extend(test_b.iter().map(|s| ("b".to_string(), s.clone())));
    let grid = [2, 5];
    let curve = generalization_by_cohort(&models, &labelled, &grid).unwrap();
    let ga = generalization(&a, &test_a, &grid).unwrap();
    let gb = generalization(&b, &test_b, &grid).unwrap();
    for g in 0..grid.len() {
        let oracle = (ga.y[g] * 3.0 + gb.y[g] * 2.0) / 5.0;
        assert!((curve.y[g] - oracle).abs() < 1e-12);
    }
    labelled.push(("c".to_string(), test_b[0].clone()));
    assert!(matches!(generalization_by_cohort(&models, &labelled, &grid), Err(Error::InvalidConfig(_))));
}

#[test]
fn pruned_search_agrees_with_brute_force() {
    let (model, train, _) = train_test(6, 15, 1);
    let grid = [1, 4, model.n_components()];
    let brute = specificity_with(&model, &train, &grid, 200, 9, NearestSearch::BruteForce).unwrap();
    let pruned = specificity_with(&model, &train, &grid, 200, 9, NearestSearch::Pruned).unwrap();
    for (b, p) in brute.y.iter().zip(&pruned.y) {
        assert!((b - p).abs() < 1e-12, "{b} vs {p}");
    }
}

#[test]
fn specificity_is_deterministic_and_seed_dependent() {
    let (model, train, _) = train_test(7, 10, 1);
    let a = specificity(&model, &train, &[2, 5], 64, 1).unwrap();
    let b = specificity(&model, &train, &[2, 5], 64, 1).unwrap();
    let c = specificity(&model, &train, &[2, 5], 64, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.y, c.y);
    assert_eq!(a.meta.counts["samples"], 64);
}

#[test]
fn specificity_scales_with_the_model_spread() {
    // With the mean as the only reference, every sample distance is linear in
    // the standard deviations, and the shared draws make the ratio exact.
    let (model, _, _) = train_test(8, 10, 1);
    let scaled = ShapeModel::new(
        model.mean().clone(),
        model.basis().clone(),
        model.eigenvalues() * 4.0,
        model.topology().clone(),
    )
    .unwrap();
    let reference = [model.mean_mesh()];
    let s1 = specificity(&model, &reference, &[3, 9], 100, 5).unwrap();
    let s2 = specificity(&scaled, &reference, &[3, 9], 100, 5).unwrap();
    for (a, b) in s1.y.iter().zip(&s2.y) {
        assert!((b - 2.0 * a).abs() < 1e-9 * b, "{a} {b}");
    }
}

#[test]
fn specificity_against_the_mean_is_within_gaussian_norm_bounds() {
    // For a zero-mean Gaussian vector d: sqrt(2/pi) sqrt(E|d|^2) <= E|d| <= sqrt(E|d|^2).
    let (model, _, _) = train_test(10, 10, 1);
    let tiny = ShapeModel::new(
        model.mean().clone(),
        model.basis().clone(),
        model.eigenvalues() * 1e-6,
        model.topology().clone(),
    )
    .unwrap();
    let m = tiny.n_components();
    let u = tiny.basis();
    let rms: Vec<f64> = (0..tiny.n_vertices())
        .map(|v| {
            (0..m)
                .map(|k| tiny.eigenvalues()[k] * (0..3).map(|c| u[(3 * v + c, k)].powi(2)).sum::<f64>())
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let upper = rms.iter().sum::<f64>() / rms.len() as f64;
    let lower = (2.0 / std::f64::consts::PI).sqrt() * upper;
    let s = specificity(&tiny, &[tiny.mean_mesh()], &[m], DEFAULT_SPECIFICITY_SAMPLES, 3).unwrap().y[0];
    assert!(s > lower * 0.98 && s < upper * 1.02, "{lower} <= {s} <= {upper}");
}

#[test]
fn specificity_shrinks_with_denser_self_references() {
    let (model, _, _) = train_test(12, 10, 1);
    let tiny = ShapeModel::new(
        model.mean().clone(),
        model.basis().clone(),
        model.eigenvalues() * 1e-4,
        model.topology().clone(),
    )
    .unwrap();
    let draw = |n: usize, seed: u64| -> Vec<TriMesh> {
        (0..n).map(|k| tiny.sample(&tiny.random_params(seed + k as u64, false)).unwrap()).collect()
    };
    let few = draw(5, 1000);
    let mut many = few.clone();
    many.extend(draw(195, 2000));
    let grid = [tiny.n_components()];
    let s_few = specificity(&tiny, &few, &grid, 300, 4).unwrap().y[0];
    let s_many = specificity(&tiny, &many, &grid, 300, 4).unwrap().y[0];
    // A superset of references can only bring each nearest neighbour closer.
    assert!(s_many <= s_few, "{s_many} vs {s_few}");
    assert!(s_many >= 0.0);
    let scale = tiny.eigenvalues().iter().map(|l| l.sqrt()).sum::<f64>();
    assert!(s_few < scale, "{s_few} vs {scale}");
}

#[test]
fn specificity_guards() {
    let (model, train, _) = train_test(8, 6, 1);
    assert!(matches!(specificity(&model, &train, &[1], 0, 0), Err(Error::InvalidConfig(_))));
    assert!(matches!(specificity(&model, &[], &[1], 5, 0), Err(Error::InvalidConfig(_))));
    let other = small_world(1).face_template.clone();
    assert!(specificity(&model, &[other], &[1], 5, 0).is_err());
}

/// Exact integral of the empirical CDF over `[0, t]`, divided by `t`.
fn exact_auc(e: &[f64], t: f64) -> f64 {
    e.iter().map(|&v| (t - v.min(t)) / t).sum::<f64>() / e.len() as f64
}

#[test]
fn ced_matches_counting_and_exact_area() {
    let errors = [0.01, 0.02, 0.035, 0.05, 0.08, 0.2, 0.03, 0.0];
    let norms = [1.0, 0.5, 1.0, 2.0, 1.0, 1.0, 0.25, 1.0];
    let t = 0.08;
    let r = ced_auc(&errors, &norms, t).unwrap();
    let e: Vec<f64> = errors.iter().zip(&norms).map(|(a, b)| a / b).collect();
    assert_eq!(r.curve.len(), 1000);
    assert_eq!(r.curve.x[0], 0.0);
    assert_eq!(*r.curve.x.last().unwrap(), t);
    for (x, y) in r.curve.x.iter().zip(&r.curve.y) {
        let count = e.iter().filter(|&&v| v <= *x).count() as f64 / e.len() as f64;
        assert_eq!(*y, count);
    }
    // Each item moves the trapezoidal area by at most one grid cell.
    assert!((r.auc - exact_auc(&e, t)).abs() <= 1.0 / 999.0);
    let failures = e.iter().filter(|&&v| v > t).count() as f64 / e.len() as f64;
    assert_eq!(r.failure_rate, failures);
    assert_eq!(r.failure_rate, 2.0 / 8.0);
}

#[test]
fn ced_trivial_and_uniform_cases() {
    let zero = ced_auc(&[0.0; 10], &[1.0; 10], 0.1).unwrap();
    assert_eq!(zero.auc, 1.0);
    assert_eq!(zero.failure_rate, 0.0);
    // Errors evenly spread over [0, t]: the CED is the identity ramp.
    let n = 2000;
    let errors: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) / n as f64 * 0.2).collect();
    let r = ced_auc(&errors, &vec![1.0; n], 0.2).unwrap();
    assert!((r.auc - 0.5).abs() < 2e-3, "{}", r.auc);
    assert_eq!(r.failure_rate, 0.0);
}

#[test]
fn inter_ocular_normalizer() {
    let world = small_world(2);
    let t = &world.head_template;
    let d = landmark_distance(t, "eye_left", "eye_right").unwrap();
    let oracle = (t.landmark_point("eye_left").unwrap() - t.landmark_point("eye_right").unwrap()).norm();
    assert_eq!(d, oracle);
    assert!(d > 0.0);
    assert!(matches!(landmark_distance(t, "eye_left", "nope"), Err(Error::MissingLandmark(_))));
}

proptest! {
    #[test]
    fn ced_is_a_monotone_distribution(
        items in prop::collection::vec((0.0f64..2.0, 0.1f64..3.0), 1..40),
        t in 0.05f64..1.5,
    ) {
        let (e, d): (Vec<f64>, Vec<f64>) = items.into_iter().unzip();
        let r = ced_auc_with_grid(&e, &d, t, 101).unwrap();
        prop_assert!(r.curve.y.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((0.0..=1.0).contains(&r.auc));
        prop_assert!((0.0..=1.0).contains(&r.failure_rate));
        prop_assert!((r.curve.y[100] + r.failure_rate - 1.0).abs() < 1e-12);
        let n: Vec<f64> = e.iter().zip(&d).map(|(a, b)| a / b).collect();
        prop_assert!((r.auc - exact_auc(&n, t)).abs() <= 1.0 / 100.0 + 1e-12);
    }
}
