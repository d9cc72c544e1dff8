use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Point3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapefuse::kernel::*;
use shapefuse::linalg::symmetric_eigen;
use shapefuse::synth::{SyntheticWorld, WorldConfig};
use shapefuse::{Error, SurfacePoint, TriMesh};

fn small_world() -> SyntheticWorld {
    let config = WorldConfig { n_vertices: 240, n_face_vertices: 90, n_landmarks: 12, ..Default::default() };
    SyntheticWorld::generate(&config, 5).unwrap()
}

fn random_bary(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let (a, b): (f64, f64) = (rng.random(), rng.random());
    let (a, b) = if a + b > 1.0 { (1.0 - a, 1.0 - b) } else { (a, b) };
    [a, b, 1.0 - a - b]
}

fn uniform_rho(labels: &RegionLabels, rho: f64) -> RegionLabels {
    RegionLabels { rho: vec![rho; labels.len()], ..labels.clone() }
}

fn all_head(labels: &RegionLabels) -> RegionLabels {
    RegionLabels { regions: vec![Region::HeadOnly; labels.len()], ..labels.clone() }
}

fn no_repair() -> BlendConfig {
    BlendConfig { repair: false, ..Default::default() }
}

fn build(w: &SyntheticWorld, labels: &RegionLabels, config: &BlendConfig) -> UniversalCovariance {
    build_universal_covariance(
        &w.head_model,
        &w.head_model.mean_mesh(),
        &w.face_model,
        &w.face_model.mean_mesh(),
        &w.head_template,
        labels,
        config,
    )
    .unwrap()
}

#[test]
fn blend_weight_sum_is_three_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let w = blend_weights(&random_bary(&mut rng), &random_bary(&mut rng));
        let s: f64 = w.iter().flatten().sum();
        assert!((s - 3.0).abs() < 1e-12);
    }
}

#[test]
fn blended_block_matches_direct_resummation() {
    let w = small_world();
    let k = w.head_model.covariance().unwrap();
    let faces = w.head_template.faces();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let ei = SurfacePoint { face: rng.random_range(0..faces.len()), bary: random_bary(&mut rng) };
        let ej = SurfacePoint { face: rng.random_range(0..faces.len()), bary: random_bary(&mut rng) };
        let got = blended_block(&k, faces, &ei, &ej).unwrap();
        let (ti, tj) = (faces[ei.face], faces[ej.face]);
        let mut num = Matrix3::zeros();
        let mut den = 0.0;
        for v in 0..3 {
            for q in 0..3 {
                let wt = (ei.bary[v] + ej.bary[q]) / 2.0;
                for r in 0..3 {
                    for c in 0..3 {
                        num[(r, c)] += wt * k[(3 * ti[v] + r, 3 * tj[q] + c)];
                    }
                }
                den += wt;
            }
        }
        assert!((got - num / den).amax() < 1e-12 * k.amax());
        // Low-rank block source agrees with the dense one.
        let low = blended_block(&w.head_model, faces, &ei, &ej).unwrap();
        assert!((low - got).amax() < 1e-9 * k.amax());
    }
}

#[test]
fn one_hot_embeddings_keep_half_weight_on_triangle_neighbours() {
    // The additive weights do not collapse on one-hot coordinates: the pair
    // (a, b) gets weight 1, pairs sharing one of a, b get 1/2.
    let w = small_world();
    let k = w.head_model.covariance().unwrap();
    let faces = w.head_template.faces();
    let (fi, fj) = (3, 40);
    let ei = SurfacePoint { face: fi, bary: [1.0, 0.0, 0.0] };
    let ej = SurfacePoint { face: fj, bary: [0.0, 1.0, 0.0] };
    let (ti, tj) = (faces[fi], faces[fj]);
    let (a, b) = (ti[0], tj[1]);
    let mut want = k.fixed_view::<3, 3>(3 * a, 3 * b).into_owned();
    for q in [tj[0], tj[2]] {
        want += k.fixed_view::<3, 3>(3 * a, 3 * q) * 0.5;
    }
    for v in [ti[1], ti[2]] {
        want += k.fixed_view::<3, 3>(3 * v, 3 * b) * 0.5;
    }
    want /= 3.0;
    let got = blended_block(&k, faces, &ei, &ej).unwrap();
    assert!((got - want).amax() < 1e-12 * k.amax());
}

#[test]
fn region_labels_follow_the_cap() {
    let w = small_world();
    let head = &w.head_template;
    let face = &w.face_template;

    let all = classify_vertices(head, face, f64::INFINITY).unwrap();
    assert_eq!(all.face_count(), head.n_vertices());

    for cap in [0.0, 1e-6] {
        let labels = classify_vertices(head, face, cap).unwrap();
        let truth: Vec<bool> = (0..head.n_vertices()).map(|i| i < w.face_mask.len()).collect();
        let got: Vec<bool> = (0..head.n_vertices()).map(|i| labels.is_face(i)).collect();
        assert_eq!(got, truth);
    }

    let labels = classify_vertices(head, face, 1e-6).unwrap();
    let nose = head.landmark_index(NOSE_TIP).unwrap();
    assert_eq!(labels.rho[nose], 0.0);
    let max_face = (0..head.n_vertices())
        .filter(|&i| labels.is_face(i))
        .max_by(|&a, &b| labels.nose_tip_distance[a].total_cmp(&labels.nose_tip_distance[b]))
        .unwrap();
    assert_eq!(labels.rho[max_face], 1.0);
    assert!(labels.rho.iter().all(|r| (0.0..=1.0).contains(r)));

    let bare = TriMesh::new(head.vertices().to_vec(), head.faces().to_vec(), BTreeMap::new()).unwrap();
    assert!(matches!(classify_vertices(&bare, face, 1.0), Err(Error::MissingLandmark(_))));
    assert!(classify_vertices(head, face, -1.0).is_err());
}

#[test]
fn blend_endpoints_and_mixed_pairs() {
    let w = small_world();
    let labels = classify_vertices(&w.head_template, &w.face_template, 1e-6).unwrap();
    let pure_head = build(&w, &all_head(&labels), &no_repair());
    let rho1 = build(&w, &uniform_rho(&labels, 1.0), &no_repair());
    let rho0 = build(&w, &uniform_rho(&labels, 0.0), &no_repair());
    let blended = build(&w, &labels, &no_repair());

    // Pure face blocks, blended independently on the face mean.
    let k_f = w.face_model.covariance().unwrap();
    let face_mean = w.face_model.mean_mesh();
    let emb: Vec<SurfacePoint> = (0..w.face_mask.len())
        .map(|i| face_mean.barycentric_embed(&w.head_template.vertex(i), None).unwrap())
        .collect();

    let n = w.head_template.n_vertices();
    let scale = pure_head.matrix().amax();
    for i in 0..n {
        for j in 0..n {
            let (fi, fj) = (labels.is_face(i), labels.is_face(j));
            if fi && fj {
                assert!((rho1.block(i, j) - pure_head.block(i, j)).amax() <= 1e-7 * scale);
                let face = blended_block(&k_f, face_mean.faces(), &emb[i], &emb[j]).unwrap();
                assert!((rho0.block(i, j) - face).amax() <= 1e-7 * scale);
            } else {
                // Bit-identical to the pure head construction.
                assert_eq!(blended.block(i, j), pure_head.block(i, j));
            }
            assert_eq!(blended.block(i, j), blended.block(j, i).transpose());
        }
    }
}

#[test]
fn face_model_equal_to_restricted_head_model_reproduces_pure_head() {
    // In the synthetic world the face model is the exact restriction of the
    // head population, so any ρ blends two equal blocks.
    let w = small_world();
    let labels = classify_vertices(&w.head_template, &w.face_template, 1e-6).unwrap();
    let pure_head = build(&w, &all_head(&labels), &no_repair());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let random_rho = RegionLabels { rho: (0..labels.len()).map(|_| rng.random()).collect(), ..labels.clone() };
    let k = build(&w, &random_rho, &no_repair());
    let dev = (k.matrix() - pure_head.matrix()).amax();
    assert!(dev <= 1e-7 * pure_head.matrix().amax(), "{dev:e}");
}

#[test]
fn repaired_covariance_is_psd_and_carries_provenance() {
    let w = small_world();
    let labels = classify_vertices(&w.head_template, &w.face_template, 1e-6).unwrap();
    let k = build(&w, &labels, &BlendConfig::default());
    let eig = symmetric_eigen(k.matrix()).unwrap();
    let max = eig.values[0];
    let min = eig.values[eig.values.len() - 1];
    assert!(min >= -1e-10 * max, "min {min:e} max {max:e}");
    let prov = k.provenance.as_ref().unwrap();
    assert_eq!(prov.head_model_id, w.head_model.fingerprint());
    assert_eq!(prov.face_model_id, w.face_model.fingerprint());
    assert!(k.repair.is_some());
}

#[test]
fn psd_repair_beats_random_psd_probes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 8;
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let m = (&a + a.transpose()) * 0.5;
    let (p, report) = psd_repair(&m).unwrap();
    assert!(report.min_eigenvalue < 0.0 && report.clipped_mass > 0.0);
    let eig = symmetric_eigen(&p).unwrap();
    assert!(eig.values.iter().all(|&l| l >= -1e-12));
    let best = (&m - &p).norm();
    for probe in 0..100 {
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let candidate = if probe % 2 == 0 {
            &b * b.transpose()
        } else {
            // Small PSD perturbations of the answer itself.
            &p + &b * b.transpose() * 1e-3
        };
        assert!((&m - candidate).norm() >= best);
    }
}

#[test]
fn gpmm_sampling() {
    let w = small_world();
    let cov = UniversalCovariance::from_model(&w.head_model).unwrap();
    let template = cov.template().clone();
    let rank = cov.numerical_rank().unwrap();
    assert_eq!(rank, w.head_model.n_components());

    let same = sample_gpmm_with(&template, &cov, &vec![0.0; rank]).unwrap();
    assert_eq!(same.vertices(), template.vertices());
    assert!(sample_gpmm(&template, &cov, rank + 1, 1).is_err());

    // Rank 1: every deformation is a multiple of the leading eigenvector.
    let phi = cov.eigen().unwrap().vectors.column(0).into_owned();
    for seed in 0..5 {
        let s = sample_gpmm(&template, &cov, 1, seed).unwrap();
        let d = s.to_flat() - template.to_flat();
        let along = phi.dot(&d);
        assert!((&d - &phi * along).amax() < 1e-9 * d.amax().max(1.0));
    }

    // Monte Carlo covariance of 5000 draws against the rank-r truncation.
    let r = 6;
    let n_draws = 5000;
    let dim = template.n_vertices() * 3;
    let mut d = DMatrix::zeros(dim, n_draws);
    for s in 0..n_draws {
        let m = sample_gpmm(&template, &cov, r, 1000 + s as u64).unwrap();
        d.set_column(s, &(m.to_flat() - template.to_flat()));
    }
    let empirical = &d * d.transpose() / n_draws as f64;
    let truth = cov.truncated(r).unwrap();
    let rel = (&empirical - truth.matrix()).norm() / truth.matrix().norm();
    assert!(rel < 0.15, "relative Frobenius error {rel}");
}

#[test]
fn truncation_and_shape_model_views() {
    let w = small_world();
    let cov = UniversalCovariance::from_model(&w.head_model).unwrap();
    let full = cov.truncated(3 * cov.n_vertices()).unwrap();
    assert_eq!(full.matrix(), cov.matrix());
    let rank = cov.numerical_rank().unwrap();
    let same = cov.truncated(rank).unwrap();
    assert!((same.matrix() - cov.matrix()).amax() < 1e-9 * cov.matrix().amax());
    assert!(cov.truncated(rank + 1).is_err());

    let model = cov.to_shape_model(rank).unwrap();
    let ev = model.eigenvalues() - w.head_model.eigenvalues();
    assert!(ev.amax() < 1e-8 * w.head_model.eigenvalues()[0]);
}

#[test]
fn covariance_round_trips_and_caps() {
    let w = small_world();
    let labels = classify_vertices(&w.head_template, &w.face_template, 1e-6).unwrap();
    let k = build(&w, &labels, &BlendConfig::default());
    let dir = tempfile::tempdir().unwrap();
    k.save(dir.path()).unwrap();
    let back = UniversalCovariance::load(dir.path()).unwrap();
    assert!(back == k);

    let n = DENSE_VERTEX_CAP + 1;
    let pts: Vec<Point3<f64>> = (0..n).map(|i| Point3::new(i as f64, (i * i % 7) as f64, 0.5 * i as f64)).collect();
    let big = TriMesh::new(pts, vec![[0, 1, 2]], BTreeMap::new()).unwrap();
    let err = UniversalCovariance::new(DMatrix::zeros(3, 3), big).unwrap_err();
    assert!(matches!(err, Error::DenseCap { .. }));

    let asym = DMatrix::from_fn(3 * 3, 9, |i, j| (i * 10 + j) as f64);
    let tri = TriMesh::new(
        vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)],
        vec![[0, 1, 2]],
        BTreeMap::new(),
    )
    .unwrap();
    assert!(UniversalCovariance::new(asym, tri.clone()).is_err());
    assert!(UniversalCovariance::new(DMatrix::from_diagonal(&DVector::from_element(9, 1.0)), tri).is_ok());
}
