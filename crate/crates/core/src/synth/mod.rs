//! Synthetic head/face population with known latent structure.
//!
//! The head template is a triangulated ellipsoid facing `+z`. Vertices with
//! unit-sphere height `z > 0.3` form the face region; they are numbered
//! first, and face-only triangles come first in the face list, so the face
//! topology is an exact prefix of the head topology.
//!
//! Shapes are `template + Φ a` with orthonormal modes `Φ` of three kinds:
//! coupled (support everywhere), face-only and cranium-only. The latent
//! vector `v = [coupled; face-only]` is Gaussian and the cranium-only
//! coefficients are a fixed linear function `G v` (plus optional noise), so
//! the head is an exact linear function of the face when the noise is zero.

mod hull;

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use hull::convex_hull;

use crate::linalg::{canonicalize_signs, symmetric_eigen, thin_svd};
use crate::model::EIGEN_FLOOR;
use crate::{Error, Result, ShapeModel, Topology, TriMesh};

/// Unit-sphere height above which a vertex belongs to the face.
pub const FACE_Z: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_vertices: usize,
    pub n_face_vertices: usize,
    /// Ellipsoid semi-axes (x: width, y: height, z: depth; the face looks along +z).
    pub radii: [f64; 3],
    pub n_coupled: usize,
    pub n_face_only: usize,
    pub n_cranium_only: usize,
    /// Per-vertex RMS displacement (mm) of the leading latent component.
    pub amplitude: f64,
    /// Geometric decay of latent standard deviations.
    pub decay: f64,
    /// Standard deviation of cranium-only noise, relative to `amplitude`.
    /// Zero makes the head an exact linear function of the face.
    pub cranium_noise: f64,
    /// Total landmark count (named landmarks plus farthest-point extras).
    pub n_landmarks: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_vertices: 800,
            n_face_vertices: 300,
            radii: [75.0, 95.0, 100.0],
            n_coupled: 6,
            n_face_only: 6,
            n_cranium_only: 4,
            amplitude: 3.0,
            decay: 0.85,
            cranium_noise: 0.0,
            n_landmarks: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeKind {
    Coupled,
    FaceOnly,
    CraniumOnly,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub seed: u64,
    pub head_template: TriMesh,
    pub face_template: TriMesh,
    /// Head vertex indices of the face region (`0..n_face_vertices`).
    pub face_mask: Vec<usize>,
    /// Orthonormal 3N×n_modes deformation modes: coupled, face-only, cranium-only.
    pub true_basis: DMatrix<f64>,
    pub mode_kinds: Vec<ModeKind>,
    /// Standard deviations of the latent vector `v = [coupled; face-only]`.
    pub latent_sd: DVector<f64>,
    /// Cranium-only coefficients are `G v` (+ noise).
    pub cranium_map: DMatrix<f64>,
    pub cranium_noise_sd: f64,
    /// Population eigenvalues of the head shapes.
    pub true_eigenvalues: DVector<f64>,
    /// Exact population PCA model of the heads.
    pub head_model: ShapeModel,
    /// Exact population PCA model of the faces.
    pub face_model: ShapeModel,
    /// Population least-squares map from face-model parameters to
    /// head-model parameters; exact when `cranium_noise == 0`.
    pub coupling_map: DMatrix<f64>,
}

/// Samples drawn from a world; column `k` of each matrix belongs to sample `k`.
#[derive(Debug, Clone)]
pub struct Population {
    pub heads: Vec<TriMesh>,
    pub faces: Vec<TriMesh>,
    pub latents: DMatrix<f64>,
    pub mode_coefficients: DMatrix<f64>,
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Golden-angle spiral points on the unit sphere with heights evenly
/// spaced in `(z_lo, z_hi)`, from the top down.
fn spiral_band(n: usize, z_hi: f64, z_lo: f64, phase: f64) -> Vec<Point3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let z = z_hi - (k as f64 + 0.5) / n as f64 * (z_hi - z_lo);
            let r = (1.0 - z * z).max(0.0).sqrt();
            let t = golden * k as f64 + phase;
            Point3::new(r * t.cos(), r * t.sin(), z)
        })
        .collect()
}

/// A smooth random scalar field on the unit sphere: a few low-frequency plane waves.
fn random_field(rng: &mut ChaCha8Rng) -> impl Fn(&Point3<f64>) -> f64 {
    let waves: Vec<(Vector3<f64>, f64, f64)> = (0..4)
        .map(|_| {
            let dir = Vector3::new(
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            )
            .normalize();
            let freq = rng.random_range(0.5..2.5);
            let amp: f64 = StandardNormal.sample(rng);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (dir * freq, amp, phase)
        })
        .collect();
    move |u: &Point3<f64>| waves.iter().map(|(w, a, p)| a * (w.dot(&u.coords) + p).cos()).sum()
}

/// Orthogonalizes `v` against the columns in `basis` (twice, for stability)
/// and normalizes. Returns `None` if `v` is (numerically) in their span.
fn orthonormalize(v: DVector<f64>, basis: &[DVector<f64>]) -> Option<DVector<f64>> {
    let n0 = v.norm();
    let mut v = v;
    for _ in 0..2 {
        for b in basis {
            let c = b.dot(&v);
            v.axpy(-c, b, 1.0);
        }
    }
    let n = v.norm();
    (n > 1e-6 * n0).then(|| v / n)
}

impl SyntheticWorld {
    pub fn generate(config: &WorldConfig, seed: u64) -> Result<Self> {
        let c = config;
        if c.n_face_vertices == 0 || c.n_face_vertices + 4 > c.n_vertices {
            return Err(Error::InvalidConfig("face region must be a non-empty proper subset".into()));
        }
        if c.n_vertices > crate::model::DEFAULT_DENSE_CAP / 3 {
            return Err(Error::DenseCap { rows: 3 * c.n_vertices, cap: crate::model::DEFAULT_DENSE_CAP });
        }
        if c.radii.iter().any(|&r| !(r > 0.0)) || !(c.amplitude > 0.0) || !(c.decay > 0.0 && c.decay <= 1.0) {
            return Err(Error::InvalidConfig("radii, amplitude and decay must be positive (decay ≤ 1)".into()));
        }
        let n_latent = c.n_coupled + c.n_face_only;
        if n_latent == 0 {
            return Err(Error::InvalidConfig("at least one coupled or face-only mode is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);

        // Geometry on the unit sphere, then stretched to the ellipsoid.
        let mut unit = spiral_band(c.n_face_vertices, 1.0, FACE_Z, phase);
        unit.extend(spiral_band(c.n_vertices - c.n_face_vertices, FACE_Z, -1.0, phase));
        let mut faces = convex_hull(&unit)?;
        for f in faces.iter_mut() {
            let k = (0..3).min_by_key(|&k| f[k]).unwrap();
            f.rotate_left(k);
        }
        let nf = c.n_face_vertices;
        faces.sort_by_key(|f| (f.iter().any(|&i| i >= nf), *f));
        let [rx, ry, rz] = c.radii;
        let vertices: Vec<Point3<f64>> = unit.iter().map(|u| Point3::new(rx * u.x, ry * u.y, rz * u.z)).collect();
        let normals: Vec<Vector3<f64>> = unit
            .iter()
            .map(|u| Vector3::new(u.x / rx, u.y / ry, u.z / rz).normalize())
            .collect();

        let landmarks = place_landmarks(&unit, nf, c.n_landmarks);
        let head_template = TriMesh::new(vertices, faces, landmarks)?;
        let face_mask: Vec<usize> = (0..nf).collect();
        let face_template = head_template.submesh(&face_mask)?;

        // Modes: face-only and cranium-only first (disjoint supports), then coupled.
        let n = c.n_vertices;
        let face_window = |u: &Point3<f64>, i: usize| if i < nf { smoothstep((u.z - FACE_Z) / 0.2) } else { 0.0 };
        let cranium_window = |u: &Point3<f64>, i: usize| if i >= nf { smoothstep((FACE_Z - u.z) / 0.2) } else { 0.0 };
        let make_mode = |window: &dyn Fn(&Point3<f64>, usize) -> f64, basis: &[DVector<f64>], rng: &mut ChaCha8Rng| {
            loop {
                let f = random_field(rng);
                let mut v = DVector::zeros(3 * n);
                for i in 0..n {
                    let s = window(&unit[i], i) * f(&unit[i]);
                    v.fixed_rows_mut::<3>(3 * i).copy_from(&(normals[i] * s));
                }
                if let Some(q) = orthonormalize(v, basis) {
                    return q;
                }
            }
        };
        let mut face_modes = Vec::new();
        for _ in 0..c.n_face_only {
            let q = make_mode(&face_window, &face_modes, &mut rng);
            face_modes.push(q);
        }
        let mut cranium_modes = Vec::new();
        for _ in 0..c.n_cranium_only {
            let q = make_mode(&cranium_window, &cranium_modes, &mut rng);
            cranium_modes.push(q);
        }
        let mut all: Vec<DVector<f64>> = face_modes.iter().chain(&cranium_modes).cloned().collect();
        let mut coupled = Vec::new();
        for _ in 0..c.n_coupled {
            let q = make_mode(&|_: &Point3<f64>, _| 1.0, &all, &mut rng);
            all.push(q.clone());
            coupled.push(q);
        }
        let ordered: Vec<DVector<f64>> = coupled.iter().chain(&face_modes).chain(&cranium_modes).cloned().collect();
        let true_basis = DMatrix::from_columns(&ordered);
        let mut mode_kinds = vec![ModeKind::Coupled; c.n_coupled];
        mode_kinds.extend(vec![ModeKind::FaceOnly; c.n_face_only]);
        mode_kinds.extend(vec![ModeKind::CraniumOnly; c.n_cranium_only]);

        // Latent spectrum interleaves coupled and face-only modes.
        let unit_sd = c.amplitude * (n as f64).sqrt();
        let mut order = Vec::with_capacity(n_latent);
        for k in 0..c.n_coupled.max(c.n_face_only) {
            if k < c.n_coupled {
                order.push(k);
            }
            if k < c.n_face_only {
                order.push(c.n_coupled + k);
            }
        }
        let mut latent_sd = DVector::zeros(n_latent);
        for (rank, &slot) in order.iter().enumerate() {
            latent_sd[slot] = unit_sd * c.decay.powi(rank as i32);
        }
        let cranium_map = DMatrix::from_fn(c.n_cranium_only, n_latent, |_, _| {
            {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.6 * z
        }
        });
        let cranium_noise_sd = c.cranium_noise * unit_sd;

        // Population covariance of mode coefficients: P diag(σ²) Pᵀ + noise.
        let n_modes = mode_kinds.len();
        let p = Self::latent_to_modes(&cranium_map, n_modes, n_latent);
        let mut sigma_a = &p * DMatrix::from_diagonal(&latent_sd.map(|s| s * s)) * p.transpose();
        for j in n_latent..n_modes {
            sigma_a[(j, j)] += cranium_noise_sd * cranium_noise_sd;
        }
        let eig = symmetric_eigen(&sigma_a)?;
        let rank = eig.numerical_rank(EIGEN_FLOOR);
        let v = eig.vectors.columns(0, rank).into_owned();
        let head_lambda = eig.values.rows(0, rank).into_owned();
        let mut u_h = &true_basis * &v;
        canonicalize_signs(&mut u_h);
        let head_model = ShapeModel::new(head_template.to_flat(), u_h.clone(), head_lambda.clone(), head_template.topology().clone())?;

        // Face model: SVD of R U_h Λ^{1/2}.
        let rows = 3 * nf;
        let mut f = u_h.rows(0, rows).into_owned();
        for (k, mut col) in f.column_iter_mut().enumerate() {
            col *= head_lambda[k].sqrt();
        }
        let svd = thin_svd(&f)?;
        let lam_f: Vec<f64> = svd.singular_values.iter().map(|s| s * s).collect();
        let top = lam_f[0];
        let rank_f = lam_f.iter().filter(|&&l| l >= EIGEN_FLOOR * top).count();
        let u_f = svd.u.columns(0, rank_f).into_owned();
        let face_lambda = DVector::from_vec(lam_f[..rank_f].to_vec());
        let face_model = ShapeModel::new(face_template.to_flat(), u_f.clone(), face_lambda.clone(), face_template.topology().clone())?;

        // p_f = A p_h with A = U_fᵀ R U_h; population regression Λ_h Aᵀ Λ_f⁻¹.
        let a = u_f.tr_mul(&u_h.rows(0, rows));
        let mut coupling_map = DMatrix::from_diagonal(&head_lambda) * a.transpose();
        for (k, mut col) in coupling_map.column_iter_mut().enumerate() {
            col /= face_lambda[k];
        }

        Ok(Self {
            config: c.clone(),
            seed,
            head_template,
            face_template,
            face_mask,
            true_basis,
            mode_kinds,
            latent_sd,
            cranium_map,
            cranium_noise_sd,
            true_eigenvalues: head_lambda,
            head_model,
            face_model,
            coupling_map,
        })
    }

    /// `P` with `a = P v`: identity on the latent block, `G` below it.
    fn latent_to_modes(g: &DMatrix<f64>, n_modes: usize, n_latent: usize) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(n_modes, n_latent);
        p.view_mut((0, 0), (n_latent, n_latent)).fill_with_identity();
        p.view_mut((n_latent, 0), (n_modes - n_latent, n_latent)).copy_from(g);
        p
    }

    pub fn n_latent(&self) -> usize {
        self.latent_sd.len()
    }

    pub fn n_modes(&self) -> usize {
        self.true_basis.ncols()
    }

    /// Centroid of the head template, the "head center" anchor.
    pub fn head_center(&self) -> Point3<f64> {
        self.head_template.centroid()
    }

    /// Draws latent vectors and the resulting mode coefficients
    /// (`n_latent × n` and `n_modes × n`).
    pub fn sample_coefficients(&self, n: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nl = self.n_latent();
        let nm = self.n_modes();
        let p = Self::latent_to_modes(&self.cranium_map, nm, nl);
        let mut latents = DMatrix::zeros(nl, n);
        let mut coeffs = DMatrix::zeros(nm, n);
        for s in 0..n {
            let v = DVector::from_fn(nl, |k, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.latent_sd[k] * z
            });
            let mut a = &p * &v;
            for j in nl..nm {
                let e: f64 = StandardNormal.sample(&mut rng);
                a[j] += self.cranium_noise_sd * e;
            }
            latents.set_column(s, &v);
            coeffs.set_column(s, &a);
        }
        (latents, coeffs)
    }

    /// Head mesh for a vector of mode coefficients.
    pub fn head_from_coefficients(&self, a: &DVector<f64>) -> TriMesh {
        let flat = self.head_template.to_flat() + &self.true_basis * a;
        TriMesh::from_flat(self.head_template.topology().clone(), &flat).expect("matching dimensions")
    }

    /// Exact face-region crop of a head in face topology.
    pub fn face_of(&self, head: &TriMesh) -> TriMesh {
        let v = head.vertices()[..self.face_mask.len()].to_vec();
        TriMesh::with_topology(self.face_template.topology().clone(), v).expect("prefix crop")
    }

    pub fn sample_population(&self, n: usize, seed: u64) -> Population {
        let (latents, mode_coefficients) = self.sample_coefficients(n, seed);
        let heads: Vec<TriMesh> = mode_coefficients
            .column_iter()
            .map(|a| self.head_from_coefficients(&a.into_owned()))
            .collect();
        let faces = heads.iter().map(|h| self.face_of(h)).collect();
        Population { heads, faces, latents, mode_coefficients }
    }

    /// Topology of the face model.
    pub fn face_topology(&self) -> &Arc<Topology> {
        self.face_template.topology()
    }
}

/// Named landmarks (nose tip, eyes, ears) plus farthest-point extras up to `total`.
fn place_landmarks(unit: &[Point3<f64>], nf: usize, total: usize) -> BTreeMap<String, usize> {
    let nearest = |dir: Vector3<f64>, range: std::ops::Range<usize>| {
        let d = dir.normalize();
        range
            .max_by(|&a, &b| unit[a].coords.dot(&d).total_cmp(&unit[b].coords.dot(&d)).then(b.cmp(&a)))
            .unwrap()
    };
    let n = unit.len();
    let mut lm = BTreeMap::new();
    lm.insert("nose_tip".to_string(), nearest(Vector3::z(), 0..nf));
    lm.insert("eye_left".to_string(), nearest(Vector3::new(0.33, 0.25, 0.91), 0..nf));
    lm.insert("eye_right".to_string(), nearest(Vector3::new(-0.33, 0.25, 0.91), 0..nf));
    lm.insert("ear_left".to_string(), nearest(Vector3::new(1.0, 0.0, -0.05), nf..n));
    lm.insert("ear_right".to_string(), nearest(Vector3::new(-1.0, 0.0, -0.05), nf..n));
    let mut chosen: Vec<usize> = lm.values().copied().collect();
    let mut dist: Vec<f64> = (0..n)
        .map(|i| chosen.iter().map(|&c| (unit[i] - unit[c]).norm()).fold(f64::INFINITY, f64::min))
        .collect();
    let mut k = 0;
    while chosen.len() < total.min(n) {
        let next = (0..n).max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a))).unwrap();
        lm.insert(format!("aux_{k:02}"), next);
        chosen.push(next);
        k += 1;
        for i in 0..n {
            dist[i] = dist[i].min((unit[i] - unit[next]).norm());
        }
    }
    lm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_world_shape() {
        let w = SyntheticWorld::generate(&WorldConfig::default(), 1).unwrap();
        assert_eq!(w.head_template.n_vertices(), 800);
        assert_eq!(w.face_template.n_vertices(), 300);
        assert_eq!(w.head_template.landmarks().len(), 30);
        // Closed surface.
        assert_eq!(w.head_template.n_faces(), 2 * 800 - 4);
        assert!(w.head_template.boundary_vertices().iter().all(|&b| !b));
        // Face faces are a prefix of the head faces.
        let nf = w.face_template.n_faces();
        assert_eq!(w.face_template.faces(), &w.head_template.faces()[..nf]);
        for &i in w.face_template.landmarks().values() {
            assert!(i < 300);
        }
        assert!(w.face_template.landmarks().contains_key("nose_tip"));
    }

    #[test]
    fn modes_are_orthonormal_with_the_right_supports() {
        let w = SyntheticWorld::generate(&WorldConfig::default(), 2).unwrap();
        let g = w.true_basis.tr_mul(&w.true_basis);
        assert!((g - DMatrix::identity(w.n_modes(), w.n_modes())).amax() < 1e-10);
        for (k, kind) in w.mode_kinds.iter().enumerate() {
            let col = w.true_basis.column(k);
            let face = col.rows(0, 900).norm();
            let cran = col.rows(900, 1500).norm();
            match kind {
                ModeKind::FaceOnly => assert_eq!(cran, 0.0),
                ModeKind::CraniumOnly => assert_eq!(face, 0.0),
                ModeKind::Coupled => assert!(face > 0.0 && cran > 0.0),
            }
        }
    }

    #[test]
    fn seeds_change_the_world_and_repeat_exactly() {
        let c = WorldConfig::default();
        let a = SyntheticWorld::generate(&c, 3).unwrap();
        let b = SyntheticWorld::generate(&c, 3).unwrap();
        let d = SyntheticWorld::generate(&c, 4).unwrap();
        assert_eq!(a.true_basis, b.true_basis);
        assert!((&a.true_basis - &d.true_basis).norm() > 0.0);
    }

    #[test]
    fn zero_coefficients_give_templates_and_crops_are_exact() {
        let w = SyntheticWorld::generate(&WorldConfig::default(), 5).unwrap();
        let h = w.head_from_coefficients(&DVector::zeros(w.n_modes()));
        assert_eq!(h.vertices(), w.head_template.vertices());
        let pop = w.sample_population(3, 9);
        for (h, f) in pop.heads.iter().zip(&pop.faces) {
            assert_eq!(&h.vertices()[..300], f.vertices());
        }
    }

    #[test]
    fn noiseless_coupling_is_exact() {
        let w = SyntheticWorld::generate(&WorldConfig::default(), 6).unwrap();
        let pop = w.sample_population(5, 1);
        for (h, f) in pop.heads.iter().zip(&pop.faces) {
            let ph = w.head_model.project(h).unwrap();
            let pf = w.face_model.project(f).unwrap();
            let pred = &w.coupling_map * &pf.values;
            assert!((pred - &ph.values).amax() < 1e-8 * ph.values.amax());
            // Heads lie in the head model span.
            let r = w.head_model.reconstruct(h).unwrap();
            assert!(r.rms_to(h).unwrap() < 1e-9);
        }
    }
}
