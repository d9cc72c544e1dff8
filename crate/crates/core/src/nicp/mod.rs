//! Optimal-step non-rigid ICP (Amberg, Romdhani & Vetter, CVPR 2007).
//!
//! Each template vertex carries a 4×3 affine transform `X_i`; the deformed
//! vertex is `[v_i; 1]ᵀ X_i`. For a fixed stiffness `α` and correspondences
//! `u_i` the step minimizes
//!
//! ```text
//! Σ w_i ‖p_i − u_i‖² + α² Σ_edges ‖G (X_i − X_j)‖² + β² Σ_landmarks ‖p_l − l‖²
//! ```
//!
//! with `G = diag(1, 1, 1, γ)`, a sparse linear least-squares problem solved
//! through its normal equations. Both meshes are centered on the template
//! centroid and scaled to unit RMS coordinate first (as menpo3d does), so
//! the stiffness schedule is scale-free.
//!
//! Correspondences farther than the prune distance `τ` (or landing on a
//! target boundary vertex) are dropped and charged the constant `w_i τ²`.
//! The per-level objective is then a truncated quadratic majorized by each
//! step's least-squares problem, so it never increases within a level when
//! the target has no boundary. On open targets a pair turning
//! boundary-pruned is not bounded by that problem; the step is then halved
//! until the objective does not rise, and the level ends if none qualifies.

mod ops;

use nalgebra::{DMatrix, Matrix4, Point3, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ops::{crop_to_face, merge_face_into_head, MergeConfig};

use crate::linalg::SparseSpdSystem;
use crate::mesh::{procrustes_align, SimilarityTransform, SurfacePoint};
use crate::{Error, Result, TriMesh};

/// Step halvings tried before a level is declared stalled.
const MAX_BACKTRACKS: usize = 12;

/// A template vertex pinned to a target position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkPair {
    pub vertex: usize,
    pub target: [f64; 3],
}

impl LandmarkPair {
    pub fn new(vertex: usize, target: Point3<f64>) -> Self {
        Self { vertex, target: [target.x, target.y, target.z] }
    }

    pub fn target_point(&self) -> Point3<f64> {
        Point3::new(self.target[0], self.target[1], self.target[2])
    }
}

/// Pairs every landmark label present on both meshes.
pub fn shared_landmark_pairs(template: &TriMesh, target: &TriMesh) -> Vec<LandmarkPair> {
    template
        .landmarks()
        .iter()
        .filter_map(|(label, &v)| target.landmark_point(label).ok().map(|p| LandmarkPair::new(v, p)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    /// Absolute distance cap; `None` means 5% of the target bbox diagonal.
    pub max_distance: Option<f64>,
    pub drop_target_boundary: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { max_distance: None, drop_target_boundary: true }
    }
}

impl PruneConfig {
    pub fn resolve(&self, target: &TriMesh) -> f64 {
        self.max_distance.unwrap_or(0.05 * target.bbox_diagonal())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NicpConfig {
    /// Outer-loop stiffness values `α`, strictly decreasing.
    pub stiffness_schedule: Vec<f64>,
    pub landmark_pairs: Vec<LandmarkPair>,
    /// Landmark weight `β` per stiffness level. The default keeps a floor of
    /// 2 at the soft levels: closest-point terms say nothing about sliding
    /// along the surface, and the landmarks are what holds it in place.
    pub landmark_weight_schedule: Vec<f64>,
    /// Data-term weight per template vertex, in `[0, 1]`.
    pub per_vertex_weights: Option<Vec<f64>>,
    pub max_inner_iterations: usize,
    /// Inner loop stops once the mean vertex move falls below this fraction
    /// of the template bounding-box diagonal.
    pub convergence_epsilon: f64,
    #[serde(rename = "correspondence_prune")]
    pub prune: PruneConfig,
    /// Weight of the translation column in the stiffness term.
    pub gamma: f64,
    /// Whether the initial landmark alignment may scale the template.
    pub align_with_scale: bool,
}

impl Default for NicpConfig {
    fn default() -> Self {
        Self {
            stiffness_schedule: geometric(50.0, 0.5, 8),
            landmark_pairs: Vec::new(),
            landmark_weight_schedule: vec![5.0, 4.0, 3.0, 2.0, 2.0, 2.0, 2.0, 2.0],
            per_vertex_weights: None,
            max_inner_iterations: 10,
            convergence_epsilon: 1e-5,
            prune: PruneConfig::default(),
            gamma: 1.0,
            align_with_scale: true,
        }
    }
}

/// `n` values from `a` to `b` in geometric progression.
pub fn geometric(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let r = (b / a).powf(1.0 / (n - 1) as f64);
    (0..n).map(|k| if k + 1 == n { b } else { a * r.powi(k as i32) }).collect()
}

impl NicpConfig {
    pub fn validate(&self, template: &TriMesh) -> Result<()> {
        let s = &self.stiffness_schedule;
        if s.is_empty() {
            return Err(Error::InvalidConfig("stiffness schedule is empty".into()));
        }
        if s.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidConfig("stiffness values must be positive".into()));
        }
        if s.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidConfig("stiffness schedule must be strictly decreasing".into()));
        }
        if self.landmark_weight_schedule.len() != s.len() {
            return Err(Error::InvalidConfig(format!(
                "landmark weight schedule has {} levels, stiffness schedule {}",
                self.landmark_weight_schedule.len(),
                s.len()
            )));
        }
        if self.landmark_weight_schedule.iter().any(|&b| !(b >= 0.0) || !b.is_finite()) {
            return Err(Error::InvalidConfig("landmark weights must be non-negative".into()));
        }
        if let Some(w) = &self.per_vertex_weights {
            if w.len() != template.n_vertices() {
                return Err(Error::DimensionMismatch {
                    what: "per-vertex weights",
                    expected: template.n_vertices(),
                    actual: w.len(),
                });
            }
            if w.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::InvalidConfig("per-vertex weights must lie in [0, 1]".into()));
            }
        }
        for p in &self.landmark_pairs {
            if p.vertex >= template.n_vertices() {
                return Err(Error::InvalidConfig(format!("landmark vertex {} out of range", p.vertex)));
            }
        }
        if self.max_inner_iterations == 0 {
            return Err(Error::InvalidConfig("max_inner_iterations must be at least 1".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidConfig("gamma must be positive".into()));
        }
        if let Some(d) = self.prune.max_distance {
            if !(d > 0.0) {
                return Err(Error::InvalidConfig("prune max_distance must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrespondenceStatus {
    Active,
    TooFar,
    Boundary,
}

/// Closest target point of one deformed template vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub surface: SurfacePoint,
    pub point: Point3<f64>,
    pub distance: f64,
    /// Data weight actually applied (zero when pruned).
    pub weight: f64,
    pub status: CorrespondenceStatus,
}

/// Objective values at the start of every inner iteration of one level,
/// plus the value after the last step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub stiffness: f64,
    pub landmark_weight: f64,
    pub energies: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct NicpResult {
    pub deformed: TriMesh,
    /// Distance of each deformed vertex to the target surface.
    pub residuals: Vec<f64>,
    /// Correspondences of the final deformed vertices.
    pub correspondences: Vec<Correspondence>,
    /// Landmark-based similarity applied before the first level.
    pub alignment: SimilarityTransform,
    pub levels: Vec<LevelTrace>,
}

impl NicpResult {
    /// Gradient of the data term with respect to each deformed vertex,
    /// `2 w_i (p_i − u_i)`; exactly zero where the weight is zero.
    pub fn data_gradient(&self) -> Vec<Vector3<f64>> {
        self.deformed
            .vertices()
            .iter()
            .zip(&self.correspondences)
            .map(|(p, c)| 2.0 * c.weight * (p - c.point))
            .collect()
    }

    pub fn rms_residual(&self) -> f64 {
        let n = self.residuals.len().max(1) as f64;
        (self.residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt()
    }
}

/// Extra quadratic pull of vertex `i` toward a fixed point with weight `a_i`.
#[derive(Debug, Clone)]
pub(crate) struct Anchors {
    pub weights: Vec<f64>,
    pub targets: Vec<Point3<f64>>,
}

/// Registers `template` onto `target`. The output keeps template topology.
pub fn nicp_register(template: &TriMesh, target: &TriMesh, config: &NicpConfig) -> Result<NicpResult> {
    register_with_anchors(template, target, config, None)
}

pub(crate) fn register_with_anchors(
    template: &TriMesh,
    target: &TriMesh,
    config: &NicpConfig,
    anchors: Option<&Anchors>,
) -> Result<NicpResult> {
    config.validate(template)?;
    if template.n_vertices() == 0 {
        return Err(Error::EmptyMesh);
    }
    if target.n_faces() == 0 {
        return Err(Error::EmptyMesh);
    }
    if let Some(a) = anchors {
        if a.weights.len() != template.n_vertices() || a.targets.len() != template.n_vertices() {
            return Err(Error::DimensionMismatch {
                what: "anchor count",
                expected: template.n_vertices(),
                actual: a.weights.len(),
            });
        }
    }

    let alignment = if config.landmark_pairs.len() >= 3 {
        let src: Vec<_> = config.landmark_pairs.iter().map(|p| template.vertex(p.vertex)).collect();
        let dst: Vec<_> = config.landmark_pairs.iter().map(|p| p.target_point()).collect();
        procrustes_align(&src, &dst, config.align_with_scale)?
    } else {
        SimilarityTransform::identity()
    };
    let aligned = template.transformed(&alignment);

    // Normalized frame: template centroid at the origin, unit RMS coordinate.
    let center = aligned.centroid();
    let spread = aligned.vertices().iter().map(|p| (p - center).norm_squared()).sum::<f64>();
    let scale = (spread / (3 * aligned.n_vertices()) as f64).sqrt().max(f64::MIN_POSITIVE);
    let to_unit = |p: &Point3<f64>| Point3::from((p - center) / scale);
    let from_unit = |p: &Point3<f64>| Point3::from(p.coords * scale + center.coords);
    let norm_target = target.with_vertices(target.vertices().iter().map(to_unit).collect())?;
    let src: Vec<Point3<f64>> = aligned.vertices().iter().map(to_unit).collect();
    let landmarks: Vec<(usize, Point3<f64>)> = config
        .landmark_pairs
        .iter()
        .map(|p| (p.vertex, to_unit(&p.target_point())))
        .collect();
    let anchors_unit = anchors.map(|a| Anchors {
        weights: a.weights.clone(),
        targets: a.targets.iter().map(to_unit).collect(),
    });
    let tau = config.prune.resolve(target) / scale;
    let problem = Problem {
        src: &src,
        edges: template.topology().edges(),
        target: &norm_target,
        weights: config.per_vertex_weights.as_deref(),
        landmarks: &landmarks,
        anchors: anchors_unit.as_ref(),
        tau,
        drop_boundary: config.prune.drop_target_boundary,
        gamma: config.gamma,
    };

    let n = src.len();
    let mut x = DMatrix::<f64>::zeros(4 * n, 3);
    for i in 0..n {
        x.view_mut((4 * i, 0), (3, 3)).fill_with_identity();
    }
    let eps = config.convergence_epsilon * aligned.bbox_diagonal() / scale;
    let mut levels = Vec::with_capacity(config.stiffness_schedule.len());
    let mut pos = problem.positions(&x);
    let mut corr = problem.correspond(&pos);
    for (&alpha, &beta) in config.stiffness_schedule.iter().zip(&config.landmark_weight_schedule) {
        let mut trace = LevelTrace { stiffness: alpha, landmark_weight: beta, energies: Vec::new(), converged: false };
        let mut energy = problem.energy(&x, &pos, &corr, alpha, beta);
        for it in 0..=config.max_inner_iterations {
            trace.energies.push(energy);
            if it == config.max_inner_iterations || trace.converged {
                break;
            }
            let step = problem.solve(&corr, alpha, beta)? - &x;
            // The step minimizes a surrogate built on the current pairs. A pair
            // turning boundary-pruned is not bounded by that surrogate, so the
            // step is shortened until the energy does not rise.
            let mut accepted = None;
            let mut t = 1.0;
            for _ in 0..MAX_BACKTRACKS {
                let x_try = &x + &step * t;
                let pos_try = problem.positions(&x_try);
                let corr_try = problem.correspond(&pos_try);
                let e_try = problem.energy(&x_try, &pos_try, &corr_try, alpha, beta);
                if e_try <= energy {
                    accepted = Some((x_try, pos_try, corr_try, e_try));
                    break;
                }
                t *= 0.5;
            }
            let Some((x_new, pos_new, corr_new, e_new)) = accepted else {
                trace.converged = true;
                continue;
            };
            let moved = pos.iter().zip(&pos_new).map(|(a, b)| (a - b).norm()).sum::<f64>() / n as f64;
            x = x_new;
            pos = pos_new;
            corr = corr_new;
            energy = e_new;
            trace.converged = moved < eps;
        }
        levels.push(trace);
    }

    let vertices: Vec<Point3<f64>> = pos.iter().map(from_unit).collect();
    let deformed = template.with_vertices(vertices)?;
    let correspondences: Vec<Correspondence> = corr
        .into_iter()
        .map(|c| Correspondence { point: from_unit(&c.point), distance: c.distance * scale, ..c })
        .collect();
    let residuals = correspondences.iter().map(|c| c.distance).collect();
    Ok(NicpResult { deformed, residuals, correspondences, alignment, levels })
}

struct Problem<'a> {
    src: &'a [Point3<f64>],
    edges: Vec<(usize, usize)>,
    target: &'a TriMesh,
    weights: Option<&'a [f64]>,
    landmarks: &'a [(usize, Point3<f64>)],
    anchors: Option<&'a Anchors>,
    tau: f64,
    drop_boundary: bool,
    gamma: f64,
}

impl Problem<'_> {
    fn d(&self, i: usize) -> Vector4<f64> {
        let p = self.src[i];
        Vector4::new(p.x, p.y, p.z, 1.0)
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[i])
    }

    fn positions(&self, x: &DMatrix<f64>) -> Vec<Point3<f64>> {
        (0..self.src.len())
            .map(|i| {
                let xi = x.fixed_view::<4, 3>(4 * i, 0);
                Point3::from(xi.tr_mul(&self.d(i)))
            })
            .collect()
    }

    fn correspond(&self, pos: &[Point3<f64>]) -> Vec<Correspondence> {
        pos.par_iter()
            .enumerate()
            .map(|(i, p)| {
                let (surface, distance) = self.target.closest_point(p).expect("target has faces");
                let status = if distance > self.tau {
                    CorrespondenceStatus::TooFar
                } else if self.drop_boundary && self.target.is_boundary_point(&surface) {
                    CorrespondenceStatus::Boundary
                } else {
                    CorrespondenceStatus::Active
                };
                let weight = if status == CorrespondenceStatus::Active { self.weight(i) } else { 0.0 };
                Correspondence { surface, point: self.target.surface_point(&surface), distance, weight, status }
            })
            .collect()
    }

    fn energy(&self, x: &DMatrix<f64>, pos: &[Point3<f64>], corr: &[Correspondence], alpha: f64, beta: f64) -> f64 {
        let mut data = 0.0;
        for (i, c) in corr.iter().enumerate() {
            data += match c.status {
                CorrespondenceStatus::Active => c.weight * (pos[i] - c.point).norm_squared(),
                _ => self.weight(i) * self.tau * self.tau,
            };
        }
        let g2 = [1.0, 1.0, 1.0, self.gamma * self.gamma];
        let mut stiff = 0.0;
        for &(i, j) in &self.edges {
            for r in 0..4 {
                for c in 0..3 {
                    let d = x[(4 * i + r, c)] - x[(4 * j + r, c)];
                    stiff += g2[r] * d * d;
                }
            }
        }
        let lm: f64 = self.landmarks.iter().map(|(v, t)| (pos[*v] - t).norm_squared()).sum();
        let anchor: f64 = self.anchors.map_or(0.0, |a| {
            a.weights.iter().zip(&a.targets).zip(pos).map(|((w, t), p)| w * (p - t).norm_squared()).sum()
        });
        data + alpha * alpha * stiff + beta * beta * lm + anchor
    }

    fn solve(&self, corr: &[Correspondence], alpha: f64, beta: f64) -> Result<DMatrix<f64>> {
        let n = self.src.len();
        let mut diag: Vec<Matrix4<f64>> = vec![Matrix4::zeros(); n];
        let mut rhs = DMatrix::<f64>::zeros(4 * n, 3);
        let mut constraints = 0usize;
        let add_point = |diag: &mut Vec<Matrix4<f64>>, rhs: &mut DMatrix<f64>, i: usize, w: f64, t: &Point3<f64>, d: Vector4<f64>| {
            diag[i] += w * d * d.transpose();
            let mut block = rhs.view_mut((4 * i, 0), (4, 3));
            block += w * d * t.coords.transpose();
        };
        for (i, c) in corr.iter().enumerate() {
            if c.weight > 0.0 {
                add_point(&mut diag, &mut rhs, i, c.weight, &c.point, self.d(i));
                constraints += 1;
            }
        }
        let b2 = beta * beta;
        if b2 > 0.0 {
            for (v, t) in self.landmarks {
                add_point(&mut diag, &mut rhs, *v, b2, t, self.d(*v));
                constraints += 1;
            }
        }
        if let Some(a) = self.anchors {
            for i in 0..n {
                if a.weights[i] > 0.0 {
                    add_point(&mut diag, &mut rhs, i, a.weights[i], &a.targets[i], self.d(i));
                    constraints += 1;
                }
            }
        }
        // A global affine map is unconstrained by the stiffness term.
        if constraints < 4 {
            return Err(Error::Singular(format!(
                "only {constraints} active correspondences and landmarks; correspondences over-pruned"
            )));
        }
        let a2 = alpha * alpha;
        let g2 = [a2, a2, a2, a2 * self.gamma * self.gamma];
        for &(i, j) in &self.edges {
            for r in 0..4 {
                diag[i][(r, r)] += g2[r];
                diag[j][(r, r)] += g2[r];
            }
        }
        let mut sys = SparseSpdSystem::new(4 * n);
        for (i, block) in diag.iter().enumerate() {
            for r in 0..4 {
                for c in 0..=r {
                    sys.add(4 * i + r, 4 * i + c, block[(r, c)]);
                }
            }
        }
        for &(i, j) in &self.edges {
            let (hi, lo) = if i > j { (i, j) } else { (j, i) };
            for r in 0..4 {
                sys.add(4 * hi + r, 4 * lo + r, -g2[r]);
            }
        }
        sys.solve(&rhs)
    }
}
