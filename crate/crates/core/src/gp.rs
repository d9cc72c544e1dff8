//! Gaussian-process regression on a template surface and model refinement.
//!
//! A GP over the template is a mean deformation per vertex plus a
//! matrix-valued kernel. The kernel is piecewise constant: a query point is
//! snapped to the nearest vertex of its closest template surface point and
//! the 3×3 block between the two snapped vertices is returned.
//!
//! Kernels are held as an exact factor `K = E Eᵀ` (`E` is `3N × r`, `r` the
//! numerical rank of the covariance), so conditioning a posterior again is
//! the same operation as conditioning the prior. Two routes compute the
//! posterior: the dual route factors `K_XX + σ²I` by Cholesky, the primal
//! route works from the thin SVD of `E_X` (Woodbury form) and is cheaper
//! when `r < 3m`.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernel::{UniversalCovariance, NOSE_TIP};
use crate::linalg::{symmetric_eigen, thin_svd, SpdFactor};
use crate::nicp::{merge_face_into_head, MergeConfig, PruneConfig};
use crate::{fit_pdm, Error, Result, ShapeModel, TriMesh};

/// Relative default noise: `σ² = DEFAULT_NOISE_FRACTION · trace(K) / 3N`.
pub const DEFAULT_NOISE_FRACTION: f64 = 1e-4;

/// Observed deformations at points on (or near) the template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub anchor_points: Vec<Point3<f64>>,
    pub deformations: Vec<Vector3<f64>>,
    pub noise_sigma2: f64,
}

impl ObservationSet {
    pub fn new(anchor_points: Vec<Point3<f64>>, deformations: Vec<Vector3<f64>>, noise_sigma2: f64) -> Result<Self> {
        let obs = Self { anchor_points, deformations, noise_sigma2 };
        obs.validate()?;
        Ok(obs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchor_points.len() != self.deformations.len() {
            return Err(Error::DimensionMismatch {
                what: "observed deformations",
                expected: self.anchor_points.len(),
                actual: self.deformations.len(),
            });
        }
        if !(self.noise_sigma2 >= 0.0 && self.noise_sigma2.is_finite()) {
            return Err(Error::OutOfRange(format!("noise variance {} must be finite and >= 0", self.noise_sigma2)));
        }
        let finite = self.anchor_points.iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self.deformations.iter().all(|d| d.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::OutOfRange("non-finite observation".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.anchor_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor_points.is_empty()
    }
}

/// How the posterior linear algebra is carried out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    /// Dual when `σ² = 0` or `3m ≤ r`, primal otherwise.
    #[default]
    Auto,
    /// Cholesky of `K_XX + σ²I`; fails on a singular system.
    Dual,
    /// Thin SVD of the kernel factor at the anchors; singular directions at
    /// `σ² = 0` are treated by pseudo-inverse.
    Primal,
}

/// A Gaussian process over the vertices of a template mesh.
#[derive(Debug, Clone)]
pub struct GpModel {
    template: TriMesh,
    factor: Arc<DMatrix<f64>>,
    mean: DVector<f64>,
    snap_cap: Option<f64>,
}

impl GpModel {
    /// Zero-mean GP with kernel `E Eᵀ`.
    pub fn from_factor(template: TriMesh, factor: DMatrix<f64>) -> Result<Self> {
        let dim = 3 * template.n_vertices();
        if factor.nrows() != dim {
            return Err(Error::DimensionMismatch { what: "kernel factor rows", expected: dim, actual: factor.nrows() });
        }
        if factor.iter().any(|v| !v.is_finite()) {
            return Err(Error::OutOfRange("non-finite kernel factor".into()));
        }
        Ok(Self { template, factor: Arc::new(factor), mean: DVector::zeros(dim), snap_cap: None })
    }

    /// Zero-mean GP over the covariance's template; the kernel keeps every
    /// eigenpair above the rank floor.
    pub fn from_covariance(cov: &UniversalCovariance) -> Result<Self> {
        Self::from_covariance_truncated(cov, cov.numerical_rank()?)
    }

    /// Zero-mean GP whose kernel is the rank-`k` truncation of `cov`.
    pub fn from_covariance_truncated(cov: &UniversalCovariance, k: usize) -> Result<Self> {
        let rank = cov.numerical_rank()?;
        if k == 0 || k > rank {
            return Err(Error::OutOfRange(format!("truncation to {k} components, numerical rank is {rank}")));
        }
        let eig = cov.eigen()?;
        let mut factor = eig.vectors.columns(0, k).into_owned();
        for (m, mut col) in factor.column_iter_mut().enumerate() {
            col *= eig.values[m].sqrt();
        }
        Self::from_factor(cov.template().clone(), factor)
    }

    /// Zero-mean GP on a PCA model's mean with the model covariance.
    pub fn from_model(model: &ShapeModel) -> Result<Self> {
        Self::from_factor(model.mean_mesh(), model.scaled_basis())
    }

    /// Snapping cap for query points; `None` is 5% of the template bbox diagonal.
    pub fn with_snap_cap(mut self, cap: Option<f64>) -> Self {
        self.snap_cap = cap;
        self
    }

    pub fn template(&self) -> &TriMesh {
        &self.template
    }

    pub fn n_vertices(&self) -> usize {
        self.template.n_vertices()
    }

    /// Rank of the kernel factor.
    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// Mean deformation, flattened `[x0, y0, z0, x1, ...]`.
    pub fn mean_flat(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn mean_deformation(&self) -> Vec<Vector3<f64>> {
        self.mean.as_slice().chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
    }

    pub fn mean_at(&self, vertex: usize) -> Vector3<f64> {
        self.mean.fixed_rows::<3>(3 * vertex).into_owned()
    }

    /// The template warped by the mean deformation.
    pub fn mean_shape(&self) -> TriMesh {
        warp(&self.template, &self.mean)
    }

    /// Template vertex whose kernel row serves `x`.
    pub fn snap(&self, x: &Point3<f64>) -> Result<usize> {
        let sp = self.template.barycentric_embed(x, self.snap_cap)?;
        Ok(self.template.nearest_vertex(&sp))
    }

    /// `K^{ij}` between two template vertices.
    pub fn block(&self, i: usize, j: usize) -> Matrix3<f64> {
        let a = self.factor.rows(3 * i, 3);
        let b = self.factor.rows(3 * j, 3);
        (a * b.transpose()).fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Dense kernel over a vertex list, `3m × 3m`.
    pub fn kernel_matrix(&self, vertices: &[usize]) -> DMatrix<f64> {
        let s = self.factor.select_rows(coordinate_rows(vertices).iter());
        &s * s.transpose()
    }

    /// `trace K(i, i)`.
    pub fn variance_trace(&self, i: usize) -> f64 {
        self.factor.rows(3 * i, 3).norm_squared()
    }

    /// `trace(K) / 3N`, the mean prior variance per coordinate.
    pub fn mean_variance(&self) -> f64 {
        self.factor.norm_squared() / self.factor.nrows() as f64
    }

    /// The default observation noise, `1e-4` times the mean variance.
    pub fn default_noise_sigma2(&self) -> f64 {
        DEFAULT_NOISE_FRACTION * self.mean_variance()
    }
}

fn coordinate_rows(vertices: &[usize]) -> Vec<usize> {
    vertices.iter().flat_map(|&v| [3 * v, 3 * v + 1, 3 * v + 2]).collect()
}

fn warp(template: &TriMesh, deformation: &DVector<f64>) -> TriMesh {
    let flat = template.to_flat() + deformation;
    TriMesh::from_flat(template.topology().clone(), &flat).expect("deformation has template size")
}

/// `k(x, y)`: the block between the template vertices nearest to the
/// closest surface points of `x` and `y`.
pub fn kernel_eval(gp: &GpModel, x: &Point3<f64>, y: &Point3<f64>) -> Result<Matrix3<f64>> {
    Ok(gp.block(gp.snap(x)?, gp.snap(y)?))
}

/// Conditions `gp` on `obs` with the automatic solver choice.
pub fn gp_posterior(gp: &GpModel, obs: &ObservationSet) -> Result<GpModel> {
    gp_posterior_with(gp, obs, Solver::Auto)
}

/// Conditions `gp` on `obs`:
/// `μ_p(x) = μ(x) + K_X(x)ᵀ (K_XX + σ²I)⁻¹ (X − μ(X))` and
/// `k_p(x, y) = k(x, y) − K_X(x)ᵀ (K_XX + σ²I)⁻¹ K_X(y)`.
pub fn gp_posterior_with(gp: &GpModel, obs: &ObservationSet, solver: Solver) -> Result<GpModel> {
    let (mean, factor) = condition(gp, obs, solver, true)?;
    Ok(GpModel {
        template: gp.template.clone(),
        factor: Arc::new(factor.expect("requested")),
        mean,
        snap_cap: gp.snap_cap,
    })
}

/// Posterior mean only.
pub fn posterior_mean(gp: &GpModel, obs: &ObservationSet, solver: Solver) -> Result<DVector<f64>> {
    Ok(condition(gp, obs, solver, false)?.0)
}

fn condition(
    gp: &GpModel,
    obs: &ObservationSet,
    solver: Solver,
    with_kernel: bool,
) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
    obs.validate()?;
    if obs.is_empty() {
        return Ok((gp.mean.clone(), with_kernel.then(|| gp.factor.as_ref().clone())));
    }
    let anchors = obs.anchor_points.iter().map(|p| gp.snap(p)).collect::<Result<Vec<_>>>()?;
    let rows = coordinate_rows(&anchors);
    let mut resid = DVector::zeros(rows.len());
    for (k, d) in obs.deformations.iter().enumerate() {
        for c in 0..3 {
            resid[3 * k + c] = d[c] - gp.mean[rows[3 * k + c]];
        }
    }
    let sigma2 = obs.noise_sigma2;
    let s = gp.factor.select_rows(rows.iter());
    let route = match solver {
        Solver::Auto if sigma2 > 0.0 && gp.rank() < rows.len() => Solver::Primal,
        Solver::Auto => Solver::Dual,
        other => other,
    };
    let e = gp.factor.as_ref();
    match route {
        Solver::Dual => {
            let mut a = &s * s.transpose();
            for i in 0..a.nrows() {
                a[(i, i)] += sigma2;
            }
            let chol = SpdFactor::new(&a).ok_or_else(|| {
                Error::Singular(format!(
                    "K_XX + σ²I is not positive definite ({} observations, σ² = {sigma2:e}); duplicate anchors?",
                    obs.len()
                ))
            })?;
            let alpha = chol.solve_vec(&resid);
            let mean = &gp.mean + e * (s.transpose() * alpha);
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::Singular("non-finite posterior mean".into()));
            }
            if !with_kernel {
                return Ok((mean, None));
            }
            // E_p E_pᵀ = E (I − Sᵀ A⁻¹ S) Eᵀ. On the row space of S, spanned
            // by V, the middle factor is I − C with C = Σ Uᵀ A⁻¹ U Σ.
            let svd = thin_svd(&s)?;
            let us = &svd.u * DMatrix::from_diagonal(&svd.singular_values);
            let mut c = us.transpose() * chol.solve(&us);
            crate::linalg::symmetrize(&mut c);
            let eig = symmetric_eigen(&c)?;
            let shrink = eig.vectors.map_with_location(|_, j, v| v * (1.0 - (1.0 - eig.values[j]).max(0.0).sqrt()));
            let core = shrink * eig.vectors.transpose();
            let ev = e * &svd.v;
            Ok((mean, Some(e - ev * core * svd.v.transpose())))
        }
        Solver::Primal | Solver::Auto => {
            let svd = thin_svd(&s)?;
            let gain = svd.singular_values.map(|sv| {
                let den = sv * sv + sigma2;
                if den > 0.0 { sv / den } else { 0.0 }
            });
            let coeffs = (svd.u.transpose() * &resid).component_mul(&gain);
            let ev = e * &svd.v;
            let mean = &gp.mean + &ev * coeffs;
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::Singular("non-finite posterior mean".into()));
            }
            if !with_kernel {
                return Ok((mean, None));
            }
            let shrink = svd.singular_values.map(|sv| {
                let den = sv * sv + sigma2;
                if den > 0.0 { 1.0 - (sigma2 / den).sqrt() } else { 0.0 }
            });
            Ok((mean, Some(e - ev * DMatrix::from_diagonal(&shrink) * svd.v.transpose())))
        }
    }
}

/// Landmark positions of a mesh by label.
pub fn landmark_points(mesh: &TriMesh) -> BTreeMap<String, Point3<f64>> {
    mesh.landmarks().iter().map(|(k, &v)| (k.clone(), mesh.vertex(v))).collect()
}

/// Conditions on the landmark displacements `L_S − L_{S_t}`, anchored at the
/// template landmarks. Both maps must carry the same labels.
pub fn landmark_posterior(
    gp: &GpModel,
    template_landmarks: &BTreeMap<String, Point3<f64>>,
    scan_landmarks: &BTreeMap<String, Point3<f64>>,
    sigma2: f64,
) -> Result<GpModel> {
    let obs = landmark_observations(template_landmarks, scan_landmarks, sigma2)?;
    gp_posterior(gp, &obs)
}

pub fn landmark_observations(
    template_landmarks: &BTreeMap<String, Point3<f64>>,
    scan_landmarks: &BTreeMap<String, Point3<f64>>,
    sigma2: f64,
) -> Result<ObservationSet> {
    if template_landmarks.len() != scan_landmarks.len()
        || template_landmarks.keys().zip(scan_landmarks.keys()).any(|(a, b)| a != b)
    {
        let only_t: Vec<_> = template_landmarks.keys().filter(|k| !scan_landmarks.contains_key(*k)).collect();
        let only_s: Vec<_> = scan_landmarks.keys().filter(|k| !template_landmarks.contains_key(*k)).collect();
        return Err(Error::LandmarkMismatch(format!(
            "labels only on the template: {only_t:?}; only on the scan: {only_s:?}"
        )));
    }
    let anchors = template_landmarks.values().copied().collect();
    let deformations = template_landmarks.iter().map(|(k, p)| scan_landmarks[k] - p).collect();
    ObservationSet::new(anchors, deformations, sigma2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub iterations: usize,
    pub prune: PruneConfig,
    /// Stop once the mean vertex motion between iterations falls below this
    /// fraction of the template bbox diagonal.
    pub motion_tolerance: f64,
    /// Noise of the closest-point observations; `None` uses the GP default.
    pub noise_sigma2: Option<f64>,
    pub solver: Solver,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self { iterations: 10, prune: PruneConfig::default(), motion_tolerance: 1e-5, noise_sigma2: None, solver: Solver::Auto }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairStatus {
    Retained,
    PrunedDistance,
    PrunedBoundary,
}

/// Closest scan point of one template vertex in one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpPair {
    pub vertex: usize,
    pub target: Point3<f64>,
    /// Scan vertex nearest to the target point.
    pub target_vertex: usize,
    pub distance: f64,
    pub status: PairStatus,
}

/// One ICP iteration; the JSON form is the audit-log line.
#[derive(Debug, Clone, Serialize)]
pub struct IcpIteration {
    pub iteration: usize,
    pub retained: usize,
    pub pruned_distance: usize,
    pub pruned_boundary: usize,
    /// Mean distance from retained vertices of `S_reg` to their scan points.
    pub mean_residual: f64,
    /// Mean vertex motion of the regression result caused by this update.
    pub mean_motion: f64,
    #[serde(skip)]
    pub pairs: Vec<IcpPair>,
    /// Posterior mean deformation after this iteration.
    #[serde(skip)]
    pub mean: DVector<f64>,
    #[serde(skip)]
    pub observations: ObservationSet,
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    /// Template warped by the final posterior mean.
    pub reg: TriMesh,
    pub mean: DVector<f64>,
    pub iterations: Vec<IcpIteration>,
}

impl IcpResult {
    /// One JSON object per iteration.
    pub fn audit_jsonl(&self) -> String {
        self.iterations
            .iter()
            .map(|it| serde_json::to_string(it).expect("plain data serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Refines a landmark posterior against a scan by iterative closest points.
///
/// Iteration `i` warps the template by the current mean, pairs every vertex
/// `x` with its closest scan point `U(x)`, drops pairs whose target lies on
/// the scan boundary or farther than the prune distance, and recomputes the
/// posterior of `gp0` (never of the previous iterate) from the observed
/// displacements `U(x) − x`, that is the residual `U − S_reg` on top of the
/// current mean. The scan must be in the template's frame.
pub fn icp_refine(gp0: &GpModel, scan: &TriMesh, config: &IcpConfig) -> Result<IcpResult> {
    if config.iterations == 0 {
        return Err(Error::InvalidConfig("icp_refine needs at least one iteration".into()));
    }
    if scan.n_faces() == 0 {
        return Err(Error::EmptyMesh);
    }
    let sigma2 = config.noise_sigma2.unwrap_or_else(|| gp0.default_noise_sigma2());
    let tau = config.prune.resolve(scan);
    let stop = config.motion_tolerance * gp0.template.bbox_diagonal();
    let n = gp0.n_vertices();
    let template = gp0.template.vertices();
    let mut mean = gp0.mean.clone();
    let mut iterations = Vec::new();
    for iteration in 1..=config.iterations {
        let current = warp(&gp0.template, &mean);
        let pairs = (0..n)
            .into_par_iter()
            .map(|i| {
                let (sp, distance) = scan.closest_point(&current.vertex(i))?;
                let status = if config.prune.drop_target_boundary && scan.is_boundary_point(&sp) {
                    PairStatus::PrunedBoundary
                } else if distance > tau {
                    PairStatus::PrunedDistance
                } else {
                    PairStatus::Retained
                };
                let target_vertex = scan.nearest_vertex(&sp);
                Ok(IcpPair { vertex: i, target: scan.surface_point(&sp), target_vertex, distance, status })
            })
            .collect::<Result<Vec<_>>>()?;
        let retained: Vec<&IcpPair> = pairs.iter().filter(|p| p.status == PairStatus::Retained).collect();
        if retained.is_empty() {
            return Err(Error::AllPruned);
        }
        let observations = ObservationSet::new(
            retained.iter().map(|p| template[p.vertex]).collect(),
            retained.iter().map(|p| p.target - template[p.vertex]).collect(),
            sigma2,
        )?;
        let next = posterior_mean(gp0, &observations, config.solver)?;
        let mean_motion = (&next - &mean).as_slice().chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2]).norm()).sum::<f64>()
            / n as f64;
        let count = |s: PairStatus| pairs.iter().filter(|p| p.status == s).count();
        iterations.push(IcpIteration {
            iteration,
            retained: retained.len(),
            pruned_distance: count(PairStatus::PrunedDistance),
            pruned_boundary: count(PairStatus::PrunedBoundary),
            mean_residual: retained.iter().map(|p| p.distance).sum::<f64>() / retained.len() as f64,
            mean_motion,
            pairs,
            mean: next.clone(),
            observations,
        });
        mean = next;
        if mean_motion < stop {
            break;
        }
    }
    Ok(IcpResult { reg: warp(&gp0.template, &mean), mean, iterations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Observation noise; `None` uses the default of the truncated prior.
    pub noise_sigma2: Option<f64>,
    pub icp: IcpConfig,
    /// Final non-rigid alignment of the face region of each reconstruction
    /// to its scan; `None` skips it.
    pub face_align: Option<MergeConfig>,
    pub nose_tip: String,
    /// Sample-covariance re-regression passes after the first one.
    pub rounds: usize,
    pub max_skip_fraction: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            noise_sigma2: None,
            icp: IcpConfig::default(),
            face_align: Some(MergeConfig::default()),
            nose_tip: NOSE_TIP.into(),
            rounds: 1,
            max_skip_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefinedModel {
    pub model: ShapeModel,
    pub reconstructions: Vec<TriMesh>,
    /// Scan index and failure message of every skipped scan (last pass).
    pub skipped: Vec<(usize, String)>,
    /// ICP audit of the last pass: one JSON object per scan and iteration,
    /// tagged with the scan index.
    pub audit: Vec<String>,
}

/// One scan through landmark posterior, ICP refinement and face alignment.
pub fn reconstruct_scan(gp: &GpModel, scan: &TriMesh, sigma2: f64, config: &RefineConfig) -> Result<TriMesh> {
    Ok(reconstruct_scan_audited(gp, scan, sigma2, config)?.0)
}

/// [`reconstruct_scan`] plus the per-iteration ICP summaries.
pub fn reconstruct_scan_audited(
    gp: &GpModel,
    scan: &TriMesh,
    sigma2: f64,
    config: &RefineConfig,
) -> Result<(TriMesh, Vec<IcpIteration>)> {
    let gp0 = landmark_posterior(gp, &landmark_points(gp.template()), &landmark_points(scan), sigma2)?;
    let mut icp = config.icp.clone();
    icp.noise_sigma2 = Some(icp.noise_sigma2.unwrap_or(sigma2));
    let IcpResult { reg, iterations, .. } = icp_refine(&gp0, scan, &icp)?;
    let reg = match &config.face_align {
        Some(merge) => merge_face_into_head(&reg, scan, &config.nose_tip, merge)?,
        None => reg,
    };
    Ok((reg, iterations))
}

fn audit_lines(scan: usize, iterations: &[IcpIteration]) -> Vec<String> {
    iterations
        .iter()
        .map(|it| {
            let mut v = serde_json::to_value(it).expect("plain data serializes");
            v["scan"] = scan.into();
            v.to_string()
        })
        .collect()
}

fn reconstruct_all(
    gp: &GpModel,
    scans: &[TriMesh],
    sigma2: f64,
    config: &RefineConfig,
) -> Result<(Vec<TriMesh>, Vec<(usize, String)>, Vec<String>)> {
    let results: Vec<Result<(TriMesh, Vec<String>)>> = scans
        .par_iter()
        .enumerate()
        .map(|(k, s)| reconstruct_scan_audited(gp, s, sigma2, config).map(|(m, it)| (m, audit_lines(k, &it))))
        .collect();
    let mut ok = Vec::new();
    let mut skipped = Vec::new();
    let mut audit = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok((m, lines)) => {
                ok.push(m);
                audit.extend(lines);
            }
            Err(e) => skipped.push((k, e.to_string())),
        }
    }
    if skipped.len() as f64 > config.max_skip_fraction * scans.len() as f64 {
        return Err(Error::TooManyFailures {
            failed: skipped.len(),
            total: scans.len(),
            last: skipped.last().map(|s| s.1.clone()).unwrap_or_default(),
        });
    }
    Ok((ok, skipped, audit))
}

/// Rebuilds a PCA model from GP-regression reconstructions of raw scans.
///
/// The covariance is first truncated to `truncation_k` components and every
/// scan is reconstructed with it. The sample covariance of those
/// reconstructions then replaces the prior for `config.rounds` more passes,
/// and the last reconstructions are fitted with `n_components`.
pub fn refine_model(
    cov: &UniversalCovariance,
    truncation_k: usize,
    scans: &[TriMesh],
    config: &RefineConfig,
    n_components: usize,
) -> Result<RefinedModel> {
    if !(0.0..=1.0).contains(&config.max_skip_fraction) {
        return Err(Error::InvalidConfig(format!("max_skip_fraction {} outside [0, 1]", config.max_skip_fraction)));
    }
    let mut gp = GpModel::from_covariance_truncated(cov, truncation_k)?;
    let sigma2 = config.noise_sigma2.unwrap_or_else(|| gp.default_noise_sigma2());
    let (mut recon, mut skipped, mut audit) = reconstruct_all(&gp, scans, sigma2, config)?;
    for _ in 0..config.rounds {
        let sample = fit_pdm(&recon, recon.len().saturating_sub(1).max(1))?;
        gp = GpModel::from_model(&sample)?;
        (recon, skipped, audit) = reconstruct_all(&gp, scans, sigma2, config)?;
    }
    let model = fit_pdm(&recon, n_components)?;
    Ok(RefinedModel { model, reconstructions: recon, skipped, audit })
}
