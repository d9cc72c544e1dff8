//! Universal covariance: head and face model covariances blended on a
//! common template.
//!
//! Every template vertex is embedded (closest surface point, barycentric
//! coordinates) in the head mean and, inside the face region, in the
//! registered face mean. The 3×3 block of a vertex pair is a barycentric
//! blend of the nine model blocks between the two embedding triangles;
//! face-face pairs mix head and face blocks by nose-tip distance.

use std::path::Path;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector, Matrix3, Point3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{symmetric_eigen, symmetrize, SymmetricEigen};
use crate::model::{DEFAULT_DENSE_CAP, EIGEN_FLOOR};
use crate::store::{self, FORMAT_VERSION, MANIFEST};
use crate::{Error, Result, ShapeModel, SurfacePoint, Topology, TriMesh};

/// Largest template (in vertices) whose dense covariance is assembled.
pub const DENSE_VERTEX_CAP: usize = 2000;

/// Landmark label of the nose tip.
pub const NOSE_TIP: &str = "nose_tip";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    Face,
    HeadOnly,
}

/// Per-vertex region and nose-tip weighting of a template.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionLabels {
    pub regions: Vec<Region>,
    pub nose_tip_distance: Vec<f64>,
    /// `ρ_i ∈ [0, 1]`: 0 at the nose tip, 1 at the face boundary and beyond.
    pub rho: Vec<f64>,
}

impl RegionLabels {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn is_face(&self, i: usize) -> bool {
        self.regions[i] == Region::Face
    }

    /// `ρ_ij = (ρ_i + ρ_j) / 2`.
    pub fn pair_rho(&self, i: usize, j: usize) -> f64 {
        0.5 * (self.rho[i] + self.rho[j])
    }

    pub fn face_count(&self) -> usize {
        self.regions.iter().filter(|r| **r == Region::Face).count()
    }
}

/// Labels template vertices within `cap` of the registered face mean as
/// FACE. `ρ` is the nose-tip distance divided by the largest nose-tip
/// distance among FACE vertices, clamped to `[0, 1]`.
pub fn classify_vertices(template: &TriMesh, registered_face_mean: &TriMesh, cap: f64) -> Result<RegionLabels> {
    classify_vertices_with(template, registered_face_mean, cap, NOSE_TIP)
}

pub fn classify_vertices_with(
    template: &TriMesh,
    registered_face_mean: &TriMesh,
    cap: f64,
    nose_tip: &str,
) -> Result<RegionLabels> {
    if cap.is_nan() || cap < 0.0 {
        return Err(Error::InvalidConfig(format!("face cap must be non-negative, got {cap}")));
    }
    let nose = template.landmark_point(nose_tip)?;
    let regions = template
        .vertices()
        .par_iter()
        .map(|p| {
            if cap == f64::INFINITY {
                return Ok(Region::Face);
            }
            let (_, d) = registered_face_mean.closest_point(p)?;
            Ok(if d <= cap { Region::Face } else { Region::HeadOnly })
        })
        .collect::<Result<Vec<_>>>()?;
    let nose_tip_distance: Vec<f64> = template.vertices().iter().map(|p| (p - nose).norm()).collect();
    let max_face = regions
        .iter()
        .zip(&nose_tip_distance)
        .filter(|(r, _)| **r == Region::Face)
        .map(|(_, d)| *d)
        .fold(0.0, f64::max);
    let rho = nose_tip_distance
        .iter()
        .map(|&d| if max_face > 0.0 { (d / max_face).clamp(0.0, 1.0) } else { 1.0 })
        .collect();
    Ok(RegionLabels { regions, nose_tip_distance, rho })
}

/// Anything that yields 3×3 covariance blocks between mesh vertices.
pub trait BlockSource {
    fn n_vertices(&self) -> usize;
    fn block(&self, a: usize, b: usize) -> Matrix3<f64>;
}

/// A dense `3N×3N` covariance in interleaved vertex order.
impl BlockSource for DMatrix<f64> {
    fn n_vertices(&self) -> usize {
        self.nrows() / 3
    }

    fn block(&self, a: usize, b: usize) -> Matrix3<f64> {
        self.fixed_view::<3, 3>(3 * a, 3 * b).into_owned()
    }
}

impl BlockSource for ShapeModel {
    fn n_vertices(&self) -> usize {
        ShapeModel::n_vertices(self)
    }

    fn block(&self, a: usize, b: usize) -> Matrix3<f64> {
        self.covariance_block(a, b)
    }
}

/// `w_{v,k} = (c_v^i + c_k^j) / 2` for the nine corner pairs.
pub fn blend_weights(ci: &[f64; 3], cj: &[f64; 3]) -> [[f64; 3]; 3] {
    let mut w = [[0.0; 3]; 3];
    for v in 0..3 {
        for k in 0..3 {
            w[v][k] = 0.5 * (ci[v] + cj[k]);
        }
    }
    w
}

fn check_embedding(faces: &[[usize; 3]], n_vertices: usize, e: &SurfacePoint) -> Result<[usize; 3]> {
    let tri = *faces
        .get(e.face)
        .ok_or_else(|| Error::OutOfRange(format!("embedding face {} of {}", e.face, faces.len())))?;
    if tri.iter().any(|&v| v >= n_vertices) {
        return Err(Error::DimensionMismatch { what: "covariance vertices", expected: n_vertices, actual: tri[0].max(tri[1]).max(tri[2]) + 1 });
    }
    if e.bary.iter().any(|c| !c.is_finite()) {
        return Err(Error::OutOfRange("non-finite barycentric coordinate".into()));
    }
    Ok(tri)
}

/// `Σ w_{v,k} K^{v,k} / Σ w_{v,k}` over the corner pairs of the two
/// embedding triangles (`faces` is the triangle list the embeddings refer to).
pub fn blended_block<S: BlockSource + ?Sized>(
    cov: &S,
    faces: &[[usize; 3]],
    emb_i: &SurfacePoint,
    emb_j: &SurfacePoint,
) -> Result<Matrix3<f64>> {
    let ti = check_embedding(faces, cov.n_vertices(), emb_i)?;
    let tj = check_embedding(faces, cov.n_vertices(), emb_j)?;
    Ok(blend_unchecked(cov, ti, tj, emb_i, emb_j))
}

fn blend_unchecked<S: BlockSource + ?Sized>(
    cov: &S,
    ti: [usize; 3],
    tj: [usize; 3],
    emb_i: &SurfacePoint,
    emb_j: &SurfacePoint,
) -> Matrix3<f64> {
    let w = blend_weights(&emb_i.bary, &emb_j.bary);
    let mut sum = Matrix3::zeros();
    let mut total = 0.0;
    for v in 0..3 {
        for k in 0..3 {
            if w[v][k] != 0.0 {
                sum += cov.block(ti[v], tj[k]) * w[v][k];
            }
            total += w[v][k];
        }
    }
    sum / total
}

/// Eigenvalue clipping summary of [`psd_repair`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdRepairReport {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    /// `Σ |λ⁻| / Σ |λ|` over the clipped (negative) eigenvalues.
    pub clipped_mass: f64,
}

/// Nearest positive semidefinite matrix in Frobenius norm: negative
/// eigenvalues are set to zero. A matrix without negative eigenvalues is
/// returned unchanged.
pub fn psd_repair(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, PsdRepairReport)> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch { what: "square matrix columns", expected: m.nrows(), actual: m.ncols() });
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-8 * scale {
        return Err(Error::OutOfRange(format!("matrix is not symmetric (deviation {asym:.2e})")));
    }
    let eig = symmetric_eigen(m)?;
    let (min, max) = eig
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let negative: f64 = eig.values.iter().filter(|&&v| v < 0.0).map(|v| -v).sum();
    let total: f64 = eig.values.iter().map(|v| v.abs()).sum();
    let report = PsdRepairReport {
        min_eigenvalue: if m.nrows() == 0 { 0.0 } else { min },
        max_eigenvalue: if m.nrows() == 0 { 0.0 } else { max },
        clipped_mass: if total > 0.0 { negative / total } else { 0.0 },
    };
    if negative == 0.0 {
        return Ok((m.clone(), report));
    }
    Ok((eig.reconstruct_with(|l| l.max(0.0)), report))
}

/// Blend settings recorded with the covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlendConfig {
    /// Embedding cap in mesh units; `None` uses 5% of each mean mesh's bbox diagonal.
    pub embed_cap: Option<f64>,
    /// Clip negative eigenvalues after assembly.
    pub repair: bool,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self { embed_cap: None, repair: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub head_model_id: String,
    pub face_model_id: String,
    pub blend_config: BlendConfig,
}

/// Dense covariance `K_U` over the vertices of a template.
#[derive(Debug, Clone)]
pub struct UniversalCovariance {
    matrix: DMatrix<f64>,
    template: TriMesh,
    pub provenance: Option<Provenance>,
    pub repair: Option<PsdRepairReport>,
    eigen: OnceLock<Arc<SymmetricEigen>>,
}

impl UniversalCovariance {
    /// Wraps a symmetric `3N×3N` matrix over `template`'s vertices.
    pub fn new(matrix: DMatrix<f64>, template: TriMesh) -> Result<Self> {
        let n = template.n_vertices();
        if n > DENSE_VERTEX_CAP {
            return Err(Error::DenseCap { rows: 3 * n, cap: 3 * DENSE_VERTEX_CAP });
        }
        if matrix.nrows() != 3 * n || matrix.ncols() != 3 * n {
            return Err(Error::DimensionMismatch { what: "covariance size", expected: 3 * n, actual: matrix.nrows() });
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > 1e-8 * scale {
            return Err(Error::OutOfRange(format!("covariance is not symmetric (deviation {asym:.2e})")));
        }
        Ok(Self { matrix, template, provenance: None, repair: None, eigen: OnceLock::new() })
    }

    /// Covariance of a PCA model on its own mean.
    pub fn from_model(model: &ShapeModel) -> Result<Self> {
        if model.n_vertices() > DENSE_VERTEX_CAP {
            return Err(Error::DenseCap { rows: model.dim(), cap: 3 * DENSE_VERTEX_CAP });
        }
        let mut c = Self::new(model.covariance()?, model.mean_mesh())?;
        c.provenance = Some(Provenance {
            head_model_id: model.fingerprint(),
            face_model_id: String::new(),
            blend_config: BlendConfig::default(),
        });
        Ok(c)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn template(&self) -> &TriMesh {
        &self.template
    }

    pub fn template_id(&self) -> String {
        self.template.fingerprint()
    }

    pub fn n_vertices(&self) -> usize {
        self.template.n_vertices()
    }

    pub fn block(&self, i: usize, j: usize) -> Matrix3<f64> {
        self.matrix.block(i, j)
    }

    /// Eigenpairs, computed once.
    pub fn eigen(&self) -> Result<&SymmetricEigen> {
        if self.eigen.get().is_none() {
            let e = Arc::new(symmetric_eigen(&self.matrix)?);
            let _ = self.eigen.set(e);
        }
        Ok(self.eigen.get().expect("initialized above"))
    }

    /// Eigenvalues above `EIGEN_FLOOR · λ_max`.
    pub fn numerical_rank(&self) -> Result<usize> {
        Ok(self.eigen()?.numerical_rank(EIGEN_FLOOR))
    }

    /// Rank-`k` reconstruction `Σ_{m≤k} μ_m φ_m φ_mᵀ`; `k` equal to the full
    /// dimension returns the matrix unchanged.
    pub fn truncated(&self, k: usize) -> Result<UniversalCovariance> {
        let dim = self.matrix.nrows();
        if k == 0 || k > dim {
            return Err(Error::OutOfRange(format!("truncation to {k} of {dim} components")));
        }
        if k == dim {
            return Ok(self.clone());
        }
        let rank = self.numerical_rank()?;
        if k > rank {
            return Err(Error::OutOfRange(format!("truncation to {k} components exceeds the numerical rank {rank}")));
        }
        let eig = self.eigen()?;
        let v = eig.vectors.columns(0, k);
        let mut scaled = v.into_owned();
        for (m, mut col) in scaled.column_iter_mut().enumerate() {
            col *= eig.values[m];
        }
        let mut matrix = scaled * v.transpose();
        symmetrize(&mut matrix);
        let mut out = Self::new(matrix, self.template.clone())?;
        out.provenance = self.provenance.clone();
        Ok(out)
    }

    /// The leading `k` eigenpairs as a PCA model with the template as mean.
    pub fn to_shape_model(&self, k: usize) -> Result<ShapeModel> {
        let rank = self.numerical_rank()?;
        if k == 0 || k > rank {
            return Err(Error::OutOfRange(format!("{k} components requested, numerical rank is {rank}")));
        }
        let eig = self.eigen()?;
        ShapeModel::new(
            self.template.to_flat(),
            eig.vectors.columns(0, k).into_owned(),
            eig.values.rows(0, k).into_owned(),
            self.template.topology().clone(),
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = CovManifest {
            format_version: FORMAT_VERSION,
            kind: "covariance".into(),
            n_vertices: self.n_vertices(),
            template_id: self.template_id(),
            provenance: self.provenance.clone(),
            repair: self.repair,
            topology: COV_FILES[0].into(),
            blobs: COV_FILES[1..].iter().map(|s| s.to_string()).collect(),
        };
        store::write_json(&dir.join(MANIFEST), &manifest)?;
        store::write_json(&dir.join(COV_FILES[0]), self.template.topology().as_ref())?;
        store::write_f64_blob(&dir.join(COV_FILES[1]), self.template.to_flat().as_slice())?;
        // Symmetric, so column-major equals row-major.
        store::write_f64_blob(&dir.join(COV_FILES[2]), self.matrix.as_slice())
    }

    pub fn load(dir: &Path) -> Result<UniversalCovariance> {
        let mpath = dir.join(MANIFEST);
        let m: CovManifest = store::read_json(&mpath)?;
        store::check_version(&mpath, m.format_version)?;
        if m.kind != "covariance" {
            return Err(Error::format(&mpath, format!("expected a covariance artifact, found `{}`", m.kind)));
        }
        let topology: Topology = store::read_json::<Topology>(&dir.join(&m.topology))?.validated()?;
        if topology.n_vertices != m.n_vertices {
            return Err(Error::format(&mpath, "topology vertex count disagrees with manifest"));
        }
        let dim = 3 * m.n_vertices;
        let flat = store::read_f64_blob(&dir.join(COV_FILES[1]), dim)?;
        let template = TriMesh::from_flat(Arc::new(topology), &DVector::from_vec(flat))?;
        if template.fingerprint() != m.template_id {
            return Err(Error::Integrity(format!("template of {}", dir.display())));
        }
        let data = store::read_f64_blob(&dir.join(COV_FILES[2]), dim * dim)?;
        let mut cov = Self::new(DMatrix::from_vec(dim, dim, data), template)?;
        cov.provenance = m.provenance;
        cov.repair = m.repair;
        Ok(cov)
    }

    pub fn artifact_files() -> Vec<String> {
        let mut v = vec![MANIFEST.to_string()];
        v.extend(COV_FILES.iter().map(|s| s.to_string()));
        v
    }
}

impl PartialEq for UniversalCovariance {
    fn eq(&self, other: &Self) -> bool {
        self.matrix == other.matrix
            && self.template.vertices() == other.template.vertices()
            && self.template.same_topology(&other.template)
            && self.provenance == other.provenance
            && self.repair == other.repair
    }
}

const COV_FILES: [&str; 3] = ["topology.json", "template.f64", "matrix.f64"];

#[derive(Debug, Serialize, Deserialize)]
struct CovManifest {
    format_version: u32,
    kind: String,
    n_vertices: usize,
    template_id: String,
    provenance: Option<Provenance>,
    repair: Option<PsdRepairReport>,
    topology: String,
    blobs: Vec<String>,
}

fn embed_all(points: &[Point3<f64>], mesh: &TriMesh, cap: Option<f64>) -> Result<Vec<SurfacePoint>> {
    points.par_iter().map(|p| mesh.barycentric_embed(p, cap)).collect()
}

/// Assembles `K_U` over `template`.
///
/// Pairs of HEAD_ONLY vertices and mixed pairs use the head block blended on
/// the head mean; FACE pairs use `ρ_ij K_h + (1 − ρ_ij) K_f` with the face
/// block blended on the registered face mean. Only the upper block triangle
/// is computed and mirrored, so `block(j, i) = block(i, j)ᵀ` exactly.
pub fn build_universal_covariance(
    head_model: &ShapeModel,
    head_mean_mesh: &TriMesh,
    face_model: &ShapeModel,
    face_mean_registered: &TriMesh,
    template: &TriMesh,
    labels: &RegionLabels,
    config: &BlendConfig,
) -> Result<UniversalCovariance> {
    let n = template.n_vertices();
    if n > DENSE_VERTEX_CAP {
        return Err(Error::DenseCap { rows: 3 * n, cap: 3 * DENSE_VERTEX_CAP });
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch { what: "region labels", expected: n, actual: labels.len() });
    }
    head_model.check_topology(head_mean_mesh)?;
    face_model.check_topology(face_mean_registered)?;
    let k_h = head_model.covariance_capped(DEFAULT_DENSE_CAP)?;
    let k_f = face_model.covariance_capped(DEFAULT_DENSE_CAP)?;

    let emb_h = embed_all(template.vertices(), head_mean_mesh, config.embed_cap)?;
    let face_idx: Vec<usize> = (0..n).filter(|&i| labels.is_face(i)).collect();
    let face_pts: Vec<Point3<f64>> = face_idx.iter().map(|&i| template.vertex(i)).collect();
    let mut emb_f: Vec<Option<SurfacePoint>> = vec![None; n];
    for (i, e) in face_idx.iter().zip(embed_all(&face_pts, face_mean_registered, config.embed_cap)?) {
        emb_f[*i] = Some(e);
    }
    let faces_h = head_mean_mesh.faces();
    let faces_f = face_mean_registered.faces();
    let tri_h: Vec<[usize; 3]> = emb_h.iter().map(|e| faces_h[e.face]).collect();

    let rows: Vec<Vec<Matrix3<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| {
                    let head = blend_unchecked(&k_h, tri_h[i], tri_h[j], &emb_h[i], &emb_h[j]);
                    match (&emb_f[i], &emb_f[j]) {
                        (Some(fi), Some(fj)) => {
                            let face = blend_unchecked(&k_f, faces_f[fi.face], faces_f[fj.face], fi, fj);
                            let rho = labels.pair_rho(i, j);
                            head * rho + face * (1.0 - rho)
                        }
                        _ => head,
                    }
                })
                .collect()
        })
        .collect();
    let mut k = DMatrix::zeros(3 * n, 3 * n);
    for (i, row) in rows.into_iter().enumerate() {
        for (off, b) in row.into_iter().enumerate() {
            let j = i + off;
            k.fixed_view_mut::<3, 3>(3 * i, 3 * j).copy_from(&b);
            if j != i {
                k.fixed_view_mut::<3, 3>(3 * j, 3 * i).copy_from(&b.transpose());
            }
        }
    }
    symmetrize(&mut k);
    let (k, report) = if config.repair {
        let (r, rep) = psd_repair(&k)?;
        (r, Some(rep))
    } else {
        (k, None)
    };
    let mut cov = UniversalCovariance::new(k, template.clone())?;
    cov.provenance = Some(Provenance {
        head_model_id: head_model.fingerprint(),
        face_model_id: face_model.fingerprint(),
        blend_config: config.clone(),
    });
    cov.repair = report;
    Ok(cov)
}

/// Template plus `Σ_{m≤rank} √μ_m z_m φ_m` with standard normal `z` drawn
/// from a seeded ChaCha8 stream.
pub fn sample_gpmm(template: &TriMesh, cov: &UniversalCovariance, rank: usize, seed: u64) -> Result<TriMesh> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..rank).map(|_| StandardNormal.sample(&mut rng)).collect();
    sample_gpmm_with(template, cov, &z)
}

/// [`sample_gpmm`] with explicit coefficients `z` (rank = `z.len()`).
pub fn sample_gpmm_with(template: &TriMesh, cov: &UniversalCovariance, z: &[f64]) -> Result<TriMesh> {
    if template.n_vertices() != cov.n_vertices() {
        return Err(Error::DimensionMismatch {
            what: "template vertices",
            expected: cov.n_vertices(),
            actual: template.n_vertices(),
        });
    }
    let rank = cov.numerical_rank()?;
    if z.is_empty() || z.len() > rank {
        return Err(Error::OutOfRange(format!("sampling rank {} (numerical rank {rank})", z.len())));
    }
    let eig = cov.eigen()?;
    let mut flat = template.to_flat();
    for (m, &zm) in z.iter().enumerate() {
        flat += eig.vectors.column(m) * (eig.values[m].sqrt() * zm);
    }
    TriMesh::from_flat(template.topology().clone(), &flat)
}
