//! PCA point-distribution models.
//!
//! A [`ShapeModel`] is `S(p) = m + U p` with orthonormal `U` (3N×n) and
//! per-component variances `λ` (the eigenvalues of the sample covariance).

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::thin_svd;
use crate::store::{self, FORMAT_VERSION, MANIFEST};
use crate::{Error, Result, Topology, TriMesh};

/// Largest dense covariance materialized by default (rows of a 3N×3N matrix).
pub const DEFAULT_DENSE_CAP: usize = 6000;

/// Components with `λ < EIGEN_FLOOR · λ_max` are numerically zero.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Normalization of the sample covariance. The source formula prints the
/// factor as `1/(1−n)`, which is negative; it is read as the unbiased
/// estimator. Kept as a single switch so the reading is easy to audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceEstimator {
    /// `1/(n−1)`
    Unbiased,
    /// `1/n`
    MaximumLikelihood,
}

pub const COVARIANCE_ESTIMATOR: CovarianceEstimator = CovarianceEstimator::Unbiased;

impl CovarianceEstimator {
    pub fn factor(self, n_samples: usize) -> f64 {
        match self {
            CovarianceEstimator::Unbiased => 1.0 / (n_samples as f64 - 1.0),
            CovarianceEstimator::MaximumLikelihood => 1.0 / n_samples as f64,
        }
    }
}

/// Latent shape coordinates of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeParams {
    pub values: DVector<f64>,
}

impl ShapeParams {
    pub fn new(values: DVector<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(DVector::zeros(n))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ShapeModel {
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    topology: Arc<Topology>,
}

impl ShapeModel {
    /// Validates and assembles a model.
    pub fn new(
        mean: DVector<f64>,
        basis: DMatrix<f64>,
        eigenvalues: DVector<f64>,
        topology: Arc<Topology>,
    ) -> Result<Self> {
        let dim = 3 * topology.n_vertices;
        if mean.len() != dim {
            return Err(Error::DimensionMismatch { what: "mean length", expected: dim, actual: mean.len() });
        }
        if basis.nrows() != dim {
            return Err(Error::DimensionMismatch { what: "basis rows", expected: dim, actual: basis.nrows() });
        }
        if basis.ncols() != eigenvalues.len() {
            return Err(Error::DimensionMismatch {
                what: "eigenvalue count",
                expected: basis.ncols(),
                actual: eigenvalues.len(),
            });
        }
        if eigenvalues.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::OutOfRange("eigenvalues must be finite and strictly positive".into()));
        }
        if eigenvalues.as_slice().windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::OutOfRange("eigenvalues must be sorted non-increasing".into()));
        }
        let gram = basis.tr_mul(&basis);
        let dev = (gram - DMatrix::identity(basis.ncols(), basis.ncols())).amax();
        if dev > 1e-8 {
            return Err(Error::OutOfRange(format!("basis is not orthonormal (deviation {dev:.2e})")));
        }
        Ok(Self { mean, basis, eigenvalues, topology })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn n_components(&self) -> usize {
        self.basis.ncols()
    }

    pub fn n_vertices(&self) -> usize {
        self.topology.n_vertices
    }

    /// Length of the flattened shape vector, `3N`.
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean_mesh(&self) -> TriMesh {
        TriMesh::from_flat(self.topology.clone(), &self.mean).expect("validated dimensions")
    }

    fn check_params(&self, params: &ShapeParams) -> Result<()> {
        if params.len() != self.n_components() {
            return Err(Error::DimensionMismatch {
                what: "shape parameter count",
                expected: self.n_components(),
                actual: params.len(),
            });
        }
        Ok(())
    }

    /// `m + U p` as a flat vector.
    pub fn sample_flat(&self, params: &ShapeParams) -> Result<DVector<f64>> {
        self.check_params(params)?;
        Ok(&self.mean + &self.basis * &params.values)
    }

    /// `m + U p` as a mesh in the model topology.
    pub fn sample(&self, params: &ShapeParams) -> Result<TriMesh> {
        TriMesh::from_flat(self.topology.clone(), &self.sample_flat(params)?)
    }

    pub fn check_topology(&self, shape: &TriMesh) -> Result<()> {
        if shape.n_vertices() != self.n_vertices() || shape.faces() != self.topology.faces.as_slice() {
            return Err(Error::TopologyMismatch(format!(
                "shape has {} vertices / {} faces, model expects {} / {}",
                shape.n_vertices(),
                shape.n_faces(),
                self.n_vertices(),
                self.topology.faces.len()
            )));
        }
        Ok(())
    }

    /// `Uᵀ (s − m)` for a flattened shape.
    pub fn project_flat(&self, flat: &DVector<f64>) -> Result<ShapeParams> {
        if flat.len() != self.dim() {
            return Err(Error::DimensionMismatch { what: "flattened shape length", expected: self.dim(), actual: flat.len() });
        }
        Ok(ShapeParams::new(self.basis.tr_mul(&(flat - &self.mean))))
    }

    /// Least-squares parameters of `shape` in the model subspace.
    pub fn project(&self, shape: &TriMesh) -> Result<ShapeParams> {
        self.check_topology(shape)?;
        self.project_flat(&shape.to_flat())
    }

    /// Orthogonal projection of `shape` onto the model's affine subspace.
    pub fn reconstruct(&self, shape: &TriMesh) -> Result<TriMesh> {
        self.sample(&self.project(shape)?)
    }

    /// Draws `p_k ~ N(0, λ_k)` from a seeded ChaCha8 stream. With `clamp_3sigma`
    /// every component is clamped to `±3√λ_k`.
    pub fn random_params(&self, seed: u64, clamp_3sigma: bool) -> ShapeParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.random_params_with(&mut rng, clamp_3sigma)
    }

    pub fn random_params_with<R: rand::Rng + ?Sized>(&self, rng: &mut R, clamp_3sigma: bool) -> ShapeParams {
        let values = DVector::from_iterator(
            self.n_components(),
            self.eigenvalues.iter().map(|&l| {
                let sd = l.sqrt();
                let z: f64 = StandardNormal.sample(rng);
                let z = if clamp_3sigma { z.clamp(-3.0, 3.0) } else { z };
                z * sd
            }),
        );
        ShapeParams::new(values)
    }

    /// Dense `K = U Λ Uᵀ`, refused above [`DEFAULT_DENSE_CAP`] rows.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        self.covariance_capped(DEFAULT_DENSE_CAP)
    }

    pub fn covariance_capped(&self, cap: usize) -> Result<DMatrix<f64>> {
        if self.dim() > cap {
            return Err(Error::DenseCap { rows: self.dim(), cap });
        }
        let scaled = self.scaled_basis();
        let mut k = &scaled * scaled.transpose();
        crate::linalg::symmetrize(&mut k);
        Ok(k)
    }

    /// `U Λ^{1/2}`: a low-rank factor of the covariance.
    pub fn scaled_basis(&self) -> DMatrix<f64> {
        let mut f = self.basis.clone();
        for (k, mut col) in f.column_iter_mut().enumerate() {
            col *= self.eigenvalues[k].sqrt();
        }
        f
    }

    /// 3×3 covariance block between vertices `a` and `b`, without
    /// materializing the dense matrix.
    pub fn covariance_block(&self, a: usize, b: usize) -> Matrix3<f64> {
        let ua = self.basis.rows(3 * a, 3);
        let ub = self.basis.rows(3 * b, 3);
        let mut out = Matrix3::zeros();
        for k in 0..self.n_components() {
            out += ua.column(k) * ub.column(k).transpose() * self.eigenvalues[k];
        }
        out
    }

    /// Keeps the leading `k` components.
    pub fn truncate(&self, k: usize) -> Result<ShapeModel> {
        if k == 0 || k > self.n_components() {
            return Err(Error::OutOfRange(format!(
                "truncation to {k} components (model has {})",
                self.n_components()
            )));
        }
        Ok(ShapeModel {
            mean: self.mean.clone(),
            basis: self.basis.columns(0, k).into_owned(),
            eigenvalues: self.eigenvalues.rows(0, k).into_owned(),
            topology: self.topology.clone(),
        })
    }

    pub fn total_variance(&self) -> f64 {
        self.eigenvalues.sum()
    }

    /// Writes `manifest.json`, `topology.json` and the `f64` blobs.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = ModelManifest {
            format_version: FORMAT_VERSION,
            kind: "pdm".into(),
            n_vertices: self.n_vertices(),
            n_components: self.n_components(),
            eigenvalues: self.eigenvalues.iter().copied().collect(),
            topology: TOPOLOGY_FILE.into(),
            blobs: PDM_BLOBS.iter().map(|s| s.to_string()).collect(),
        };
        store::write_json(&dir.join(MANIFEST), &manifest)?;
        store::write_json(&dir.join(TOPOLOGY_FILE), self.topology.as_ref())?;
        store::write_f64_blob(&dir.join(PDM_BLOBS[0]), self.mean.as_slice())?;
        // Row-major, so each vertex's three rows are contiguous.
        let row_major: Vec<f64> = self.basis.transpose().as_slice().to_vec();
        store::write_f64_blob(&dir.join(PDM_BLOBS[1]), &row_major)?;
        store::write_f64_blob(&dir.join(PDM_BLOBS[2]), self.eigenvalues.as_slice())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ShapeModel> {
        let mpath = dir.join(MANIFEST);
        let manifest: ModelManifest = store::read_json(&mpath)?;
        store::check_version(&mpath, manifest.format_version)?;
        if manifest.kind != "pdm" {
            return Err(Error::format(&mpath, format!("expected a pdm artifact, found `{}`", manifest.kind)));
        }
        let topology: Topology = store::read_json::<Topology>(&dir.join(&manifest.topology))?.validated()?;
        if topology.n_vertices != manifest.n_vertices {
            return Err(Error::format(&mpath, "topology vertex count disagrees with manifest"));
        }
        let dim = 3 * manifest.n_vertices;
        let n = manifest.n_components;
        let mean = store::read_f64_blob(&dir.join(PDM_BLOBS[0]), dim)?;
        let basis_rm = store::read_f64_blob(&dir.join(PDM_BLOBS[1]), dim * n)?;
        let eig = store::read_f64_blob(&dir.join(PDM_BLOBS[2]), n)?;
        ShapeModel::new(
            DVector::from_vec(mean),
            DMatrix::from_row_slice(dim, n, &basis_rm),
            DVector::from_vec(eig),
            Arc::new(topology),
        )
    }

    /// Short content hash of the model (mean, basis, eigenvalues, faces),
    /// used as its identifier in derived artifacts.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity(8 * (self.mean.len() * (1 + self.n_components()) + self.n_components()));
        for v in self.mean.iter().chain(self.basis.iter()).chain(self.eigenvalues.iter()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for f in &self.topology.faces {
            for &i in f {
                bytes.extend_from_slice(&(i as u64).to_le_bytes());
            }
        }
        store::sha256_hex(&bytes)[..16].to_string()
    }

    /// Files making up a saved model, in hashing order.
    pub fn artifact_files() -> Vec<String> {
        let mut v = vec![MANIFEST.to_string(), TOPOLOGY_FILE.to_string()];
        v.extend(PDM_BLOBS.iter().map(|s| s.to_string()));
        v
    }
}

const TOPOLOGY_FILE: &str = "topology.json";
const PDM_BLOBS: [&str; 3] = ["mean.f64", "basis.f64", "eigenvalues.f64"];

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    kind: String,
    n_vertices: usize,
    n_components: usize,
    eigenvalues: Vec<f64>,
    topology: String,
    blobs: Vec<String>,
}

/// Fits a PCA model to meshes in dense correspondence.
///
/// Computed from the thin SVD of the centered data, never the 3N×3N
/// covariance. Returns at most `n_components` components; components below
/// the numerical-rank floor are dropped.
pub fn fit_pdm(shapes: &[TriMesh], n_components: usize) -> Result<ShapeModel> {
    let first = shapes
        .first()
        .ok_or_else(|| Error::DegenerateData("no training shapes".into()))?;
    for (k, s) in shapes.iter().enumerate().skip(1) {
        s.require_same_topology(first, &format!("training shape {k}"))?;
    }
    let data = DMatrix::from_columns(&shapes.iter().map(|s| s.to_flat()).collect::<Vec<_>>());
    fit_pdm_flat(first.topology().clone(), &data, n_components)
}

/// [`fit_pdm`] on a 3N×n data matrix whose columns are flattened shapes.
pub fn fit_pdm_flat(topology: Arc<Topology>, data: &DMatrix<f64>, n_components: usize) -> Result<ShapeModel> {
    let n = data.ncols();
    let dim = data.nrows();
    if n < 2 {
        return Err(Error::DegenerateData(format!("PCA needs at least 2 shapes, got {n}")));
    }
    if dim != 3 * topology.n_vertices {
        return Err(Error::DimensionMismatch { what: "data rows", expected: 3 * topology.n_vertices, actual: dim });
    }
    let max = (n - 1).min(dim);
    if n_components == 0 || n_components > max {
        return Err(Error::OutOfRange(format!(
            "n_components = {n_components} must lie in 1..={max} for {n} samples"
        )));
    }
    let mean = data.column_mean();
    let mut centered = data.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let svd = thin_svd(&centered)?;
    let factor = COVARIANCE_ESTIMATOR.factor(n);
    let eig: Vec<f64> = svd.singular_values.iter().map(|s| s * s * factor).collect();
    let top = eig.first().copied().unwrap_or(0.0);
    let scale = mean.amax().max(1.0);
    // Zero variance relative to the data magnitude means identical shapes.
    if !(top > (1e-14 * scale).powi(2)) {
        return Err(Error::DegenerateData("training shapes have zero variance".into()));
    }
    let rank = eig.iter().filter(|&&l| l >= EIGEN_FLOOR * top).count();
    let k = n_components.min(rank);
    ShapeModel::new(
        mean,
        svd.u.columns(0, k).into_owned(),
        DVector::from_vec(eig[..k].to_vec()),
        topology,
    )
}
