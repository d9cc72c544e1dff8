//! Latent-space regression between two shape models.
//!
//! Pairs of head/face parameters are synthesized from the head model, a
//! linear map `W` from face parameters to head parameters is fitted by least
//! squares, and `W` predicts a full head from a face:
//! `S_h = m_h + U_h W U_fᵀ (S_f − m_f)`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Point3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::symmetric_eigen;
use crate::mesh::{distance_weights, WeightScheme};
use crate::nicp::{crop_to_face, nicp_register, shared_landmark_pairs, MergeConfig, NicpConfig};
use crate::store::{self, FORMAT_VERSION, MANIFEST};
use crate::{fit_pdm, Error, Result, ShapeModel, ShapeParams, TriMesh};

/// Relative eigenvalue threshold below which `C_f C_fᵀ` is treated as singular.
pub const RANK_TOL: f64 = 1e-12;

/// Column-aligned head and face parameters of synthesized pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamPairSet {
    /// `n_h × n_r` (`C_h`).
    pub head_params: DMatrix<f64>,
    /// `n_f × n_r` (`C_f`).
    pub face_params: DMatrix<f64>,
    /// Draws that failed and were resampled, as `(draw index, error)`.
    pub resampled: Vec<(usize, String)>,
}

impl ParamPairSet {
    pub fn new(head_params: DMatrix<f64>, face_params: DMatrix<f64>) -> Result<Self> {
        if head_params.ncols() != face_params.ncols() {
            return Err(Error::DimensionMismatch {
                what: "pair count",
                expected: head_params.ncols(),
                actual: face_params.ncols(),
            });
        }
        Ok(Self { head_params, face_params, resampled: Vec::new() })
    }

    pub fn n_r(&self) -> usize {
        self.head_params.ncols()
    }
}

/// How the face region of a synthesized head is extracted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaceCrop {
    /// Register the face mean onto the head instance.
    Nicp(NicpConfig),
    /// Take the listed head vertices, in face-vertex order. Exact when the
    /// face topology is a vertex subset of the head topology.
    VertexMask(Vec<usize>),
}

impl FaceCrop {
    fn apply(&self, head: &TriMesh, face_model: &ShapeModel, face_mean: &TriMesh) -> Result<TriMesh> {
        match self {
            FaceCrop::Nicp(cfg) => crop_to_face(head, face_mean, cfg),
            FaceCrop::VertexMask(mask) => {
                if mask.len() != face_model.n_vertices() {
                    return Err(Error::DimensionMismatch {
                        what: "face mask length",
                        expected: face_model.n_vertices(),
                        actual: mask.len(),
                    });
                }
                let vertices = mask
                    .iter()
                    .map(|&i| {
                        if i < head.n_vertices() {
                            Ok(head.vertex(i))
                        } else {
                            Err(Error::OutOfRange(format!("face mask vertex {i}")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                TriMesh::with_topology(face_model.topology().clone(), vertices)
            }
        }
    }
}

/// Retry budget per draw when a face crop fails.
pub const DEFAULT_RETRIES: usize = 3;

/// Synthesizes `n_r` head/face parameter pairs.
///
/// Draw `k` samples `p_h ~ N(0, Λ_h)` from its own ChaCha8 stream (seed,
/// stream `k`), builds the head instance, crops its face and projects the
/// crop onto the face model. A failed crop is recorded and the draw is
/// resampled from the same stream, up to `retries` extra attempts.
pub fn synthesize_param_pairs(
    head_model: &ShapeModel,
    face_model: &ShapeModel,
    crop: &FaceCrop,
    n_r: usize,
    seed: u64,
    retries: usize,
) -> Result<ParamPairSet> {
    let n_f = face_model.n_components();
    if n_r < n_f + 1 {
        return Err(Error::InvalidConfig(format!(
            "n_r = {n_r} pairs cannot determine a map from {n_f} face components (need at least {})",
            n_f + 1
        )));
    }
    let face_mean = face_model.mean_mesh();
    let draws: Vec<Result<(DVector<f64>, DVector<f64>, Vec<(usize, String)>)>> = (0..n_r)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut failures = Vec::new();
            loop {
                let p_h = head_model.random_params_with(&mut rng, false);
                let attempt = head_model
                    .sample(&p_h)
                    .and_then(|head| face_model.project(&crop.apply(&head, face_model, &face_mean)?));
                match attempt {
                    Ok(p_f) => return Ok((p_h.values, p_f.values, failures)),
                    Err(e) if failures.len() < retries => failures.push((k, e.to_string())),
                    Err(e) => {
                        return Err(Error::Numerical(format!(
                            "draw {k} failed after {} attempts: {e}",
                            failures.len() + 1
                        )))
                    }
                }
            }
        })
        .collect();
    let mut head_cols = Vec::with_capacity(n_r);
    let mut face_cols = Vec::with_capacity(n_r);
    let mut resampled = Vec::new();
    for d in draws {
        let (h, f, fails) = d?;
        head_cols.push(h);
        face_cols.push(f);
        resampled.extend(fails);
    }
    let mut pairs = ParamPairSet::new(DMatrix::from_columns(&head_cols), DMatrix::from_columns(&face_cols))?;
    pairs.resampled = resampled;
    Ok(pairs)
}

/// Linear map from source (face) parameters to target (head) parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionMap {
    /// `n_h × n_f`.
    pub matrix: DMatrix<f64>,
    pub source_model_id: String,
    pub target_model_id: String,
    pub n_r_used: usize,
}

/// `W = C_h C_fᵀ (C_f C_fᵀ + ridge·I)⁻¹`, the least-squares minimizer of
/// `‖C_h − W C_f‖²` (plus `ridge ‖W‖²`).
///
/// With `ridge = 0` a numerically singular `C_f C_fᵀ` is an error reporting
/// its rank; the ridge is never raised automatically. Model ids are left
/// empty; [`fit_regression`] fills them.
pub fn solve_regression(pairs: &ParamPairSet, ridge: f64) -> Result<RegressionMap> {
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidConfig(format!("ridge must be a finite non-negative number, got {ridge}")));
    }
    let c_h = &pairs.head_params;
    let c_f = &pairs.face_params;
    let n_f = c_f.nrows();
    let mut gram = c_f * c_f.transpose();
    for i in 0..n_f {
        gram[(i, i)] += ridge;
    }
    if ridge == 0.0 {
        let rank = symmetric_eigen(&gram)?.numerical_rank(RANK_TOL);
        if rank < n_f {
            return Err(Error::RankDeficient { rank, required: n_f });
        }
    }
    // Gram is symmetric positive definite here; solve G Wᵀ = C_f C_hᵀ.
    let rhs = c_f * c_h.transpose();
    let w_t = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("C_f C_fᵀ is not positive definite".into()))?
        .solve(&rhs);
    Ok(RegressionMap {
        matrix: w_t.transpose(),
        source_model_id: String::new(),
        target_model_id: String::new(),
        n_r_used: pairs.n_r(),
    })
}

/// [`solve_regression`] with the map tagged by the two models' fingerprints.
pub fn fit_regression(
    head_model: &ShapeModel,
    face_model: &ShapeModel,
    pairs: &ParamPairSet,
    ridge: f64,
) -> Result<RegressionMap> {
    check_pairs(head_model, face_model, pairs)?;
    let mut map = solve_regression(pairs, ridge)?;
    map.source_model_id = face_model.fingerprint();
    map.target_model_id = head_model.fingerprint();
    Ok(map)
}

fn check_pairs(head_model: &ShapeModel, face_model: &ShapeModel, pairs: &ParamPairSet) -> Result<()> {
    if pairs.head_params.nrows() != head_model.n_components() {
        return Err(Error::DimensionMismatch {
            what: "head parameter rows",
            expected: head_model.n_components(),
            actual: pairs.head_params.nrows(),
        });
    }
    if pairs.face_params.nrows() != face_model.n_components() {
        return Err(Error::DimensionMismatch {
            what: "face parameter rows",
            expected: face_model.n_components(),
            actual: pairs.face_params.nrows(),
        });
    }
    Ok(())
}

impl RegressionMap {
    fn check_models(&self, head_model: &ShapeModel, face_model: &ShapeModel) -> Result<()> {
        if self.matrix.nrows() != head_model.n_components() {
            return Err(Error::DimensionMismatch {
                what: "regression map rows",
                expected: head_model.n_components(),
                actual: self.matrix.nrows(),
            });
        }
        if self.matrix.ncols() != face_model.n_components() {
            return Err(Error::DimensionMismatch {
                what: "regression map columns",
                expected: face_model.n_components(),
                actual: self.matrix.ncols(),
            });
        }
        Ok(())
    }

    /// Head parameters `W p_f`.
    pub fn map_params(&self, face_params: &ShapeParams) -> Result<ShapeParams> {
        if face_params.len() != self.matrix.ncols() {
            return Err(Error::DimensionMismatch {
                what: "face parameter length",
                expected: self.matrix.ncols(),
                actual: face_params.len(),
            });
        }
        Ok(ShapeParams::new(&self.matrix * &face_params.values))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = MapManifest {
            format_version: FORMAT_VERSION,
            kind: "regression-map".into(),
            rows: self.matrix.nrows(),
            cols: self.matrix.ncols(),
            source_model_id: self.source_model_id.clone(),
            target_model_id: self.target_model_id.clone(),
            n_r_used: self.n_r_used,
            blobs: vec![MAP_BLOB.into()],
        };
        store::write_json(&dir.join(MANIFEST), &manifest)?;
        let row_major: Vec<f64> = self.matrix.transpose().as_slice().to_vec();
        store::write_f64_blob(&dir.join(MAP_BLOB), &row_major)
    }

    pub fn load(dir: &Path) -> Result<RegressionMap> {
        let mpath = dir.join(MANIFEST);
        let m: MapManifest = store::read_json(&mpath)?;
        store::check_version(&mpath, m.format_version)?;
        if m.kind != "regression-map" {
            return Err(Error::format(&mpath, format!("expected a regression-map artifact, found `{}`", m.kind)));
        }
        let data = store::read_f64_blob(&dir.join(MAP_BLOB), m.rows * m.cols)?;
        Ok(RegressionMap {
            matrix: DMatrix::from_row_slice(m.rows, m.cols, &data),
            source_model_id: m.source_model_id,
            target_model_id: m.target_model_id,
            n_r_used: m.n_r_used,
        })
    }

    pub fn artifact_files() -> Vec<String> {
        vec![MANIFEST.to_string(), MAP_BLOB.to_string()]
    }
}

const MAP_BLOB: &str = "matrix.f64";

#[derive(Debug, Serialize, Deserialize)]
struct MapManifest {
    format_version: u32,
    kind: String,
    rows: usize,
    cols: usize,
    source_model_id: String,
    target_model_id: String,
    n_r_used: usize,
    blobs: Vec<String>,
}

/// Full head predicted from a face: `S_h = m_h + U_h W U_fᵀ (S_f − m_f)`.
pub fn predict_full_shape(
    head_model: &ShapeModel,
    face_model: &ShapeModel,
    map: &RegressionMap,
    face_shape: &TriMesh,
) -> Result<TriMesh> {
    map.check_models(head_model, face_model)?;
    let p_f = face_model.project(face_shape)?;
    head_model.sample(&map.map_params(&p_f)?)
}

/// Regression between the latent spaces of two arbitrary models from paired
/// shapes (`.0` in the source topology, `.1` in the target topology).
pub fn latent_to_latent_regression(
    source_model: &ShapeModel,
    target_model: &ShapeModel,
    paired_shapes: &[(TriMesh, TriMesh)],
    ridge: f64,
) -> Result<RegressionMap> {
    let n = paired_shapes.len();
    if n < source_model.n_components() {
        return Err(Error::InvalidConfig(format!(
            "{n} shape pairs cannot determine a map from {} source components",
            source_model.n_components()
        )));
    }
    let mut src = Vec::with_capacity(n);
    let mut dst = Vec::with_capacity(n);
    for (s, t) in paired_shapes {
        src.push(source_model.project(s)?.values);
        dst.push(target_model.project(t)?.values);
    }
    let pairs = ParamPairSet::new(DMatrix::from_columns(&dst), DMatrix::from_columns(&src))?;
    fit_regression(target_model, source_model, &pairs, ridge)
}

/// Settings of the regression-based model fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Face-into-head merge; its `face_mask` is the face region of the head
    /// topology that the real face replaces.
    pub merge: MergeConfig,
    pub nose_tip: String,
    /// Final registration of the template onto each merged head; `None`
    /// skips it (only valid when the template shares the head topology).
    pub reregister: Option<NicpConfig>,
    /// Anchor of the distance weights of the final registration; `None`
    /// uses the template centroid.
    pub head_center: Option<[f64; 3]>,
    pub center_scheme: WeightScheme,
    /// Profile scale; `None` uses twice the largest centre distance.
    pub center_scale: Option<f64>,
    /// Largest tolerated fraction of skipped corpus items.
    pub max_skip_fraction: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            merge: MergeConfig::default(),
            nose_tip: "nose_tip".into(),
            reregister: Some(NicpConfig::default()),
            head_center: None,
            center_scheme: WeightScheme::InverseLinear,
            center_scale: None,
            max_skip_fraction: 0.1,
        }
    }
}

/// Data weights of the final registration: the centre-distance profile,
/// rescaled so the closest vertex has weight 1.
pub fn head_center_weights(template: &TriMesh, config: &FusionConfig) -> Result<Vec<f64>> {
    let center = match config.head_center {
        Some(c) => Point3::from(c),
        None => template.centroid(),
    };
    let scale = match config.center_scale {
        Some(s) => s,
        None => 2.0 * template.vertices().iter().map(|p| (p - center).norm()).fold(0.0, f64::max),
    };
    let mut w = distance_weights(template, &center, config.center_scheme, scale)?;
    let max = w.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::InvalidConfig("head-centre weights vanish on every template vertex".into()));
    }
    for x in &mut w {
        *x /= max;
    }
    Ok(w)
}

/// Outcome of [`build_regression_fused_model`].
#[derive(Debug, Clone)]
pub struct FusedModel {
    pub model: ShapeModel,
    /// Fused heads in template topology, in corpus order (skipped items omitted).
    pub heads: Vec<TriMesh>,
    /// Skipped corpus items as `(index, error)`.
    pub skipped: Vec<(usize, String)>,
}

/// Regression-based fusion: for every corpus face, predict its head, merge
/// the real face into the prediction, register the template onto the merged
/// head and finally fit a PCA model over the results.
pub fn build_regression_fused_model(
    head_model: &ShapeModel,
    face_model: &ShapeModel,
    map: &RegressionMap,
    face_corpus: &[TriMesh],
    template: &TriMesh,
    config: &FusionConfig,
    n_components: usize,
) -> Result<FusedModel> {
    map.check_models(head_model, face_model)?;
    if !(0.0..=1.0).contains(&config.max_skip_fraction) {
        return Err(Error::InvalidConfig("max_skip_fraction must lie in [0, 1]".into()));
    }
    let reregister = match &config.reregister {
        Some(cfg) => {
            let mut cfg = cfg.clone();
            cfg.per_vertex_weights = Some(head_center_weights(template, config)?);
            Some(cfg)
        }
        None => {
            if template.n_vertices() != head_model.n_vertices() {
                return Err(Error::InvalidConfig(
                    "skipping the final registration needs a template in head-model topology".into(),
                ));
            }
            None
        }
    };
    let process = |face: &TriMesh| -> Result<TriMesh> {
        let predicted = predict_full_shape(head_model, face_model, map, face)?;
        let merged = crate::nicp::merge_face_into_head(&predicted, face, &config.nose_tip, &config.merge)?;
        match &reregister {
            Some(cfg) => {
                let mut cfg = cfg.clone();
                if cfg.landmark_pairs.is_empty() {
                    cfg.landmark_pairs = shared_landmark_pairs(template, &merged);
                }
                Ok(nicp_register(template, &merged, &cfg)?.deformed)
            }
            None => template.with_vertices(merged.vertices().to_vec()),
        }
    };
    let results: Vec<Result<TriMesh>> = face_corpus.par_iter().map(process).collect();
    let mut heads = Vec::with_capacity(results.len());
    let mut skipped = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(h) => heads.push(h),
            Err(e) => skipped.push((k, e.to_string())),
        }
    }
    if skipped.len() as f64 > config.max_skip_fraction * face_corpus.len() as f64 {
        return Err(Error::TooManyFailures {
            failed: skipped.len(),
            total: face_corpus.len(),
            last: skipped.last().map(|s| s.1.clone()).unwrap_or_default(),
        });
    }
    let model = fit_pdm(&heads, n_components)?;
    Ok(FusedModel { model, heads, skipped })
}
