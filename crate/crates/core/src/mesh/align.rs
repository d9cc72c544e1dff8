//! Similarity transforms and least-squares Procrustes alignment.

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `p ↦ s·R·p + t` with `s > 0` and `R` a proper rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::OutOfRange(format!("scale must be positive, got {scale}")));
        }
        let ortho = (rotation * rotation.transpose() - Matrix3::identity()).amax();
        if ortho > 1e-9 || rotation.determinant() < 0.0 {
            return Err(Error::OutOfRange("rotation is not a proper orthonormal matrix".into()));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.scale * (self.rotation * p.coords) + self.translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let rt = self.rotation.transpose();
        SimilarityTransform {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }
}

/// Root-mean-square distance between two equally long point lists.
pub fn rms_distance(a: &[Point3<f64>], b: &[Point3<f64>]) -> f64 {
    let n = a.len().max(1) as f64;
    (a.iter().zip(b).map(|(p, q)| (p - q).norm_squared()).sum::<f64>() / n).sqrt()
}

fn centered(points: &[Point3<f64>]) -> (Vector3<f64>, Vec<Vector3<f64>>) {
    let mean = points.iter().map(|p| p.coords).sum::<Vector3<f64>>() / points.len() as f64;
    (mean, points.iter().map(|p| p.coords - mean).collect())
}

/// Rejects coincident or collinear point sets: the second singular value of
/// the centered scatter must be a non-negligible fraction of the first.
fn check_spread(points: &[Vector3<f64>], what: &str) -> Result<()> {
    let scatter: Matrix3<f64> = points.iter().map(|p| p * p.transpose()).sum();
    let mut sv = scatter.symmetric_eigenvalues();
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::DegenerateData(format!(
            "{what} points are coincident or collinear"
        )));
    }
    Ok(())
}

/// Least-squares similarity (or rigid, when `with_scale` is false) transform
/// mapping `source` onto `target` (Umeyama 1991). Reflections are never
/// returned: the best proper rotation is chosen instead.
pub fn procrustes_align(
    source: &[Point3<f64>],
    target: &[Point3<f64>],
    with_scale: bool,
) -> Result<SimilarityTransform> {
    if source.len() != target.len() {
        return Err(Error::DimensionMismatch {
            what: "procrustes point count",
            expected: source.len(),
            actual: target.len(),
        });
    }
    if source.len() < 3 {
        return Err(Error::DegenerateData(format!(
            "procrustes needs at least 3 point pairs, got {}",
            source.len()
        )));
    }
    let (mu_s, src) = centered(source);
    let (mu_t, tgt) = centered(target);
    check_spread(&src, "source")?;
    check_spread(&tgt, "target")?;

    let n = source.len() as f64;
    let sigma: Matrix3<f64> = tgt.iter().zip(&src).map(|(t, s)| t * s.transpose()).sum::<Matrix3<f64>>() / n;
    let var_s = src.iter().map(|s| s.norm_squared()).sum::<f64>() / n;

    let svd = sigma.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // Flip the axis of the smallest singular value.
        let (kmin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (k, &s)| if s < acc.1 { (k, s) } else { acc });
        d[(kmin, kmin)] = -1.0;
    }
    let rotation = u * d * v_t;
    let scale = if with_scale {
        let trace: f64 = (0..3).map(|k| svd.singular_values[k] * d[(k, k)]).sum();
        trace / var_s
    } else {
        1.0
    };
    if !(scale > 0.0) {
        return Err(Error::DegenerateData("procrustes produced a non-positive scale".into()));
    }
    let translation = mu_t - scale * (rotation * mu_s);
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}
