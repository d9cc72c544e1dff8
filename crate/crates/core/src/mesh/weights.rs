//! Per-vertex weights that decay with distance from an anchor point.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use super::TriMesh;
use crate::{Error, Result};

/// Weight profile as a function of distance `d` and scale `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    /// `max(0, 1 − d/s)`: reaches zero at `d = s`.
    InverseLinear,
    /// `exp(−d² / 2s²)`.
    Gaussian,
}

pub fn weight_profile(scheme: WeightScheme, d: f64, scale: f64) -> f64 {
    match scheme {
        WeightScheme::InverseLinear => (1.0 - d / scale).max(0.0),
        WeightScheme::Gaussian => (-0.5 * (d / scale).powi(2)).exp(),
    }
}

/// Weight in `[0, 1]` for every vertex, non-increasing in its Euclidean
/// distance from `anchor`.
pub fn distance_weights(
    mesh: &TriMesh,
    anchor: &Point3<f64>,
    scheme: WeightScheme,
    scale: f64,
) -> Result<Vec<f64>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::OutOfRange(format!("weight scale must be positive, got {scale}")));
    }
    Ok(mesh
        .vertices()
        .iter()
        .map(|p| weight_profile(scheme, (p - anchor).norm(), scale))
        .collect())
}
