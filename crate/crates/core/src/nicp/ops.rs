//! Face extraction and face-into-head merging built on the NICP engine.

use serde::{Deserialize, Serialize};

use super::{nicp_register, register_with_anchors, shared_landmark_pairs, Anchors, NicpConfig};
use crate::mesh::{distance_weights, WeightScheme};
use crate::{Error, Result, TriMesh};

/// Describes the facial part of `head_instance` in the topology of
/// `face_mean` by registering the face mean onto the head.
///
/// Landmark pairs come from the config, or else from labels shared by both
/// meshes; fewer than three pairs leave the initial alignment unresolved and
/// the crop is refused. Output vertices farther than the prune distance from
/// the head surface are snapped onto it.
pub fn crop_to_face(head_instance: &TriMesh, face_mean: &TriMesh, config: &NicpConfig) -> Result<TriMesh> {
    let mut cfg = config.clone();
    if cfg.landmark_pairs.is_empty() {
        cfg.landmark_pairs = shared_landmark_pairs(face_mean, head_instance);
    }
    if cfg.landmark_pairs.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "face crop needs at least 3 landmark pairs for the initial alignment, found {}",
            cfg.landmark_pairs.len()
        )));
    }
    let result = nicp_register(face_mean, head_instance, &cfg)?;
    let tau = cfg.prune.resolve(head_instance);
    let vertices = result
        .deformed
        .vertices()
        .iter()
        .zip(&result.correspondences)
        .map(|(p, c)| if c.distance > tau { c.point } else { *p })
        .collect();
    result.deformed.with_vertices(vertices)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub nicp: NicpConfig,
    /// Profile mapping nose-tip distance to attraction weight.
    pub scheme: WeightScheme,
    /// Profile scale; `None` uses the face radius (largest nose-tip distance
    /// over the face vertices).
    pub scale: Option<f64>,
    /// Head vertices allowed to follow the face; all others keep weight 0.
    pub face_mask: Option<Vec<usize>>,
    /// Explicit attraction weights, bypassing the distance profile.
    pub weights: Option<Vec<f64>>,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            nicp: NicpConfig::default(),
            scheme: WeightScheme::InverseLinear,
            scale: None,
            face_mask: None,
            weights: None,
        }
    }
}

/// Deforms `head` so that its facial part follows `face` while the outer
/// band blends smoothly into the cranium.
///
/// Every head vertex gets an attraction weight `w_i` that decays with its
/// distance from the nose tip. It is pulled toward the face surface with
/// weight `w_i` and toward its own original position with weight `1 − w_i`,
/// under the usual NICP stiffness. With `w ≡ 1` this is exactly
/// [`nicp_register`] of the head onto the face.
pub fn merge_face_into_head(head: &TriMesh, face: &TriMesh, nose_tip: &str, config: &MergeConfig) -> Result<TriMesh> {
    let n = head.n_vertices();
    let head_nose = head.landmark_point(nose_tip)?;
    let face_nose = face.landmark_point(nose_tip)?;
    let mut weights = match &config.weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::DimensionMismatch { what: "merge weights", expected: n, actual: w.len() });
            }
            w.clone()
        }
        None => {
            let scale = match config.scale {
                Some(s) => s,
                None => face.vertices().iter().map(|p| (p - face_nose).norm()).fold(0.0, f64::max),
            };
            distance_weights(head, &head_nose, config.scheme, scale)?
        }
    };
    if let Some(mask) = &config.face_mask {
        let mut keep = vec![false; n];
        for &i in mask {
            if i >= n {
                return Err(Error::OutOfRange(format!("face mask vertex {i}")));
            }
            keep[i] = true;
        }
        for (w, k) in weights.iter_mut().zip(keep) {
            if !k {
                *w = 0.0;
            }
        }
    }
    let mut cfg = config.nicp.clone();
    cfg.per_vertex_weights = Some(weights.clone());
    let anchor_weights: Vec<f64> = weights.iter().map(|w| 1.0 - w).collect();
    let result = if anchor_weights.iter().all(|&a| a == 0.0) {
        register_with_anchors(head, face, &cfg, None)?
    } else {
        let anchors = Anchors { weights: anchor_weights, targets: head.vertices().to_vec() };
        register_with_anchors(head, face, &cfg, Some(&anchors))?
    };
    Ok(result.deformed)
}
