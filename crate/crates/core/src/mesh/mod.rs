//! Triangle meshes in dense correspondence.
//!
//! A [`TriMesh`] pairs a vertex array with a shared, immutable [`Topology`]
//! (faces plus named landmarks). Meshes that are instances of the same shape
//! model share one `Arc<Topology>`, which makes topology checks cheap.
//!
//! Vertex coordinates flatten to the interleaved ordering
//! `x1, y1, z1, ..., xN, yN, zN` everywhere in the crate.

mod align;
mod query;
mod weights;

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use nalgebra::{DVector, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use align::{procrustes_align, rms_distance, SimilarityTransform};
pub use query::{closest_point_on_triangle, Bvh};
pub use weights::{distance_weights, weight_profile, WeightScheme};

/// Default embedding cap as a fraction of the bounding-box diagonal.
pub const DEFAULT_EMBED_CAP_FRACTION: f64 = 0.05;

/// Faces and landmarks shared by every instance of a shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Topology {
    pub n_vertices: usize,
    pub faces: Vec<[usize; 3]>,
    pub landmarks: BTreeMap<String, usize>,
    #[serde(skip)]
    boundary: OnceLock<Vec<bool>>,
}

impl PartialEq for Topology {
    fn eq(&self, other: &Self) -> bool {
        self.n_vertices == other.n_vertices
            && self.faces == other.faces
            && self.landmarks == other.landmarks
    }
}

impl Topology {
    pub fn new(
        n_vertices: usize,
        faces: Vec<[usize; 3]>,
        landmarks: BTreeMap<String, usize>,
    ) -> Result<Self> {
        for (k, f) in faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n_vertices) {
                return Err(Error::InvalidMesh(format!(
                    "face {k} references a vertex beyond {n_vertices}"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {k} is degenerate: {f:?}")));
            }
        }
        for (label, &i) in &landmarks {
            if i >= n_vertices {
                return Err(Error::InvalidMesh(format!(
                    "landmark `{label}` index {i} out of range"
                )));
            }
        }
        Ok(Self {
            n_vertices,
            faces,
            landmarks,
            boundary: OnceLock::new(),
        })
    }

    /// Validates a topology that came from deserialization.
    pub fn validated(self) -> Result<Self> {
        Self::new(self.n_vertices, self.faces, self.landmarks)
    }

    /// Unique undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Per-vertex flag: true when the vertex lies on an edge that is not
    /// shared by exactly two faces (open boundary or non-manifold edge).
    pub fn boundary_vertices(&self) -> &[bool] {
        self.boundary.get_or_init(|| {
            let mut edges: Vec<(usize, usize)> = self
                .faces
                .iter()
                .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
                .map(|(a, b)| (a.min(b), a.max(b)))
                .collect();
            edges.sort_unstable();
            let mut flags = vec![false; self.n_vertices];
            let mut k = 0;
            while k < edges.len() {
                let mut run = 1;
                while k + run < edges.len() && edges[k + run] == edges[k] {
                    run += 1;
                }
                if run != 2 {
                    flags[edges[k].0] = true;
                    flags[edges[k].1] = true;
                }
                k += run;
            }
            flags
        })
    }

    pub fn landmark(&self, label: &str) -> Result<usize> {
        self.landmarks
            .get(label)
            .copied()
            .ok_or_else(|| Error::MissingLandmark(label.to_string()))
    }
}

/// A point on a mesh surface: a face and barycentric coordinates within it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub face: usize,
    pub bary: [f64; 3],
}

impl SurfacePoint {
    /// Position within the face of the largest barycentric coordinate
    /// (first on ties).
    pub fn dominant_corner(&self) -> usize {
        let mut best = 0;
        for k in 1..3 {
            if self.bary[k] > self.bary[best] {
                best = k;
            }
        }
        best
    }
}

/// Triangle mesh with shared topology.
#[derive(Debug, Clone)]
pub struct TriMesh {
    vertices: Vec<Point3<f64>>,
    topology: Arc<Topology>,
    bvh: OnceLock<Arc<Bvh>>,
}

impl TriMesh {
    pub fn new(
        vertices: Vec<Point3<f64>>,
        faces: Vec<[usize; 3]>,
        landmarks: BTreeMap<String, usize>,
    ) -> Result<Self> {
        let topology = Topology::new(vertices.len(), faces, landmarks)?;
        Self::with_topology(Arc::new(topology), vertices)
    }

    pub fn with_topology(topology: Arc<Topology>, vertices: Vec<Point3<f64>>) -> Result<Self> {
        if vertices.len() != topology.n_vertices {
            return Err(Error::DimensionMismatch {
                what: "vertex count",
                expected: topology.n_vertices,
                actual: vertices.len(),
            });
        }
        if vertices.iter().any(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh("non-finite vertex coordinate".into()));
        }
        Ok(Self {
            vertices,
            topology,
            bvh: OnceLock::new(),
        })
    }

    /// Same topology, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Point3<f64>>) -> Result<Self> {
        Self::with_topology(self.topology.clone(), vertices)
    }

    /// Rebuilds a mesh from an interleaved `3N` coordinate vector.
    pub fn from_flat(topology: Arc<Topology>, flat: &DVector<f64>) -> Result<Self> {
        if flat.len() != 3 * topology.n_vertices {
            return Err(Error::DimensionMismatch {
                what: "flattened shape length",
                expected: 3 * topology.n_vertices,
                actual: flat.len(),
            });
        }
        let vertices = flat
            .as_slice()
            .chunks_exact(3)
            .map(|c| Point3::new(c[0], c[1], c[2]))
            .collect();
        Self::with_topology(topology, vertices)
    }

    /// Interleaved `x1, y1, z1, ...` coordinate vector.
    pub fn to_flat(&self) -> DVector<f64> {
        DVector::from_iterator(
            3 * self.vertices.len(),
            self.vertices.iter().flat_map(|p| [p.x, p.y, p.z]),
        )
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn vertex(&self, i: usize) -> Point3<f64> {
        self.vertices[i]
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.topology.faces
    }

    pub fn landmarks(&self) -> &BTreeMap<String, usize> {
        &self.topology.landmarks
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.topology.faces.len()
    }

    pub fn landmark_index(&self, label: &str) -> Result<usize> {
        self.topology.landmark(label)
    }

    pub fn landmark_point(&self, label: &str) -> Result<Point3<f64>> {
        Ok(self.vertices[self.landmark_index(label)?])
    }

    /// True when both meshes have the same vertex count and face list.
    pub fn same_topology(&self, other: &TriMesh) -> bool {
        Arc::ptr_eq(&self.topology, &other.topology)
            || (self.topology.n_vertices == other.topology.n_vertices
                && self.topology.faces == other.topology.faces)
    }

    pub fn require_same_topology(&self, other: &TriMesh, what: &str) -> Result<()> {
        if self.same_topology(other) {
            Ok(())
        } else {
            Err(Error::TopologyMismatch(format!(
                "{what}: {} vertices / {} faces vs {} vertices / {} faces",
                self.n_vertices(),
                self.n_faces(),
                other.n_vertices(),
                other.n_faces()
            )))
        }
    }

    pub fn bounding_box(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = Point3::from(Vector3::repeat(f64::INFINITY));
        let mut hi = Point3::from(Vector3::repeat(f64::NEG_INFINITY));
        for p in &self.vertices {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        if self.vertices.is_empty() {
            return 0.0;
        }
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    pub fn centroid(&self) -> Point3<f64> {
        let sum: Vector3<f64> = self.vertices.iter().map(|p| p.coords).sum();
        Point3::from(sum / self.vertices.len().max(1) as f64)
    }

    pub fn face_points(&self, face: usize) -> [Point3<f64>; 3] {
        let f = self.topology.faces[face];
        [self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]]
    }

    /// Cartesian position of a surface point.
    pub fn surface_point(&self, sp: &SurfacePoint) -> Point3<f64> {
        let [a, b, c] = self.face_points(sp.face);
        Point3::from(a.coords * sp.bary[0] + b.coords * sp.bary[1] + c.coords * sp.bary[2])
    }

    /// Vertex of the embedding triangle nearest to the surface point
    /// (largest barycentric coordinate).
    pub fn nearest_vertex(&self, sp: &SurfacePoint) -> usize {
        self.topology.faces[sp.face][sp.dominant_corner()]
    }

    pub fn boundary_vertices(&self) -> &[bool] {
        self.topology.boundary_vertices()
    }

    /// A surface point counts as on the boundary when its nearest vertex
    /// is a boundary vertex.
    pub fn is_boundary_point(&self, sp: &SurfacePoint) -> bool {
        self.boundary_vertices()[self.nearest_vertex(sp)]
    }

    pub(crate) fn bvh(&self) -> &Bvh {
        self.bvh.get_or_init(|| Arc::new(Bvh::build(self)))
    }

    /// Closest surface point to `query` and its distance. Ties within
    /// `1e-12` relative go to the lowest face index.
    pub fn closest_point(&self, query: &Point3<f64>) -> Result<(SurfacePoint, f64)> {
        if self.n_faces() == 0 {
            return Err(Error::EmptyMesh);
        }
        Ok(self.bvh().closest(self, query))
    }

    /// Exhaustive closest-point search over all faces; reference for the
    /// accelerated query.
    pub fn closest_point_brute_force(&self, query: &Point3<f64>) -> Result<(SurfacePoint, f64)> {
        if self.n_faces() == 0 {
            return Err(Error::EmptyMesh);
        }
        let mut best: Option<(SurfacePoint, f64)> = None;
        for face in 0..self.n_faces() {
            let [a, b, c] = self.face_points(face);
            let (bary, dist) = closest_point_on_triangle(query, &a, &b, &c);
            let cand = (SurfacePoint { face, bary }, dist);
            best = Some(match best {
                None => cand,
                Some(cur) => query::better(cand, cur),
            });
        }
        Ok(best.expect("mesh has faces"))
    }

    /// Embeds `query` on the surface. `cap` defaults to 5% of the bounding
    /// box diagonal; farther queries are rejected.
    pub fn barycentric_embed(&self, query: &Point3<f64>, cap: Option<f64>) -> Result<SurfacePoint> {
        let cap = cap.unwrap_or(DEFAULT_EMBED_CAP_FRACTION * self.bbox_diagonal());
        let (sp, distance) = self.closest_point(query)?;
        if distance > cap {
            return Err(Error::EmbeddingCap { distance, cap });
        }
        Ok(sp)
    }

    /// Short content hash of vertices and faces.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity(24 * (self.vertices.len() + self.n_faces()));
        for p in &self.vertices {
            for c in p.iter() {
                bytes.extend_from_slice(&c.to_le_bytes());
            }
        }
        for f in self.faces() {
            for &i in f {
                bytes.extend_from_slice(&(i as u64).to_le_bytes());
            }
        }
        crate::store::sha256_hex(&bytes)[..16].to_string()
    }

    pub fn transformed(&self, t: &SimilarityTransform) -> TriMesh {
        let vertices = self.vertices.iter().map(|p| t.apply(p)).collect();
        Self::with_topology(self.topology.clone(), vertices).expect("same vertex count")
    }

    /// Sub-mesh on `keep` (in the given order). Faces with all three
    /// vertices kept survive; landmarks on kept vertices are remapped.
    pub fn submesh(&self, keep: &[usize]) -> Result<TriMesh> {
        let mut map = vec![usize::MAX; self.n_vertices()];
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.n_vertices() {
                return Err(Error::OutOfRange(format!("vertex {old} in submesh selection")));
            }
            if map[old] != usize::MAX {
                return Err(Error::InvalidConfig(format!("vertex {old} selected twice")));
            }
            map[old] = new;
        }
        let faces = self
            .faces()
            .iter()
            .filter(|f| f.iter().all(|&i| map[i] != usize::MAX))
            .map(|f| [map[f[0]], map[f[1]], map[f[2]]])
            .collect();
        let landmarks = self
            .landmarks()
            .iter()
            .filter(|(_, &i)| map[i] != usize::MAX)
            .map(|(k, &i)| (k.clone(), map[i]))
            .collect();
        let vertices = keep.iter().map(|&i| self.vertices[i]).collect();
        TriMesh::new(vertices, faces, landmarks)
    }

    /// Root-mean-square per-vertex distance to another mesh of the same topology.
    pub fn rms_to(&self, other: &TriMesh) -> Result<f64> {
        self.require_same_topology(other, "rms distance")?;
        Ok(rms_distance(&self.vertices, &other.vertices))
    }

    /// Mean per-vertex Euclidean distance to another mesh of the same topology.
    pub fn mean_distance_to(&self, other: &TriMesh) -> Result<f64> {
        self.require_same_topology(other, "mean distance")?;
        let n = self.n_vertices().max(1) as f64;
        Ok(self
            .vertices
            .iter()
            .zip(&other.vertices)
            .map(|(a, b)| (a - b).norm())
            .sum::<f64>()
            / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad() -> TriMesh {
        let v = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        let lm = BTreeMap::from([("corner".to_string(), 2)]);
        TriMesh::new(v, vec![[0, 1, 2], [0, 2, 3]], lm).unwrap()
    }

    #[test]
    fn rejects_invalid_faces_and_landmarks() {
        let v = vec![Point3::origin(); 3];
        assert!(TriMesh::new(v.clone(), vec![[0, 1, 3]], BTreeMap::new()).is_err());
        assert!(TriMesh::new(v.clone(), vec![[0, 1, 1]], BTreeMap::new()).is_err());
        let lm = BTreeMap::from([("x".to_string(), 7)]);
        assert!(TriMesh::new(v, vec![[0, 1, 2]], lm).is_err());
    }

    #[test]
    fn flat_round_trip_is_interleaved() {
        let m = quad();
        let f = m.to_flat();
        assert_eq!(f.as_slice()[3..6], [1.0, 0.0, 0.0]);
        let back = TriMesh::from_flat(m.topology().clone(), &f).unwrap();
        assert_eq!(back.vertices(), m.vertices());
    }

    #[test]
    fn boundary_of_open_quad() {
        let m = quad();
        assert!(m.boundary_vertices().iter().all(|&b| b));
        assert_eq!(m.topology().edges().len(), 5);
    }

    #[test]
    fn submesh_remaps_faces_and_landmarks() {
        let m = quad();
        let s = m.submesh(&[2, 0, 1]).unwrap();
        assert_eq!(s.faces(), &[[1, 2, 0]]);
        assert_eq!(s.landmark_index("corner").unwrap(), 0);
    }

    #[test]
    fn empty_mesh_query_errors() {
        let m = TriMesh::new(vec![Point3::origin()], vec![], BTreeMap::new()).unwrap();
        assert!(matches!(m.closest_point(&Point3::origin()), Err(Error::EmptyMesh)));
    }
}
