//! Closest-point queries: point-triangle projection and an AABB tree.

use nalgebra::{Point3, Vector3};

use super::{SurfacePoint, TriMesh};

const LEAF_SIZE: usize = 4;

/// Relative tolerance under which two distances count as a tie.
fn tie_tol(best: f64) -> f64 {
    1e-12 * (1.0 + best)
}

/// Picks the better of two candidates: strictly closer wins, ties go to the
/// lower face index.
pub(crate) fn better(a: (SurfacePoint, f64), b: (SurfacePoint, f64)) -> (SurfacePoint, f64) {
    let tol = tie_tol(a.1.min(b.1));
    if a.1 < b.1 - tol {
        a
    } else if b.1 < a.1 - tol {
        b
    } else if a.0.face < b.0.face {
        a
    } else {
        b
    }
}

/// Closest point on triangle `abc` to `p` as barycentric coordinates
/// `(u, v, w)` for `(a, b, c)`, plus the distance.
///
/// Voronoi-region walk after Ericson, "Real-Time Collision Detection" 5.1.5.
/// Zero-area triangles fall back to the closest of their three edges.
pub fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> ([f64; 3], f64) {
    let bary = triangle_bary(p, a, b, c);
    let q = a.coords * bary[0] + b.coords * bary[1] + c.coords * bary[2];
    (bary, (p.coords - q).norm())
}

fn triangle_bary(p: &Point3<f64>, a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> [f64; 3] {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return [0.0, 1.0, 0.0];
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return [1.0 - v, v, 0.0];
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return [0.0, 0.0, 1.0];
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return [1.0 - w, 0.0, w];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [0.0, 1.0 - w, w];
    }
    let denom = va + vb + vc;
    if !(denom.abs() > f64::MIN_POSITIVE) || !denom.is_finite() {
        return degenerate_bary(p, a, b, c);
    }
    let v = vb / denom;
    let w = vc / denom;
    let u = 1.0 - v - w;
    if u < 0.0 || v < 0.0 || w < 0.0 {
        return degenerate_bary(p, a, b, c);
    }
    [u, v, w]
}

fn segment_param(p: &Point3<f64>, a: &Point3<f64>, b: &Point3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        0.0
    } else {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    }
}

fn degenerate_bary(p: &Point3<f64>, a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> [f64; 3] {
    let t_ab = segment_param(p, a, b);
    let t_bc = segment_param(p, b, c);
    let t_ca = segment_param(p, c, a);
    let cands = [
        [1.0 - t_ab, t_ab, 0.0],
        [0.0, 1.0 - t_bc, t_bc],
        [t_ca, 0.0, 1.0 - t_ca],
    ];
    let mut best = cands[0];
    let mut best_d = f64::INFINITY;
    for bary in cands {
        let q = a.coords * bary[0] + b.coords * bary[1] + c.coords * bary[2];
        let d = (p.coords - q).norm_squared();
        if d < best_d {
            best_d = d;
            best = bary;
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Vector3<f64>,
    hi: Vector3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: Vector3::repeat(f64::INFINITY),
            hi: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vector3<f64>) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn merge(&self, o: &Aabb) -> Aabb {
        Aabb {
            lo: self.lo.inf(&o.lo),
            hi: self.hi.sup(&o.hi),
        }
    }

    fn distance(&self, p: &Point3<f64>) -> f64 {
        let d = (self.lo - p.coords).sup(&(p.coords - self.hi)).sup(&Vector3::zeros());
        d.norm()
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Axis-aligned bounding-box tree over the faces of one mesh geometry.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

impl Bvh {
    pub fn build(mesh: &TriMesh) -> Self {
        let n = mesh.n_faces();
        let mut boxes = Vec::with_capacity(n);
        let mut centers = Vec::with_capacity(n);
        for f in 0..n {
            let mut b = Aabb::empty();
            for p in mesh.face_points(f) {
                b.grow(&p.coords);
            }
            centers.push((b.lo + b.hi) * 0.5);
            boxes.push(b);
        }
        let mut bvh = Bvh {
            nodes: Vec::new(),
            order: (0..n).collect(),
        };
        if n > 0 {
            bvh.split(0, n, &boxes, &centers);
        }
        bvh
    }

    fn split(&mut self, start: usize, end: usize, boxes: &[Aabb], centers: &[Vector3<f64>]) -> usize {
        let mut bounds = Aabb::empty();
        let mut cbox = Aabb::empty();
        for &f in &self.order[start..end] {
            bounds = bounds.merge(&boxes[f]);
            cbox.grow(&centers[f]);
        }
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { bounds, start, end });
            return id;
        }
        let extent = cbox.hi - cbox.lo;
        let axis = extent.imax();
        let mid = (start + end) / 2;
        self.order[start..end].sort_by(|&a, &b| {
            centers[a][axis]
                .total_cmp(&centers[b][axis])
                .then(a.cmp(&b))
        });
        self.nodes.push(Node::Leaf { bounds, start, end });
        let left = self.split(start, mid, boxes, centers);
        let right = self.split(mid, end, boxes, centers);
        self.nodes[id] = Node::Inner { bounds, left, right };
        id
    }

    pub(crate) fn closest(&self, mesh: &TriMesh, query: &Point3<f64>) -> (SurfacePoint, f64) {
        let mut best: Option<(SurfacePoint, f64)> = None;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if let Some((_, d)) = best {
                if node.bounds().distance(query) > d + tie_tol(d) {
                    continue;
                }
            }
            match node {
                Node::Leaf { start, end, .. } => {
                    for &face in &self.order[*start..*end] {
                        let [a, b, c] = mesh.face_points(face);
                        let (bary, dist) = closest_point_on_triangle(query, &a, &b, &c);
                        let cand = (SurfacePoint { face, bary }, dist);
                        best = Some(match best {
                            None => cand,
                            Some(cur) => better(cand, cur),
                        });
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[*left].bounds().distance(query);
                    let dr = self.nodes[*right].bounds().distance(query);
                    // Visit the nearer child first.
                    if dl <= dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        best.expect("closest() requires at least one face")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn unit_triangle() -> [Point3<f64>; 3] {
        [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ]
    }

    /// Dense barycentric grid over the triangle; reference minimizer.
    fn grid_min(p: &Point3<f64>, t: &[Point3<f64>; 3], n: usize) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=(n - i) {
                let v = i as f64 / n as f64;
                let w = j as f64 / n as f64;
                let q = t[0].coords * (1.0 - v - w) + t[1].coords * v + t[2].coords * w;
                best = best.min((p.coords - q).norm());
            }
        }
        best
    }

    #[test]
    fn interior_projection() {
        let [a, b, c] = unit_triangle();
        let (bary, d) = closest_point_on_triangle(&Point3::new(0.25, 0.25, 1.0), &a, &b, &c);
        assert!((bary[0] - 0.5).abs() < 1e-15);
        assert!((bary[1] - 0.25).abs() < 1e-15);
        assert!((bary[2] - 0.25).abs() < 1e-15);
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn interior_projection_matches_sampling() {
        let t = unit_triangle();
        let p = Point3::new(0.25, 0.25, 1.0);
        let (_, d) = closest_point_on_triangle(&p, &t[0], &t[1], &t[2]);
        assert!((grid_min(&p, &t, 400) - d).abs() < 1e-6);
    }

    #[test]
    fn clamps_past_edges_against_grid() {
        let t = unit_triangle();
        let n = 1000;
        for p in [
            Point3::new(0.9, 0.9, 3.0),
            Point3::new(-0.5, 0.3, 2.0),
            Point3::new(0.4, -0.7, 5.0),
            Point3::new(2.0, -1.0, 1.0),
        ] {
            let (bary, d) = closest_point_on_triangle(&p, &t[0], &t[1], &t[2]);
            assert!(bary.iter().all(|&x| x >= 0.0));
            assert!((bary.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let g = grid_min(&p, &t, n);
            // Grid resolution bounds the discretization error of the reference.
            assert!(d <= g + 1e-12 && g - d < 1.5 / n as f64, "{p:?}: {d} vs {g}");
        }
    }

    #[test]
    fn degenerate_triangle_falls_back_to_edges() {
        let a = Point3::new(0.0, 0.0, 0.0);
        let b = Point3::new(1.0, 0.0, 0.0);
        let c = Point3::new(2.0, 0.0, 0.0);
        let (bary, d) = closest_point_on_triangle(&Point3::new(1.5, 1.0, 0.0), &a, &b, &c);
        assert!((d - 1.0).abs() < 1e-12);
        assert!((bary.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bvh_agrees_with_brute_force() {
        // A wavy grid gives many nearly-competing faces.
        let n = 12;
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (i as f64, j as f64);
                v.push(Point3::new(x, y, (x * 0.7).sin() + (y * 0.4).cos()));
            }
        }
        let mut faces = Vec::new();
        for i in 0..n - 1 {
            for j in 0..n - 1 {
                let k = i * n + j;
                faces.push([k, k + n, k + 1]);
                faces.push([k + 1, k + n, k + n + 1]);
            }
        }
        let mesh = TriMesh::new(v, faces, BTreeMap::new()).unwrap();
        for s in 0..200 {
            let t = s as f64;
            let q = Point3::new((t * 0.37).rem_euclid(13.0) - 0.5, (t * 0.71).rem_euclid(13.0) - 0.5, (t * 0.13).sin() * 3.0);
            let (a, da) = mesh.closest_point(&q).unwrap();
            let (b, db) = mesh.closest_point_brute_force(&q).unwrap();
            assert!((da - db).abs() < 1e-12);
            assert_eq!(a.face, b.face);
        }
    }
}
