//! Incremental 3D convex hull, used to triangulate points on a sphere.

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

use crate::{Error, Result};

fn normal(p: &[Point3<f64>], f: [usize; 3]) -> Vector3<f64> {
    (p[f[1]] - p[f[0]]).cross(&(p[f[2]] - p[f[0]]))
}

fn visible(p: &[Point3<f64>], f: [usize; 3], q: usize, eps: f64) -> bool {
    normal(p, f).dot(&(p[q] - p[f[0]])) > eps
}

/// Outward-oriented triangles of the convex hull of `points`. Every input
/// point must be a hull vertex (true for distinct points on a sphere).
pub fn convex_hull(points: &[Point3<f64>]) -> Result<Vec<[usize; 3]>> {
    let n = points.len();
    if n < 4 {
        return Err(Error::DegenerateData("hull needs at least 4 points".into()));
    }
    let scale = points.iter().map(|q| q.coords.norm()).fold(0.0, f64::max).max(1e-300);
    let eps = 1e-12 * scale * scale * scale;

    // Initial tetrahedron: 0, farthest from 0, farthest from that line, farthest from that plane.
    let a = 0;
    let b = (1..n)
        .max_by(|&i, &j| (points[i] - points[a]).norm().total_cmp(&(points[j] - points[a]).norm()))
        .unwrap();
    let ab = points[b] - points[a];
    let c = (0..n)
        .filter(|&i| i != a && i != b)
        .max_by(|&i, &j| {
            ab.cross(&(points[i] - points[a])).norm().total_cmp(&ab.cross(&(points[j] - points[a])).norm())
        })
        .unwrap();
    let nrm = ab.cross(&(points[c] - points[a]));
    let d = (0..n)
        .filter(|&i| i != a && i != b && i != c)
        .max_by(|&i, &j| nrm.dot(&(points[i] - points[a])).abs().total_cmp(&nrm.dot(&(points[j] - points[a])).abs()))
        .unwrap();
    if nrm.dot(&(points[d] - points[a])).abs() <= eps {
        return Err(Error::DegenerateData("points are coplanar".into()));
    }

    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut alive: Vec<bool> = Vec::new();
    let mut edge_face: HashMap<(usize, usize), usize> = HashMap::new();
    let add = |f: [usize; 3], faces: &mut Vec<[usize; 3]>, alive: &mut Vec<bool>, map: &mut HashMap<(usize, usize), usize>| {
        let id = faces.len();
        faces.push(f);
        alive.push(true);
        for k in 0..3 {
            map.insert((f[k], f[(k + 1) % 3]), id);
        }
    };
    let mut tet = [[a, b, c], [a, d, b], [b, d, c], [c, d, a]];
    if visible(points, tet[0], d, 0.0) {
        for f in tet.iter_mut() {
            f.swap(1, 2);
        }
    }
    for f in tet {
        add(f, &mut faces, &mut alive, &mut edge_face);
    }

    let mut used = vec![false; n];
    for i in [a, b, c, d] {
        used[i] = true;
    }
    for q in 0..n {
        if used[q] {
            continue;
        }
        let vis: Vec<usize> = (0..faces.len())
            .filter(|&f| alive[f] && visible(points, faces[f], q, eps))
            .collect();
        if vis.is_empty() {
            return Err(Error::DegenerateData(format!("point {q} lies inside the hull")));
        }
        let mut is_vis = vec![false; faces.len()];
        for &f in &vis {
            is_vis[f] = true;
        }
        let mut horizon = Vec::new();
        for &f in &vis {
            let t = faces[f];
            for k in 0..3 {
                let (u, v) = (t[k], t[(k + 1) % 3]);
                let across = edge_face[&(v, u)];
                if !is_vis[across] {
                    horizon.push((u, v));
                }
            }
        }
        for &f in &vis {
            alive[f] = false;
            let t = faces[f];
            for k in 0..3 {
                let key = (t[k], t[(k + 1) % 3]);
                if edge_face.get(&key) == Some(&f) {
                    edge_face.remove(&key);
                }
            }
        }
        for (u, v) in horizon {
            add([u, v, q], &mut faces, &mut alive, &mut edge_face);
        }
        used[q] = true;
    }
    let out: Vec<[usize; 3]> = faces
        .into_iter()
        .zip(alive)
        .filter(|(_, live)| *live)
        .map(|(f, _)| f)
        .collect();
    let mut on_hull = vec![false; n];
    for f in &out {
        for &i in f {
            on_hull[i] = true;
        }
    }
    if let Some(i) = on_hull.iter().position(|&h| !h) {
        return Err(Error::DegenerateData(format!("point {i} is not a hull vertex")));
    }
    Ok(out)
}
