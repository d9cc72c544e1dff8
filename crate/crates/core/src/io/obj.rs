//! Wavefront OBJ: `v` and `f` records only.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point3;

use crate::{Error, Result, TriMesh};

/// Parses OBJ text. Polygons are fan-triangulated; `v/vt/vn` index forms
/// and negative (relative) indices are accepted.
pub fn parse_obj(text: &str, path: &Path) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let xyz: Vec<f64> = tok
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
                if xyz.len() != 3 {
                    return Err(Error::format(path, format!("line {}: vertex needs 3 coordinates", lineno + 1)));
                }
                vertices.push(Point3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for t in tok {
                    let first = t.split('/').next().unwrap_or("");
                    let raw: i64 = first
                        .parse()
                        .map_err(|e| Error::format(path, format!("line {}: bad index `{t}`: {e}", lineno + 1)))?;
                    let n = vertices.len() as i64;
                    let i = if raw > 0 { raw - 1 } else { n + raw };
                    if raw == 0 || i < 0 {
                        return Err(Error::format(path, format!("line {}: index {raw} out of range", lineno + 1)));
                    }
                    idx.push(i as usize);
                }
                if idx.len() < 3 {
                    return Err(Error::format(path, format!("line {}: face with fewer than 3 vertices", lineno + 1)));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, faces, BTreeMap::new())
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_obj(path: &Path) -> Result<TriMesh> {
    let text = std::fs::read_to_string(path)?;
    parse_obj(&text, path)
}

/// OBJ text with shortest round-trip float formatting, so a write/read
/// cycle is bit-exact.
pub fn format_obj(mesh: &TriMesh) -> String {
    let mut out = String::new();
    for p in mesh.vertices() {
        let _ = writeln!(out, "v {:?} {:?} {:?}", p.x, p.y, p.z);
    }
    for f in mesh.faces() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    std::fs::write(path, format_obj(mesh))?;
    Ok(())
}
