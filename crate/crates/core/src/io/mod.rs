//! Mesh and landmark file formats.
//!
//! Meshes are read from OBJ or PLY by extension. Landmarks live in a JSON
//! sidecar `{"label": vertex_index}`; by convention `head.obj` pairs with
//! `head.landmarks.json`.

mod obj;
mod ply;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub use obj::{format_obj, parse_obj, read_obj, write_obj};
pub use ply::{format_ply, parse_ply, read_ply, write_ply, PlyFormat};

use crate::{Error, Result, Topology, TriMesh};

pub fn read_landmarks(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_landmarks(path: &Path, landmarks: &BTreeMap<String, usize>) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(landmarks)?)?;
    Ok(())
}

/// `dir/name.ext` → `dir/name.landmarks.json`.
pub fn landmark_sidecar(mesh_path: &Path) -> PathBuf {
    mesh_path.with_extension("landmarks.json")
}

/// Reads an OBJ or PLY mesh. Landmarks come from `landmarks` if given,
/// otherwise from the sidecar next to the mesh when it exists.
pub fn read_mesh(path: &Path, landmarks: Option<&Path>) -> Result<TriMesh> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let mesh = match ext.as_str() {
        "obj" => read_obj(path)?,
        "ply" => read_ply(path)?,
        _ => return Err(Error::format(path, "unknown mesh extension (expected .obj or .ply)")),
    };
    let sidecar = landmark_sidecar(path);
    let lm_path = match landmarks {
        Some(p) => Some(p.to_path_buf()),
        None if sidecar.exists() => Some(sidecar),
        None => None,
    };
    match lm_path {
        Some(p) => {
            let lm = read_landmarks(&p)?;
            let topo = Topology::new(mesh.n_vertices(), mesh.faces().to_vec(), lm)
                .map_err(|e| Error::format(&p, e.to_string()))?;
            TriMesh::with_topology(Arc::new(topo), mesh.vertices().to_vec())
        }
        None => Ok(mesh),
    }
}

/// Writes a mesh by extension plus its landmark sidecar (if it has landmarks).
pub fn write_mesh(path: &Path, mesh: &TriMesh) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "obj" => write_obj(path, mesh)?,
        "ply" => write_ply(path, mesh, PlyFormat::BinaryLittleEndian)?,
        _ => return Err(Error::format(path, "unknown mesh extension (expected .obj or .ply)")),
    }
    if !mesh.landmarks().is_empty() {
        write_landmarks(&landmark_sidecar(path), mesh.landmarks())?;
    }
    Ok(())
}
