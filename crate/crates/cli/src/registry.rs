//! On-disk model registry: one directory per artifact plus a `registry.json`
//! index holding each entry's kind, files and content hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shapefuse::io::{read_mesh, write_mesh};
use shapefuse::kernel::UniversalCovariance;
use shapefuse::regression::RegressionMap;
use shapefuse::store::{self, FORMAT_VERSION, MANIFEST};
use shapefuse::{ShapeModel, TriMesh};

use crate::CliError;

pub const INDEX: &str = "registry.json";
pub const REPORTS: &str = "reports";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactKind {
    Pdm,
    Covariance,
    RegressionMap,
    /// Meshes plus landmark sidecars; not a model, but registered so that
    /// inputs of every step are hashed the same way.
    MeshSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub kind: ArtifactKind,
    /// Manifest path, relative to the registry root.
    pub manifest: String,
    /// Remaining files, relative to the entry directory.
    pub blobs: Vec<String>,
    /// SHA-256 over the manifest and blobs, names included.
    pub hash: String,
}

impl Entry {
    fn files(&self) -> Vec<String> {
        let mut v = vec![MANIFEST.to_string()];
        v.extend(self.blobs.iter().cloned());
        v
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    format_version: u32,
    entries: BTreeMap<String, Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MeshSetManifest {
    format_version: u32,
    kind: String,
    meshes: Vec<String>,
    /// Optional cohort label per mesh.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    cohorts: Vec<String>,
    /// Extra JSON files shipped with the set.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    attachments: Vec<String>,
}

/// A loaded mesh set.
#[derive(Debug, Clone)]
pub struct MeshSet {
    pub names: Vec<String>,
    pub meshes: Vec<TriMesh>,
    pub cohorts: Vec<String>,
}

pub struct Registry {
    root: PathBuf,
    entries: BTreeMap<String, Entry>,
}

fn check_id(id: &str) -> Result<(), CliError> {
    let ok = !id.is_empty()
        && id != REPORTS
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(CliError::usage(format!("invalid artifact id `{id}` (use letters, digits, `-`, `_`, `.`)")))
    }
}

impl Registry {
    /// Opens the registry at `root`, creating an empty one if absent.
    pub fn open(root: &Path) -> Result<Self, CliError> {
        let index = root.join(INDEX);
        if !index.exists() {
            std::fs::create_dir_all(root)?;
            let r = Self { root: root.to_path_buf(), entries: BTreeMap::new() };
            r.save()?;
            return Ok(r);
        }
        let idx: Index = store::read_json(&index)?;
        store::check_version(&index, idx.format_version)?;
        Ok(Self { root: root.to_path_buf(), entries: idx.entries })
    }

    fn save(&self) -> Result<(), CliError> {
        let idx = Index { format_version: FORMAT_VERSION, entries: self.entries.clone() };
        store::write_json(&self.root.join(INDEX), &idx)?;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry(&self, id: &str) -> Result<&Entry, CliError> {
        self.entries.get(id).ok_or_else(|| CliError::usage(format!("no registry entry `{id}` in {}", self.root.display())))
    }

    pub fn entries(&self) -> &BTreeMap<String, Entry> {
        &self.entries
    }

    pub fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    /// Fresh, empty directory for a new artifact (any previous content removed).
    pub fn prepare(&self, id: &str) -> Result<PathBuf, CliError> {
        check_id(id)?;
        let dir = self.dir(id);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    /// Hashes the written files of `id` and records the entry.
    pub fn commit(&mut self, id: &str, kind: ArtifactKind, blobs: Vec<String>) -> Result<String, CliError> {
        check_id(id)?;
        let mut files = vec![MANIFEST.to_string()];
        files.extend(blobs.iter().cloned());
        let hash = store::hash_files(&self.dir(id), &files)?;
        let manifest = format!("{id}/{MANIFEST}");
        self.entries.insert(id.to_string(), Entry { kind, manifest, blobs, hash: hash.clone() });
        self.save()?;
        Ok(hash)
    }

    /// Recomputes the hash of `id` and checks kind and integrity.
    pub fn verify(&self, id: &str, kind: ArtifactKind) -> Result<&Entry, CliError> {
        let e = self.entry(id)?;
        if e.kind != kind {
            return Err(CliError::usage(format!("entry `{id}` is a {:?}, expected {kind:?}", e.kind)));
        }
        let actual = store::hash_files(&self.dir(id), &e.files())?;
        if actual != e.hash {
            return Err(shapefuse::Error::Integrity(format!("registry entry `{id}` (hash {actual} != {})", e.hash)).into());
        }
        Ok(e)
    }

    pub fn save_pdm(&mut self, id: &str, model: &ShapeModel) -> Result<String, CliError> {
        let dir = self.prepare(id)?;
        model.save(&dir)?;
        self.commit(id, ArtifactKind::Pdm, ShapeModel::artifact_files()[1..].to_vec())
    }

    pub fn load_pdm(&self, id: &str) -> Result<ShapeModel, CliError> {
        self.verify(id, ArtifactKind::Pdm)?;
        Ok(ShapeModel::load(&self.dir(id))?)
    }

    pub fn save_covariance(&mut self, id: &str, cov: &UniversalCovariance) -> Result<String, CliError> {
        let dir = self.prepare(id)?;
        cov.save(&dir)?;
        self.commit(id, ArtifactKind::Covariance, UniversalCovariance::artifact_files()[1..].to_vec())
    }

    pub fn load_covariance(&self, id: &str) -> Result<UniversalCovariance, CliError> {
        self.verify(id, ArtifactKind::Covariance)?;
        Ok(UniversalCovariance::load(&self.dir(id))?)
    }

    pub fn save_map(&mut self, id: &str, map: &RegressionMap) -> Result<String, CliError> {
        let dir = self.prepare(id)?;
        map.save(&dir)?;
        self.commit(id, ArtifactKind::RegressionMap, RegressionMap::artifact_files()[1..].to_vec())
    }

    pub fn load_map(&self, id: &str) -> Result<RegressionMap, CliError> {
        self.verify(id, ArtifactKind::RegressionMap)?;
        Ok(RegressionMap::load(&self.dir(id))?)
    }

    /// Writes meshes as `NNNN.obj` (plus landmark sidecars) and optional
    /// JSON attachments.
    pub fn save_mesh_set(
        &mut self,
        id: &str,
        meshes: &[TriMesh],
        cohorts: &[String],
        attachments: &[(&str, serde_json::Value)],
    ) -> Result<String, CliError> {
        if !cohorts.is_empty() && cohorts.len() != meshes.len() {
            return Err(CliError::usage("cohort labels must match the mesh count"));
        }
        let dir = self.prepare(id)?;
        let mut blobs = Vec::new();
        let mut names = Vec::with_capacity(meshes.len());
        for (k, m) in meshes.iter().enumerate() {
            let name = format!("{k:04}.obj");
            let path = dir.join(&name);
            write_mesh(&path, m)?;
            blobs.push(name.clone());
            if !m.landmarks().is_empty() {
                blobs.push(shapefuse::io::landmark_sidecar(Path::new(&name)).to_string_lossy().into_owned());
            }
            names.push(name);
        }
        for (name, value) in attachments {
            store::write_json(&dir.join(name), value)?;
            blobs.push(name.to_string());
        }
        let manifest = MeshSetManifest {
            format_version: FORMAT_VERSION,
            kind: "mesh-set".into(),
            meshes: names,
            cohorts: cohorts.to_vec(),
            attachments: attachments.iter().map(|(n, _)| n.to_string()).collect(),
        };
        store::write_json(&dir.join(MANIFEST), &manifest)?;
        self.commit(id, ArtifactKind::MeshSet, blobs)
    }

    pub fn load_mesh_set(&self, id: &str) -> Result<MeshSet, CliError> {
        self.verify(id, ArtifactKind::MeshSet)?;
        let dir = self.dir(id);
        let m: MeshSetManifest = store::read_json(&dir.join(MANIFEST))?;
        store::check_version(&dir.join(MANIFEST), m.format_version)?;
        let meshes = m.meshes.iter().map(|n| read_mesh(&dir.join(n), None)).collect::<shapefuse::Result<Vec<_>>>()?;
        Ok(MeshSet { names: m.meshes, meshes, cohorts: m.cohorts })
    }

    pub fn load_attachment(&self, id: &str, name: &str) -> Result<serde_json::Value, CliError> {
        let e = self.verify(id, ArtifactKind::MeshSet)?;
        if !e.blobs.iter().any(|b| b == name) {
            return Err(CliError::usage(format!("entry `{id}` has no attachment `{name}`")));
        }
        Ok(store::read_json(&self.dir(id).join(name))?)
    }
}

/// Meshes of a registry mesh set, or of a plain directory of OBJ/PLY files
/// (sorted by name) when `source` is not a registry id.
pub fn load_meshes(reg: &Registry, source: &str) -> Result<MeshSet, CliError> {
    if reg.entries.contains_key(source) {
        return reg.load_mesh_set(source);
    }
    let dir = Path::new(source);
    if !dir.is_dir() {
        return Err(CliError::usage(format!("`{source}` is neither a registry entry nor a directory")));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.to_string_lossy();
            (name.ends_with(".obj") || name.ends_with(".ply")) && !name.ends_with(".landmarks.json")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::usage(format!("no .obj or .ply meshes in {}", dir.display())));
    }
    let meshes = paths.iter().map(|p| read_mesh(p, None)).collect::<shapefuse::Result<Vec<_>>>()?;
    let names = paths.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect();
    Ok(MeshSet { names, meshes, cohorts: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use shapefuse::synth::{SyntheticWorld, WorldConfig};

    fn world() -> SyntheticWorld {
        let c = WorldConfig { n_vertices: 120, n_face_vertices: 40, n_landmarks: 12, ..Default::default() };
        SyntheticWorld::generate(&c, 1).unwrap()
    }

    #[test]
    fn entries_round_trip_and_verify() {
        let tmp = tempfile::tempdir().unwrap();
        let w = world();
        let mut reg = Registry::open(tmp.path()).unwrap();
        let h1 = reg.save_pdm("head", &w.head_model).unwrap();
        let pop = w.sample_population(3, 2);
        reg.save_mesh_set("scans", &pop.heads, &[], &[("extra.json", serde_json::json!({"a": 1}))]).unwrap();

        let reg = Registry::open(tmp.path()).unwrap();
        assert_eq!(reg.entry("head").unwrap().hash, h1);
        let back = reg.load_pdm("head").unwrap();
        assert_eq!(back.mean(), w.head_model.mean());
        assert_eq!(back.basis(), w.head_model.basis());
        assert_eq!(back.eigenvalues(), w.head_model.eigenvalues());
        let set = reg.load_mesh_set("scans").unwrap();
        assert_eq!(set.meshes.len(), 3);
        assert_eq!(set.meshes[1].vertices(), pop.heads[1].vertices());
        assert_eq!(set.meshes[1].landmarks(), pop.heads[1].landmarks());
        assert_eq!(reg.load_attachment("scans", "extra.json").unwrap()["a"], 1);
        assert!(reg.load_covariance("head").is_err());
    }

    #[test]
    fn tampering_is_detected() {
        let tmp = tempfile::tempdir().unwrap();
        let mut reg = Registry::open(tmp.path()).unwrap();
        reg.save_pdm("m", &world().face_model).unwrap();
        let blob = tmp.path().join("m").join("eigenvalues.f64");
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&blob, bytes).unwrap();
        let err = reg.load_pdm("m").unwrap_err();
        assert!(err.to_string().contains("integrity"), "{err}");
    }

    #[test]
    fn ids_are_validated() {
        let tmp = tempfile::tempdir().unwrap();
        let mut reg = Registry::open(tmp.path()).unwrap();
        for bad in ["", "../x", "a/b", "reports", ".hidden"] {
            assert!(reg.save_pdm(bad, &world().face_model).is_err(), "{bad}");
        }
    }
}
