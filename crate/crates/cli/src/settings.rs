//! Per-subcommand settings. Values come from the built-in defaults, are
//! overridden by the subcommand's object in `--config`, and then by flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use shapefuse::eval::{NearestSearch, DEFAULT_SPECIFICITY_SAMPLES};
use shapefuse::gp::RefineConfig;
use shapefuse::kernel::BlendConfig;
use shapefuse::nicp::NicpConfig;
use shapefuse::regression::{FusionConfig, DEFAULT_RETRIES};
use shapefuse::store;
use shapefuse::synth::WorldConfig;

use crate::CliError;

/// Loads the `section` object of a config file over the defaults.
pub fn load<T: DeserializeOwned + Default>(file: Option<&Path>, section: &str) -> Result<T, CliError> {
    let Some(path) = file else { return Ok(T::default()) };
    let value: serde_json::Value = store::read_json(path)?;
    if !value.is_object() {
        return Err(CliError::usage(format!("{}: config must be a JSON object", path.display())));
    }
    match value.get(section) {
        None => Ok(T::default()),
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| CliError::usage(format!("{}: section `{section}`: {e}", path.display()))),
    }
}

/// Replaces `slot` with the flag value when one was given.
pub fn flag<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub seed: u64,
    pub n_heads: usize,
    pub n_faces: usize,
    pub world: WorldConfig,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self { seed: 0, n_heads: 100, n_faces: 100, world: WorldConfig::default() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildPdmSettings {
    /// `None` keeps every non-degenerate component (at most samples − 1).
    pub components: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisterSettings {
    pub nicp: NicpConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CropMode {
    /// Register the face mean onto each synthesized head.
    Nicp,
    /// Take the face-mask vertices of each head (face topology must be a
    /// vertex subset of the head topology).
    Mask,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombineRegSettings {
    pub seed: u64,
    /// `None` uses 10 × face-model components.
    pub n_pairs: Option<usize>,
    pub ridge: f64,
    pub retries: usize,
    /// `None` keeps every component the corpus supports.
    pub components: Option<usize>,
    pub crop: CropMode,
    pub crop_nicp: NicpConfig,
    pub fusion: FusionConfig,
}

impl Default for CombineRegSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            n_pairs: None,
            ridge: 0.0,
            retries: DEFAULT_RETRIES,
            components: None,
            crop: CropMode::Nicp,
            crop_nicp: NicpConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombineGpSettings {
    /// `None` uses 1% of the template bounding-box diagonal.
    pub face_cap: Option<f64>,
    pub blend: BlendConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSettings {
    pub truncation: Option<usize>,
    pub components: Option<usize>,
    pub refine: RefineConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSettings {
    pub n: usize,
    pub seed: u64,
    pub clamp_3sigma: bool,
}

impl Default for SampleSettings {
    fn default() -> Self {
        Self { n: 10, seed: 0, clamp_3sigma: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSettings {
    pub grid: Option<Vec<usize>>,
    pub max_components: Option<usize>,
    pub samples: usize,
    pub seed: u64,
    pub search: NearestSearch,
    pub threshold: f64,
    pub eye_left: String,
    pub eye_right: String,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        Self {
            grid: None,
            max_components: None,
            samples: DEFAULT_SPECIFICITY_SAMPLES,
            seed: 0,
            search: NearestSearch::BruteForce,
            threshold: 0.05,
            eye_left: "eye_left".into(),
            eye_right: "eye_right".into(),
        }
    }
}
