//! Fusion of overlapping statistical 3D shape models.

pub mod error;
pub mod eval;
pub mod gp;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod mesh;
pub mod model;
pub mod nicp;
pub mod regression;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
pub use mesh::{SimilarityTransform, SurfacePoint, Topology, TriMesh, WeightScheme};
pub use model::{fit_pdm, ShapeModel, ShapeParams};
