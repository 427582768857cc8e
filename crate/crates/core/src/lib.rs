//! Estimation of an orthogonal map between two sets of spherical embeddings
//! whose row correspondence is partly broken.

pub mod embedding_ingest;
pub mod error;
pub mod io;
pub mod linalg;
pub mod mapping_recovery;
pub mod pipeline;
pub mod rng;
pub mod sim_bench;
pub mod spherical_regression;
pub mod vmf;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
pub use spherical_regression::{OrthogonalMatrix, SphericalMatrix};
