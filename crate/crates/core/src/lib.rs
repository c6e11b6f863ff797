//! Urban functional zone discovery from GPS trajectories and POIs.
//!
//! The city is tiled into geohash cells. Trips between cells become a sparse
//! human-activity-pattern matrix, POIs become a category-by-cell count matrix,
//! and both are factorized jointly so that cells without POIs still receive a
//! latent POI representation. Cells are then grouped into zones with a
//! Gaussian CRF over the 8-neighbor grid and each zone is described by the POI
//! categories that distinguish it.

pub mod activity;
pub mod annotate;
pub mod cluster;
pub mod config;
pub mod error;
pub mod fusion;
pub mod geo;
pub mod geojson;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod poi;
pub mod sparse;
pub mod synth;

pub use error::{Error, Result};
