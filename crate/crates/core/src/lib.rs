//! Structure-wise uncertainty for curvilinear segmentation.
//!
//! A likelihood map is decomposed into saddle→maximum ridge structures,
//! each structure is resampled by a perturb-and-walk sampler, a graph
//! regressor predicts a probability and log-variance per structure, and the
//! aggregated estimates drive thresholding, an uncertainty heatmap and a
//! proofreading loop.
//!
//! Numeric kernels are generic over [`Real`]; the aliases below fix the
//! scalar used by the command line pipeline.

pub mod grids;
pub mod inferpost;
pub mod metrics;
pub mod morse;
pub mod probdmt;
pub mod proofread;
pub mod regressor;
pub mod rng;
pub mod scalar;
pub mod structgraph;
pub mod synth;

pub use grids::{BinaryGrid, Coord, Grid, GridError, Shape};
pub use scalar::Real;

/// Scalar fields as used by the pipeline.
pub type ScalarGrid = Grid<f64>;
pub type ScalarGrid32 = Grid<f32>;
pub type Skeleton = morse::MorseSkeleton<f64>;
