//! Multi-view 3D/2D fusion engine.
//!
//! The crate is organised along the data flow:
//!
//! * [`scene_io`]: point clouds (PLY), pose manifests, rasters, PFM depth maps and
//!   engine configuration.
//! * [`camera`]: pinhole and equirectangular projection, frustum tests, viewports.
//! * [`visibility`]: splat-based Z-buffering, a ray-casting oracle and depth-map
//!   based mapping.
//! * [`geometry`]: exact k-NN, covariance eigen-features and the eight per-view
//!   viewing-condition descriptors.
//! * [`mapping`]: the CSR point-to-view store and its binary format.
//! * [`pipeline`]: end-to-end mapping computation over many views.
//! * [`aggregation`]: the attention/gating aggregation head with an analytic
//!   backward pass and gradient checking.
//! * [`fusion`]: early/late fusion and a small trainable stack on synthetic scenes.
//! * [`batch`]: dynamic-size image batching under a pixel budget.
//! * [`synth`]: seeded synthetic scene generators.

pub mod aggregation;
pub mod batch;
pub mod camera;
pub mod fusion;
pub mod geometry;
pub mod mapping;
pub mod pipeline;
pub mod scene_io;
pub mod synth;
pub mod visibility;

pub use camera::{CameraModel, CameraView, Pose, Projection, Viewport};
pub use mapping::{MappingEntry, MultiViewMapping};
pub use scene_io::{ImageRaster, PointCloud};
