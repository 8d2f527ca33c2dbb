//! File formats and scene containers.

mod cloud;
mod config;
mod manifest;
mod pfm;
mod ply;
mod raster;

pub use cloud::{CloudError, PointCloud, UNLABELED};
pub use config::{ConfigError, EngineConfig, DEFAULT_CROPS};
pub use manifest::{read_pose_manifest, write_pose_manifest, ManifestError, PoseEntry, PoseManifest};
pub use pfm::{decode_pfm, encode_pfm, read_depth_map, write_depth_map, PfmError};
pub use ply::{read_point_cloud, write_point_cloud, PlyEncoding, PlyError, DEFAULT_RESOLUTION};
pub use raster::{load_image, save_png, ImageRaster, RasterError};
