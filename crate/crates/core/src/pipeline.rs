//! End-to-end mapping: Z-buffer visibility per view, local geometry for the
//! points that are seen, viewing conditions per entry, then the CSR store.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::camera::CameraView;
use crate::geometry::{
    build_knn_for, eigen_features, viewing_conditions, GeometryError, LocalGeometry,
    NeighborIndex, DEFAULT_KNN,
};
use crate::mapping::{ImageEntries, MappingError, MultiViewMapping, PointEntry};
use crate::scene_io::PointCloud;
use crate::visibility::{map_view, SplatParams, VisiblePoint};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingParams {
    pub splat: SplatParams,
    pub knn_k: usize,
}

impl MappingParams {
    pub fn new(splat: SplatParams) -> Self {
        Self {
            splat,
            knn_k: DEFAULT_KNN,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StageTimings {
    pub visibility: Duration,
    pub geometry: Duration,
    pub conditions: Duration,
    pub csr: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.visibility + self.geometry + self.conditions + self.csr
    }
}

/// Visible points of every view, in view order.
pub fn visibility_per_view(
    cloud: &PointCloud,
    views: &[CameraView],
    splat: &SplatParams,
) -> Vec<Vec<VisiblePoint>> {
    views
        .par_iter()
        .map(|view| map_view(cloud, view, splat))
        .collect()
}

/// Neighborhoods and eigen-features for the points flagged in `needed`.
pub fn local_geometry(
    cloud: &PointCloud,
    knn_k: usize,
    needed: &[bool],
) -> Result<(NeighborIndex, Vec<LocalGeometry>), GeometryError> {
    let queries: Vec<u32> = (0..cloud.len() as u32)
        .filter(|&p| needed[p as usize])
        .collect();
    let nbrs = if cloud.len() < 2 {
        NeighborIndex::empty(cloud.len())
    } else {
        build_knn_for(cloud, knn_k, &queries)?
    };
    let zero = LocalGeometry {
        linearity: 0.0,
        planarity: 0.0,
        scattering: 0.0,
        normal: [0.0, 0.0, 1.0],
        r_k: 0.0,
    };
    let geom: Vec<LocalGeometry> = (0..cloud.len() as u32)
        .into_par_iter()
        .map(|p| {
            if needed[p as usize] {
                eigen_features(cloud, &nbrs, p)
            } else {
                zero
            }
        })
        .collect();
    Ok((nbrs, geom))
}

/// Attaches viewing conditions to the visible points of one view.
pub fn view_entries(
    cloud: &PointCloud,
    view: &CameraView,
    visible: &[VisiblePoint],
    nbrs: &NeighborIndex,
    geom: &[LocalGeometry],
    r_max: f64,
) -> ImageEntries {
    let mut seen = vec![false; cloud.len()];
    for e in visible {
        seen[e.point_id as usize] = true;
    }
    let entries = visible
        .iter()
        .map(|e| PointEntry {
            point_id: e.point_id,
            u: e.u,
            v: e.v,
            depth: e.depth,
            conditions: viewing_conditions(
                cloud,
                e.point_id,
                e.v,
                e.depth as f64,
                view,
                &geom[e.point_id as usize],
                nbrs,
                &seen,
                r_max,
            )
            .0,
        })
        .collect();
    ImageEntries {
        image_id: view.image_id,
        entries,
    }
}

/// Full mapping of `cloud` into `views`.
pub fn compute_mapping(
    cloud: &PointCloud,
    views: &[CameraView],
    params: &MappingParams,
) -> Result<(MultiViewMapping, StageTimings), PipelineError> {
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let visible = visibility_per_view(cloud, views, &params.splat);
    timings.visibility = t.elapsed();

    let t = Instant::now();
    let mut needed = vec![false; cloud.len()];
    for e in visible.iter().flatten() {
        needed[e.point_id as usize] = true;
    }
    let (nbrs, geom) = local_geometry(cloud, params.knn_k, &needed)?;
    timings.geometry = t.elapsed();

    let t = Instant::now();
    let images: Vec<ImageEntries> = views
        .par_iter()
        .zip(visible.par_iter())
        .map(|(view, vis)| view_entries(cloud, view, vis, &nbrs, &geom, params.splat.r_max))
        .collect();
    timings.conditions = t.elapsed();

    let t = Instant::now();
    let mapping = MultiViewMapping::build(cloud.len(), &images)?;
    timings.csr = t.elapsed();
    Ok((mapping, timings))
}
