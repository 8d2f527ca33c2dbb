//! Occlusion-aware point-pixel mapping.
//!
//! Each point inside a view's frustum is replaced by a camera-facing square
//! whose metric side grows for points close to the camera. Squares are
//! rasterized into a Z-buffer that keeps, per pixel, the nearest point distance
//! and the id of that point. A point is visible when its id survives anywhere
//! in the index map; its recorded pixel is its own projection.

use std::ops::Range;

use nalgebra::Vector3;
use thiserror::Error;

use crate::camera::{CameraModel, CameraView, Projection};
use crate::scene_io::{ImageRaster, PointCloud};

/// Index-map sentinel for pixels covered by no splat.
pub const NO_POINT: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VisibilityError {
    #[error("z-buffer is {buffer:?} but the view is {view:?}")]
    StaleBuffer {
        buffer: (u32, u32),
        view: (u32, u32),
    },
    #[error("depth map is {map:?} but the view is {view:?}")]
    DimensionMismatch { map: (u32, u32), view: (u32, u32) },
    #[error("invalid splat parameters: {0}")]
    BadParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatParams {
    /// Cloud resolution `c` in meters.
    pub resolution: f64,
    /// Swell factor `k`: how much nearby splats are enlarged.
    pub swell: f64,
    /// Maximum mapping distance in meters.
    pub r_max: f64,
}

impl SplatParams {
    pub const INDOOR_R_MAX: f64 = 8.0;
    pub const OUTDOOR_R_MAX: f64 = 20.0;

    pub fn new(resolution: f64, swell: f64, r_max: f64) -> Result<Self, VisibilityError> {
        let p = Self {
            resolution,
            swell,
            r_max,
        };
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(VisibilityError::BadParams(format!("c = {resolution}")));
        }
        if !(swell >= 0.0 && swell.is_finite()) {
            return Err(VisibilityError::BadParams(format!("k = {swell}")));
        }
        if !(r_max > 0.0) {
            return Err(VisibilityError::BadParams(format!("R_max = {r_max}")));
        }
        Ok(p)
    }

    pub fn indoor(resolution: f64) -> Self {
        Self::new(resolution, 1.0, Self::INDOOR_R_MAX).expect("valid")
    }
}

/// Metric side of the square standing in for a point at distance `dist`:
/// `c * (1 + k * exp(-dist / R_max))`.
pub fn splat_size(dist: f64, params: &SplatParams) -> f64 {
    params.resolution * (1.0 + params.swell * (-dist / params.r_max).exp())
}

/// Side in pixels of the splat of a point at distance `dist`.
pub fn splat_side_pixels(dist: f64, model: &CameraModel, params: &SplatParams) -> u32 {
    let side = (splat_size(dist, params) * model.pixel_scale() / dist).round();
    let (w, h) = model.size();
    let cap = 2.0 * w.max(h) as f64 + 1.0;
    if side.is_nan() || side < 1.0 {
        1
    } else {
        side.min(cap) as u32
    }
}

/// Axis-aligned pixel block, clipped to the raster. Equirectangular blocks wrap
/// around the seam and may therefore span two column ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplatMask {
    pub rows: Range<u32>,
    pub cols: [Range<u32>; 2],
}

impl SplatMask {
    pub fn len(&self) -> usize {
        self.rows.len() * (self.cols[0].len() + self.cols[1].len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, u: u32, v: u32) -> bool {
        self.rows.contains(&v) && (self.cols[0].contains(&u) || self.cols[1].contains(&u))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.rows.clone().flat_map(move |v| {
            self.cols[0]
                .clone()
                .chain(self.cols[1].clone())
                .map(move |u| (u, v))
        })
    }
}

fn clipped(center: u32, side: u32, limit: u32) -> Range<u32> {
    let lo = center as i64 - (side as i64 - 1) / 2;
    let hi = lo + side as i64;
    (lo.max(0) as u32)..(hi.min(limit as i64) as u32)
}

fn mask_for(pixel: (u32, u32), depth: f64, view: &CameraView, params: &SplatParams) -> SplatMask {
    let (w, h) = view.size();
    let side = splat_side_pixels(depth, &view.model, params);
    let rows = clipped(pixel.1, side, h);
    let cols = if view.model.is_equirectangular() {
        if side >= w {
            [0..w, 0..0]
        } else {
            let lo = pixel.0 as i64 - (side as i64 - 1) / 2;
            let hi = lo + side as i64;
            if lo < 0 {
                [0..hi as u32, (lo + w as i64) as u32..w]
            } else if hi > w as i64 {
                [lo as u32..w, 0..(hi - w as i64) as u32]
            } else {
                [lo as u32..hi as u32, 0..0]
            }
        }
    } else {
        [clipped(pixel.0, side, w), 0..0]
    };
    SplatMask { rows, cols }
}

/// Pixel block covered by the splat of `point`, or `None` outside the frustum.
pub fn splat_mask(point: &[f64; 3], view: &CameraView, params: &SplatParams) -> Option<SplatMask> {
    let (proj, px) = view.frustum_projection(point, params.r_max)?;
    Some(mask_for(px, proj.depth, view, params))
}

/// Depth raster (`+inf` where empty) paired with the winning point ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ZBuffer {
    width: u32,
    height: u32,
    depth: Vec<f32>,
    index: Vec<u32>,
}

impl ZBuffer {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            depth: vec![f32::INFINITY; n],
            index: vec![NO_POINT; n],
        }
    }

    pub fn size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn depth(&self) -> &[f32] {
        &self.depth
    }

    pub fn index(&self) -> &[u32] {
        &self.index
    }

    pub fn at(&self, u: u32, v: u32) -> (f32, u32) {
        let i = v as usize * self.width as usize + u as usize;
        (self.depth[i], self.index[i])
    }

    /// Keeps `(depth, id)` if it is nearer, ties going to the smaller id.
    #[inline]
    fn offer(&mut self, i: usize, depth: f32, id: u32) {
        let cur = self.depth[i];
        if depth < cur || (depth == cur && id < self.index[i]) {
            self.depth[i] = depth;
            self.index[i] = id;
        }
    }

    pub fn depth_raster(&self) -> ImageRaster {
        ImageRaster::new(self.width, self.height, 1, self.depth.clone()).expect("shape")
    }

    /// Index map as floats for inspection; empty pixels become `-1`.
    pub fn index_raster(&self) -> ImageRaster {
        let data = self
            .index
            .iter()
            .map(|&i| if i == NO_POINT { -1.0 } else { i as f32 })
            .collect();
        ImageRaster::new(self.width, self.height, 1, data).expect("shape")
    }
}

/// Accumulates the splats of every in-frustum point of `cloud` into a Z-buffer.
pub fn build_zbuffer(cloud: &PointCloud, view: &CameraView, params: &SplatParams) -> ZBuffer {
    let (w, h) = view.size();
    let mut zb = ZBuffer::new(w, h);
    for (id, p) in cloud.positions.iter().enumerate() {
        let Some((proj, px)) = view.frustum_projection(p, params.r_max) else {
            continue;
        };
        let mask = mask_for(px, proj.depth, view, params);
        let d = proj.depth as f32;
        for v in mask.rows.clone() {
            let row = v as usize * w as usize;
            for cols in &mask.cols {
                for u in cols.clone() {
                    zb.offer(row + u as usize, d, id as u32);
                }
            }
        }
    }
    zb
}

/// One visible point of one image: its own projection pixel and distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisiblePoint {
    pub point_id: u32,
    pub u: u32,
    pub v: u32,
    pub depth: f32,
}

fn visible_entry(id: u32, proj: &Projection, px: (u32, u32)) -> VisiblePoint {
    VisiblePoint {
        point_id: id,
        u: px.0,
        v: px.1,
        depth: proj.depth as f32,
    }
}

/// Points whose ids appear in the index map, sorted by id.
pub fn extract_mapping(
    zb: &ZBuffer,
    cloud: &PointCloud,
    view: &CameraView,
    params: &SplatParams,
) -> Result<Vec<VisiblePoint>, VisibilityError> {
    if zb.size() != view.size() {
        return Err(VisibilityError::StaleBuffer {
            buffer: zb.size(),
            view: view.size(),
        });
    }
    let mut seen = vec![false; cloud.len()];
    for &id in &zb.index {
        if id != NO_POINT {
            if let Some(s) = seen.get_mut(id as usize) {
                *s = true;
            }
        }
    }
    Ok(seen
        .iter()
        .enumerate()
        .filter(|(_, s)| **s)
        .filter_map(|(id, _)| {
            let (proj, px) = view.frustum_projection(&cloud.positions[id], params.r_max)?;
            Some(visible_entry(id as u32, &proj, px))
        })
        .collect())
}

/// Z-buffer then extraction.
pub fn map_view(cloud: &PointCloud, view: &CameraView, params: &SplatParams) -> Vec<VisiblePoint> {
    let zb = build_zbuffer(cloud, view, params);
    extract_mapping(&zb, cloud, view, params).expect("buffer built for this view")
}

/// Whether a sphere of radius `r` at offset `oq` from the ray origin blocks the
/// unit ray `dir` before parameter `limit`.
#[inline]
pub(crate) fn sphere_blocks(oq: &Vector3<f64>, dir: &Vector3<f64>, r: f64, limit: f64) -> bool {
    let tc = oq.dot(dir);
    let perp2 = oq.norm_squared() - tc * tc;
    let r2 = r * r;
    if perp2 > r2 {
        return false;
    }
    let half = (r2 - perp2).max(0.0).sqrt();
    if tc + half < 0.0 {
        return false;
    }
    (tc - half).max(0.0) < limit
}

/// Uniform grid of sphere ids; each sphere is listed in every cell its bounding
/// box touches.
struct SphereGrid {
    min: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl SphereGrid {
    fn build(points: &[[f64; 3]], radius: f64) -> Self {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            let p = Vector3::from(*p);
            min = min.inf(&p);
            max = max.sup(&p);
        }
        if points.is_empty() {
            min = Vector3::zeros();
            max = Vector3::zeros();
        }
        min -= Vector3::repeat(radius);
        max += Vector3::repeat(radius);
        let extent = max - min;
        let budget = (8 * points.len()).max(64) as f64;
        let mut cell = (2.0 * radius).max(1e-9);
        let cells = |c: f64| {
            extent
                .iter()
                .map(|e| (e / c).floor() + 1.0)
                .product::<f64>()
        };
        while cells(cell) > budget {
            cell *= 1.25;
        }
        let dims = [0, 1, 2].map(|a| ((extent[a] / cell).floor() as usize + 1).max(1));
        let n_cells = dims[0] * dims[1] * dims[2];
        let coord = |v: f64, a: usize| -> usize {
            (((v - min[a]) / cell).floor().max(0.0) as usize).min(dims[a] - 1)
        };
        let for_each_cell = |p: &[f64; 3], f: &mut dyn FnMut(usize)| {
            let lo = [0, 1, 2].map(|a| coord(p[a] - radius, a));
            let hi = [0, 1, 2].map(|a| coord(p[a] + radius, a));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        f((z * dims[1] + y) * dims[0] + x);
                    }
                }
            }
        };
        let mut counts = vec![0u32; n_cells + 1];
        for p in points {
            for_each_cell(p, &mut |c| counts[c + 1] += 1);
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut items = vec![0u32; counts[n_cells] as usize];
        for (id, p) in points.iter().enumerate() {
            for_each_cell(p, &mut |c| {
                items[fill[c] as usize] = id as u32;
                fill[c] += 1;
            });
        }
        Self {
            min,
            cell,
            dims,
            starts: counts,
            items,
        }
    }

    fn cell_items(&self, c: [usize; 3]) -> &[u32] {
        let i = (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0];
        &self.items[self.starts[i] as usize..self.starts[i + 1] as usize]
    }

    /// Walks the cells pierced by the ray on `[0, t_end]`, stopping early when
    /// `visit` returns true. Returns whether it stopped early.
    fn walk(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        t_end: f64,
        mut visit: impl FnMut(&[u32]) -> bool,
    ) -> bool {
        let max = self.min + Vector3::new(
            self.dims[0] as f64 * self.cell,
            self.dims[1] as f64 * self.cell,
            self.dims[2] as f64 * self.cell,
        );
        let (mut t0, mut t1) = (0.0f64, t_end);
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < self.min[a] || origin[a] > max[a] {
                    return false;
                }
            } else {
                let ta = (self.min[a] - origin[a]) / dir[a];
                let tb = (max[a] - origin[a]) / dir[a];
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if t0 > t1 {
            return false;
        }
        let start = origin + dir * t0;
        let mut cell = [0usize; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let c = ((start[a] - self.min[a]) / self.cell).floor();
            cell[a] = (c.max(0.0) as usize).min(self.dims[a] - 1);
            if dir[a] > 0.0 {
                step[a] = 1;
                let boundary = self.min[a] + (cell[a] + 1) as f64 * self.cell;
                t_max[a] = (boundary - origin[a]) / dir[a];
                t_delta[a] = self.cell / dir[a];
            } else if dir[a] < 0.0 {
                step[a] = -1;
                let boundary = self.min[a] + cell[a] as f64 * self.cell;
                t_max[a] = (boundary - origin[a]) / dir[a];
                t_delta[a] = -self.cell / dir[a];
            }
        }
        loop {
            if visit(self.cell_items(cell)) {
                return true;
            }
            let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            if t_max[a] > t1 {
                return false;
            }
            let next = cell[a] as i64 + step[a];
            if next < 0 || next >= self.dims[a] as i64 {
                return false;
            }
            cell[a] = next as usize;
            t_max[a] += t_delta[a];
        }
    }
}

/// Ray-casting reference visibility.
///
/// Every point is a sphere of radius `point_radius`. An in-frustum point `p` at
/// distance `L` is visible unless another sphere meets the camera ray towards
/// `p` before `L - 2 * point_radius`, i.e. strictly in front of `p`'s own
/// sphere by more than a slack of `point_radius`. Output matches
/// [`extract_mapping`].
pub fn oracle_visibility(
    cloud: &PointCloud,
    view: &CameraView,
    params: &SplatParams,
    point_radius: f64,
) -> Vec<VisiblePoint> {
    let grid = SphereGrid::build(&cloud.positions, point_radius);
    let origin = view.center();
    let mut out = Vec::new();
    for (id, p) in cloud.positions.iter().enumerate() {
        let Some((proj, px)) = view.frustum_projection(p, params.r_max) else {
            continue;
        };
        let to_p = Vector3::from(*p) - origin;
        let dir = to_p / proj.depth;
        let limit = proj.depth - 2.0 * point_radius;
        let occluded = limit > 0.0
            && grid.walk(&origin, &dir, limit, |items| {
                items.iter().any(|&q| {
                    q as usize != id && {
                        let oq = Vector3::from(cloud.positions[q as usize]) - origin;
                        sphere_blocks(&oq, &dir, point_radius, limit)
                    }
                })
            });
        if !occluded {
            out.push(visible_entry(id as u32, &proj, px));
        }
    }
    out
}

/// Maps every in-frustum point whose distance is within `epsilon` of the depth
/// map at its projection pixel.
pub fn depth_based_mapping(
    cloud: &PointCloud,
    view: &CameraView,
    depth_map: &ImageRaster,
    epsilon: f64,
    params: &SplatParams,
) -> Result<Vec<VisiblePoint>, VisibilityError> {
    let map_size = (depth_map.width(), depth_map.height());
    if map_size != view.size() || depth_map.channels() != 1 {
        return Err(VisibilityError::DimensionMismatch {
            map: map_size,
            view: view.size(),
        });
    }
    Ok(cloud
        .positions
        .iter()
        .enumerate()
        .filter_map(|(id, p)| {
            let (proj, px) = view.frustum_projection(p, params.r_max)?;
            let target = depth_map.get(px.0, px.1, 0) as f64;
            ((proj.depth - target).abs() <= epsilon).then(|| visible_entry(id as u32, &proj, px))
        })
        .collect())
}

/// Depth map holding, per pixel, the nearest distance among `entries`.
pub fn entries_depth_map(entries: &[VisiblePoint], width: u32, height: u32) -> ImageRaster {
    let mut r = ImageRaster::filled(width, height, 1, f32::INFINITY).expect("shape");
    for e in entries {
        let px = r.pixel_mut(e.u, e.v);
        if e.depth < px[0] {
            px[0] = e.depth;
        }
    }
    r
}
