//! Seeded synthetic scenes: cluttered box rooms for visibility tests and
//! textured rooms whose class labels are only visible in the images.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, CameraView, Pose};
use crate::scene_io::{ImageRaster, PointCloud};

/// Axis-aligned rectangle on a plane `axis = offset`, spanning `lo..hi` on the
/// two remaining axes (in increasing axis order).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub axis: usize,
    pub offset: f64,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Rect {
    fn in_plane_axes(&self) -> [usize; 2] {
        match self.axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }

    fn point(&self, a: f64, b: f64) -> [f64; 3] {
        let [i, j] = self.in_plane_axes();
        let mut p = [0.0; 3];
        p[self.axis] = self.offset;
        p[i] = a;
        p[j] = b;
        p
    }

    /// Cell-centered grid samples at spacing `step`.
    pub fn grid(&self, step: f64) -> Vec<[f64; 3]> {
        let na = ((self.hi[0] - self.lo[0]) / step).round().max(1.0) as usize;
        let nb = ((self.hi[1] - self.lo[1]) / step).round().max(1.0) as usize;
        let sa = (self.hi[0] - self.lo[0]) / na as f64;
        let sb = (self.hi[1] - self.lo[1]) / nb as f64;
        let mut out = Vec::with_capacity(na * nb);
        for ib in 0..nb {
            for ia in 0..na {
                out.push(self.point(
                    self.lo[0] + (ia as f64 + 0.5) * sa,
                    self.lo[1] + (ib as f64 + 0.5) * sb,
                ));
            }
        }
        out
    }
}

/// Axis-aligned box `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn contains(&self, p: &[f64; 3], margin: f64) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - margin && p[a] <= self.max[a] + margin)
    }

    fn overlaps_xz(&self, other: &Aabb, margin: f64) -> bool {
        [0, 2].iter().all(|&a| {
            self.min[a] < other.max[a] + margin && other.min[a] < self.max[a] + margin
        })
    }

    /// The five visible faces of a box resting on the floor (no bottom).
    fn faces(&self) -> Vec<Rect> {
        let (mn, mx) = (self.min, self.max);
        vec![
            Rect { axis: 1, offset: mx[1], lo: [mn[0], mn[2]], hi: [mx[0], mx[2]] },
            Rect { axis: 0, offset: mn[0], lo: [mn[1], mn[2]], hi: [mx[1], mx[2]] },
            Rect { axis: 0, offset: mx[0], lo: [mn[1], mn[2]], hi: [mx[1], mx[2]] },
            Rect { axis: 2, offset: mn[2], lo: [mn[0], mn[1]], hi: [mx[0], mx[1]] },
            Rect { axis: 2, offset: mx[2], lo: [mn[0], mn[1]], hi: [mx[0], mx[1]] },
        ]
    }
}

/// Interior faces of a room `[0, size]` (world +Y is up).
fn room_faces(size: [f64; 3]) -> Vec<Rect> {
    let [x, y, z] = size;
    vec![
        Rect { axis: 1, offset: 0.0, lo: [0.0, 0.0], hi: [x, z] },
        Rect { axis: 1, offset: y, lo: [0.0, 0.0], hi: [x, z] },
        Rect { axis: 0, offset: 0.0, lo: [0.0, 0.0], hi: [y, z] },
        Rect { axis: 0, offset: x, lo: [0.0, 0.0], hi: [y, z] },
        Rect { axis: 2, offset: 0.0, lo: [0.0, 0.0], hi: [x, y] },
        Rect { axis: 2, offset: z, lo: [0.0, 0.0], hi: [x, y] },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRoomSpec {
    pub size: [f64; 3],
    pub resolution: f64,
    /// Exact point count; the surface grid is randomly thinned to it.
    /// `None` keeps the whole grid.
    pub n_points: Option<usize>,
    pub n_boxes: usize,
    pub n_cameras: usize,
    pub image_size: u32,
    pub focal: f64,
    /// Equirectangular cameras instead of pinholes (raster `2S x S`).
    pub equirectangular: bool,
    pub seed: u64,
}

impl Default for BoxRoomSpec {
    fn default() -> Self {
        Self {
            size: [6.0, 2.8, 5.0],
            resolution: 0.05,
            n_points: Some(50_000),
            n_boxes: 4,
            n_cameras: 8,
            image_size: 256,
            focal: 200.0,
            equirectangular: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoxRoom {
    pub cloud: PointCloud,
    pub views: Vec<CameraView>,
    pub boxes: Vec<Aabb>,
}

/// Room with furniture-like boxes on the floor and cameras at standing height
/// looking horizontally in random directions.
pub fn box_room(spec: &BoxRoomSpec) -> BoxRoom {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [sx, sy, sz] = spec.size;
    let mut boxes: Vec<Aabb> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < spec.n_boxes && attempts < 1000 {
        attempts += 1;
        let w = rng.gen_range(0.4..1.2);
        let d = rng.gen_range(0.4..1.2);
        let h = rng.gen_range(0.4..(1.4f64).min(sy * 0.7));
        let x0 = rng.gen_range(0.3..(sx - w - 0.3).max(0.31));
        let z0 = rng.gen_range(0.3..(sz - d - 0.3).max(0.31));
        let b = Aabb {
            min: [x0, 0.0, z0],
            max: [x0 + w, h, z0 + d],
        };
        if boxes.iter().all(|o| !o.overlaps_xz(&b, 0.3)) {
            boxes.push(b);
        }
    }

    let c = spec.resolution;
    let mut points: Vec<[f64; 3]> = Vec::new();
    for face in room_faces(spec.size) {
        for p in face.grid(c) {
            if face.axis == 1 && face.offset == 0.0 && boxes.iter().any(|b| b.contains(&p, 0.0)) {
                continue;
            }
            points.push(p);
        }
    }
    for b in &boxes {
        for face in b.faces() {
            points.extend(face.grid(c));
        }
    }
    if let Some(n) = spec.n_points {
        if points.len() > n {
            let mut keep = sample(&mut rng, points.len(), n).into_vec();
            keep.sort_unstable();
            points = keep.into_iter().map(|i| points[i]).collect();
        }
    }

    let s = spec.image_size;
    let model = if spec.equirectangular {
        CameraModel::Equirectangular {
            width: 2 * s,
            height: s,
        }
    } else {
        CameraModel::Pinhole {
            fx: spec.focal,
            fy: spec.focal,
            cx: s as f64 / 2.0,
            cy: s as f64 / 2.0,
            width: s,
            height: s,
        }
    };
    let mut views = Vec::new();
    let mut attempts = 0;
    while views.len() < spec.n_cameras && attempts < 10_000 {
        attempts += 1;
        let eye = [
            rng.gen_range(0.5..sx - 0.5),
            rng.gen_range(1.0..(sy - 0.5).max(1.01)),
            rng.gen_range(0.5..sz - 0.5),
        ];
        if boxes.iter().any(|b| b.contains(&eye, 0.3)) {
            continue;
        }
        let yaw: f64 = rng.gen_range(0.0..TAU);
        let pitch: f64 = rng.gen_range(-0.3..0.1);
        let dir = Vector3::new(yaw.sin() * pitch.cos(), pitch.sin(), yaw.cos() * pitch.cos());
        let eye = Vector3::from(eye);
        let pose = Pose::look_at(eye, eye + dir, Vector3::new(0.0, 1.0, 0.0));
        views.push(CameraView::new(views.len() as u32, model, pose).expect("valid model"));
    }
    BoxRoom {
        cloud: PointCloud::new(points, c).expect("finite grid"),
        views,
        boxes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TexturedRoomSpec {
    pub size: [f64; 3],
    pub resolution: f64,
    /// Side of the square texture tiles, meters.
    pub tile: f64,
    pub n_classes: usize,
    pub n_cameras: usize,
    /// Panorama height; width is twice this.
    pub image_height: u32,
    /// Per-channel uniform pixel noise amplitude.
    pub noise: f32,
    pub seed: u64,
}

impl Default for TexturedRoomSpec {
    fn default() -> Self {
        Self {
            size: [4.0, 2.5, 4.0],
            resolution: 0.1,
            tile: 0.5,
            n_classes: 3,
            n_cameras: 3,
            image_height: 128,
            noise: 0.1,
            seed: 0,
        }
    }
}

/// Geometry, labels and rendered panoramas of a textured room.
#[derive(Debug, Clone)]
pub struct TexturedRoom {
    pub cloud: PointCloud,
    pub views: Vec<CameraView>,
    pub images: Vec<ImageRaster>,
    pub n_classes: usize,
}

/// Class palette, evenly spread hues.
pub fn class_color(class: usize, n_classes: usize) -> [f32; 3] {
    let h = class as f64 / n_classes.max(1) as f64;
    let f = |shift: f64| {
        let x = ((h + shift) * TAU).cos();
        (0.5 + 0.35 * x) as f32
    };
    [f(0.0), f(-1.0 / 3.0), f(1.0 / 3.0)]
}

struct TileMap {
    size: [f64; 3],
    tile: f64,
    classes: Vec<Vec<usize>>,
    dims: Vec<[usize; 2]>,
}

impl TileMap {
    fn new(size: [f64; 3], tile: f64, n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let faces = room_faces(size);
        let mut classes = Vec::new();
        let mut dims = Vec::new();
        for f in &faces {
            let na = ((f.hi[0] - f.lo[0]) / tile).ceil() as usize;
            let nb = ((f.hi[1] - f.lo[1]) / tile).ceil() as usize;
            classes.push((0..na * nb).map(|_| rng.gen_range(0..n_classes)).collect());
            dims.push([na, nb]);
        }
        Self {
            size,
            tile,
            classes,
            dims,
        }
    }

    /// Face index of a point lying on the room boundary.
    fn face_of(&self, p: &[f64; 3]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for axis in 0..3 {
            for (k, offset) in [0.0, self.size[axis]].into_iter().enumerate() {
                let d = (p[axis] - offset).abs();
                if d < best.0 {
                    best = (d, [2, 0, 4][axis] + k);
                }
            }
        }
        best.1
    }

    fn class_at(&self, p: &[f64; 3]) -> usize {
        let face = self.face_of(p);
        let axes = match face / 2 {
            0 => [0, 2],
            1 => [1, 2],
            _ => [0, 1],
        };
        let [na, nb] = self.dims[face];
        let ia = ((p[axes[0]] / self.tile) as usize).min(na - 1);
        let ib = ((p[axes[1]] / self.tile) as usize).min(nb - 1);
        self.classes[face][ib * na + ia]
    }
}

/// Ray from inside the room to its boundary.
fn hit_room(size: [f64; 3], o: &Vector3<f64>, d: &Vector3<f64>) -> [f64; 3] {
    let mut t = f64::INFINITY;
    for a in 0..3 {
        if d[a] > 0.0 {
            t = t.min((size[a] - o[a]) / d[a]);
        } else if d[a] < 0.0 {
            t = t.min(-o[a] / d[a]);
        }
    }
    let p = o + d * t;
    [p.x, p.y, p.z]
}

/// Empty room tiled with randomly classed textures, observed by panoramas
/// placed on a ring. Every surface is a plane, so geometry carries no class
/// information.
pub fn textured_room(spec: &TexturedRoomSpec) -> TexturedRoom {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tiles = TileMap::new(spec.size, spec.tile, spec.n_classes, &mut rng);
    let [sx, sy, sz] = spec.size;

    let mut positions = Vec::new();
    for face in room_faces(spec.size) {
        positions.extend(face.grid(spec.resolution));
    }
    let labels: Vec<i32> = positions.iter().map(|p| tiles.class_at(p) as i32).collect();
    let colors = labels
        .iter()
        .map(|&l| class_color(l as usize, spec.n_classes))
        .collect();
    let cloud = PointCloud::new(positions, spec.resolution)
        .and_then(|c| c.with_labels(labels))
        .and_then(|c| c.with_colors(colors))
        .expect("consistent channels");

    let h = spec.image_height;
    let model = CameraModel::Equirectangular {
        width: 2 * h,
        height: h,
    };
    let mut views = Vec::new();
    let mut images = Vec::new();
    let radius = 0.25 * sx.min(sz);
    for i in 0..spec.n_cameras {
        let angle = TAU * i as f64 / spec.n_cameras.max(1) as f64;
        let eye = Vector3::new(
            0.5 * sx + radius * angle.cos(),
            0.5 * sy + rng.gen_range(-0.2..0.2),
            0.5 * sz + radius * angle.sin(),
        );
        let yaw = rng.gen_range(0.0..TAU);
        let rotation = Matrix3::new(
            yaw.cos(), 0.0, yaw.sin(),
            0.0, 1.0, 0.0,
            -yaw.sin(), 0.0, yaw.cos(),
        );
        // camera +Y is down, world +Y is up
        let flip = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let pose = Pose {
            rotation: rotation * flip,
            position: eye,
        };
        let view = CameraView::new(i as u32, model, pose).expect("valid");
        let mut data = Vec::with_capacity((2 * h * h * 3) as usize);
        for v in 0..h {
            for u in 0..2 * h {
                let ray = view.pixel_ray(u as f64 + 0.5, v as f64 + 0.5);
                let hit = hit_room(spec.size, &eye, &ray);
                let base = class_color(tiles.class_at(&hit), spec.n_classes);
                for ch in base {
                    let n: f32 = rng.gen_range(-1.0..=1.0);
                    data.push((ch + spec.noise * n).clamp(0.0, 1.0));
                }
            }
        }
        images.push(ImageRaster::new(2 * h, h, 3, data).expect("shape"));
        views.push(view);
    }
    TexturedRoom {
        cloud,
        views,
        images,
        n_classes: spec.n_classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_room_is_seeded_and_sized() {
        let spec = BoxRoomSpec {
            n_points: Some(20_000),
            ..Default::default()
        };
        let a = box_room(&spec);
        let b = box_room(&spec);
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.views, b.views);
        assert_eq!(a.cloud.len(), 20_000);
        assert_eq!(a.views.len(), 8);
        assert!(!a.boxes.is_empty());
        for v in &a.views {
            assert!(a.boxes.iter().all(|bx| !bx.contains(&[v.center().x, v.center().y, v.center().z], 0.0)));
        }
    }

    #[test]
    fn textured_room_labels_match_render() {
        let spec = TexturedRoomSpec {
            image_height: 32,
            noise: 0.0,
            ..Default::default()
        };
        let room = textured_room(&spec);
        assert_eq!(room.images.len(), 3);
        let labels = room.cloud.labels.as_ref().unwrap();
        assert!((0..3).all(|c| labels.contains(&c)));
        // the panorama pixel a point projects to shows its class color, away
        // from tile borders
        let view = &room.views[0];
        let img = &room.images[0];
        let mut agree = 0;
        let mut total = 0;
        for (i, p) in room.cloud.positions.iter().enumerate().step_by(7) {
            let Some((_, (u, v))) = view.frustum_projection(p, 100.0) else { continue };
            total += 1;
            let color = class_color(labels[i] as usize, 3);
            if img.pixel(u, v).iter().zip(color).all(|(a, b)| (a - b).abs() < 1e-6) {
                agree += 1;
            }
        }
        assert!(agree as f64 > 0.8 * total as f64, "{agree}/{total}");
    }
}
