use approx::assert_relative_eq;
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;

use viewfuse::aggregation::{checkpoint_from_bytes, checkpoint_to_bytes, init_params, Activation};
use viewfuse::batch::score_image;
use viewfuse::geometry::N_CONDITIONS;
use viewfuse::mapping::{ImageEntries, PointEntry};
use viewfuse::scene_io::{
    read_point_cloud, write_point_cloud, PlyEncoding, PoseEntry, PoseManifest,
};
use viewfuse::visibility::{splat_size, SplatParams};
use viewfuse::{CameraModel, CameraView, MultiViewMapping, PointCloud, Pose};

fn pose(angles: (f64, f64, f64), position: [f64; 3]) -> Pose {
    let r = Rotation3::from_euler_angles(angles.0, angles.1, angles.2);
    Pose::new(*r.matrix(), Vector3::from(position)).unwrap()
}

fn angles() -> impl Strategy<Value = (f64, f64, f64)> {
    (-3.1f64..3.1, -1.5f64..1.5, -3.1f64..3.1)
}

fn position() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-5.0f64..5.0)
}

fn entries_strategy() -> impl Strategy<Value = (usize, Vec<ImageEntries>)> {
    (1usize..20, prop::collection::btree_set(0u32..50, 0..6)).prop_flat_map(|(n, ids)| {
        let ids: Vec<u32> = ids.into_iter().collect();
        let per_image = ids
            .iter()
            .map(|_| prop::collection::btree_map(0..n as u32, (0u32..2048, 0u32..1024, 0.1f32..8.0), 0..n))
            .collect::<Vec<_>>();
        (Just(n), Just(ids), per_image).prop_map(|(n, ids, maps)| {
            let images = ids
                .into_iter()
                .zip(maps)
                .map(|(image_id, m)| ImageEntries {
                    image_id,
                    entries: m
                        .into_iter()
                        .map(|(point_id, (u, v, depth))| PointEntry {
                            point_id,
                            u,
                            v,
                            depth,
                            conditions: [depth; N_CONDITIONS],
                        })
                        .collect(),
                })
                .collect();
            (n, images)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pinhole_projection_inverts_through_pixel_ray(
        a in angles(),
        c in position(),
        dir in prop::array::uniform3(-1.0f64..1.0),
        dist in 0.2f64..20.0,
    ) {
        let view = CameraView::new(
            0,
            CameraModel::Pinhole { fx: 300.0, fy: 280.0, cx: 160.0, cy: 120.0, width: 320, height: 240 },
            pose(a, c),
        ).unwrap();
        let local = Vector3::new(dir[0], dir[1], dir[2].abs() + 0.5).normalize() * dist;
        let world = view.pose.rotation * local + view.pose.position;
        let proj = view.project(&[world.x, world.y, world.z]).unwrap();
        let ray = view.pixel_ray(proj.u, proj.v);
        let back = view.center() + ray * proj.depth;
        prop_assert!((back - world).norm() < 1e-9 * (1.0 + dist));
    }

    #[test]
    fn equirect_projection_inverts_through_pixel_ray(
        a in angles(),
        c in position(),
        dir in prop::array::uniform3(-1.0f64..1.0),
        dist in 0.2f64..20.0,
    ) {
        let view = CameraView::new(0, CameraModel::Equirectangular { width: 1024, height: 512 }, pose(a, c)).unwrap();
        let d = Vector3::from(dir);
        prop_assume!(d.norm() > 1e-3);
        let world = view.center() + d.normalize() * dist;
        let proj = view.project(&[world.x, world.y, world.z]).unwrap();
        prop_assert!((0.0..1024.0).contains(&proj.u));
        prop_assert!((0.0..=512.0).contains(&proj.v));
        assert_relative_eq!(proj.depth, dist, max_relative = 1e-12);
        let back = view.center() + view.pixel_ray(proj.u, proj.v) * proj.depth;
        prop_assert!((back - world).norm() < 1e-8 * (1.0 + dist));
    }

    #[test]
    fn splat_size_shrinks_with_distance_towards_resolution(
        c in 0.001f64..0.2,
        k in 0.0f64..4.0,
        r in 1.0f64..30.0,
        d1 in 0.0f64..40.0,
        d2 in 0.0f64..40.0,
    ) {
        let p = SplatParams::new(c, k, r).unwrap();
        let (near, far) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(splat_size(near, &p) >= splat_size(far, &p));
        prop_assert!(splat_size(far, &p) >= c);
        prop_assert!(splat_size(0.0, &p) <= c * (1.0 + k) * (1.0 + 1e-12));
    }

    #[test]
    fn csr_store_keeps_every_pair_sorted((n, images) in entries_strategy()) {
        let m = MultiViewMapping::build(n, &images).unwrap();
        m.validate().unwrap();
        let total: usize = images.iter().map(|i| i.entries.len()).sum();
        prop_assert_eq!(m.n_entries(), total);
        prop_assert_eq!(m.offsets().len(), n + 1);
        for p in 0..n {
            let views = m.views_of(p).unwrap();
            prop_assert!(views.windows(2).all(|w| w[0].image_id < w[1].image_id));
        }
        let back = MultiViewMapping::from_bytes(&m.to_bytes()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn depth_filter_is_monotone((n, images) in entries_strategy(), a in 0.0f64..9.0, b in 0.0f64..9.0) {
        let m = MultiViewMapping::build(n, &images).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = m.filter_by_depth(lo);
        let large = m.filter_by_depth(hi);
        small.validate().unwrap();
        prop_assert!(small.n_entries() <= large.n_entries());
        prop_assert!(small.entries().iter().all(|e| (e.depth as f64) <= lo));
        prop_assert_eq!(large.filter_by_depth(lo), small);
    }

    #[test]
    fn checkpoint_round_trips(seed in any::<u64>(), c in 1usize..4, m in 1usize..6, leaky in any::<bool>()) {
        let k = c;
        let mut params = init_params::<f64>(4 * c, k, m, seed).unwrap();
        if !leaky {
            params.set_activation(Activation::Identity);
        }
        let back = checkpoint_from_bytes(&checkpoint_to_bytes(&params)).unwrap();
        prop_assert_eq!(back, params);
    }

    #[test]
    fn score_grows_with_area_and_coverage(
        area in 0u64..1000,
        extra in 1u64..1000,
        unseen in 0usize..50,
        lambda in 0.0f64..5.0,
    ) {
        let max_area = 2000;
        let base = score_image(area, unseen, max_area, 50, lambda);
        prop_assert!(score_image(area + extra, unseen, max_area, 50, lambda) > base);
        prop_assert!(score_image(area, unseen + 1, max_area, 51, lambda) >= score_image(area, unseen, max_area, 51, lambda));
    }
}

#[test]
fn score_examples() {
    assert_eq!(score_image(512 * 512, 3, 1024 * 512, 6, 2.0), 1.5);
    assert_eq!(score_image(0, 0, 0, 0, 2.0), 0.0);
    assert_eq!(score_image(100, 5, 100, 0, 2.0), 1.0);
}

fn cloud_strategy() -> impl Strategy<Value = PointCloud> {
    (1usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::array::uniform3(-1e3f64..1e3), n),
            prop::collection::vec(prop::array::uniform3(0u8..=255), n),
            prop::collection::vec(-1i32..20, n),
            any::<bool>(),
        )
            .prop_map(|(pos, col, lab, extras)| {
                let cloud = PointCloud::new(pos, 0.05).unwrap();
                if extras {
                    cloud
                        .with_colors(col.iter().map(|c| c.map(|v| v as f32 / 255.0)).collect())
                        .unwrap()
                        .with_labels(lab)
                        .unwrap()
                } else {
                    cloud
                }
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ply_round_trips(cloud in cloud_strategy(), binary in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        let encoding = if binary { PlyEncoding::BinaryLittleEndian } else { PlyEncoding::Ascii };
        write_point_cloud(&path, &cloud, encoding).unwrap();
        let back = read_point_cloud(&path).unwrap();
        prop_assert_eq!(&back.positions, &cloud.positions);
        prop_assert_eq!(&back.labels, &cloud.labels);
        prop_assert_eq!(back.resolution, cloud.resolution);
        match (&back.colors, &cloud.colors) {
            (Some(a), Some(b)) => {
                for (x, y) in a.iter().zip(b) {
                    for ch in 0..3 {
                        prop_assert!((x[ch] - y[ch]).abs() < 1e-6);
                    }
                }
            }
            (None, None) => {}
            _ => prop_assert!(false, "colors lost"),
        }
    }

    #[test]
    fn pose_manifest_round_trips(
        poses in prop::collection::vec((angles(), position(), any::<bool>()), 1..8),
    ) {
        let entries: Vec<PoseEntry> = poses
            .iter()
            .enumerate()
            .map(|(i, &(a, c, pano))| {
                let p = pose(a, c);
                PoseEntry {
                    image_id: i as u32 * 2,
                    raster: None,
                    model: if pano {
                        CameraModel::Equirectangular { width: 1024, height: 512 }
                    } else {
                        CameraModel::Pinhole { fx: 200.5, fy: 201.25, cx: 128.0, cy: 127.5, width: 256, height: 256 }
                    },
                    rotation: p.rotation,
                    translation: p.position,
                }
            })
            .collect();
        let manifest = PoseManifest { entries };
        let back = PoseManifest::parse(&manifest.to_text(), None).unwrap();
        prop_assert_eq!(back.entries.len(), manifest.entries.len());
        for (a, b) in back.entries.iter().zip(&manifest.entries) {
            prop_assert_eq!(a.image_id, b.image_id);
            prop_assert_eq!(a.model, b.model);
            prop_assert!((a.rotation - b.rotation).abs().max() == 0.0);
            prop_assert!((a.translation - b.translation).abs().max() == 0.0);
        }
    }
}
