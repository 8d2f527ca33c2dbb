//! End-to-end acceptance checks. Each test prints one `PASS` or `FAIL` line
//! and asserts the same condition.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use viewfuse::aggregation::{
    attention, backward, forward, forward_train, gating, grad_check, init_params, AggregationParams,
    GradCheckConfig, ViewBatch,
};
use viewfuse::batch::{plan_batch, BatchConfig};
use viewfuse::fusion::{train_on, FusionMode, ToyConfig, ToyData};
use viewfuse::geometry::{build_knn, eigen_features, N_CONDITIONS};
use viewfuse::mapping::{ImageEntries, MappingError, PointEntry};
use viewfuse::pipeline::{compute_mapping, MappingParams};
use viewfuse::scene_io::{decode_pfm, encode_pfm, PfmError, DEFAULT_CROPS};
use viewfuse::synth::{box_room, BoxRoomSpec};
use viewfuse::visibility::{map_view, oracle_visibility, SplatParams};
use viewfuse::{ImageRaster, MultiViewMapping};

static SERIAL: Mutex<()> = Mutex::new(());

fn report(n: usize, name: &str, ok: bool, detail: String) {
    println!(
        "criterion {n} {name}: {} {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
}

fn f1(found: &BTreeSet<(u32, u32)>, truth: &BTreeSet<(u32, u32)>) -> f64 {
    let tp = found.intersection(truth).count() as f64;
    if found.is_empty() && truth.is_empty() {
        return 1.0;
    }
    2.0 * tp / (found.len() + truth.len()) as f64
}

#[test]
fn criterion_1_visibility_fidelity() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut busy = std::time::Duration::ZERO;
    let mut scores = Vec::new();
    let mut steep = Vec::new();
    for seed in 0..20 {
        let spec = BoxRoomSpec {
            seed,
            ..BoxRoomSpec::default()
        };
        let start = Instant::now();
        let room = box_room(&spec);
        let params = SplatParams::indoor(spec.resolution);
        let views: Vec<_> = room
            .views
            .iter()
            .map(|view| {
                (
                    map_view(&room.cloud, view, &params),
                    oracle_visibility(&room.cloud, view, &params, spec.resolution / 2.0),
                )
            })
            .collect();
        busy += start.elapsed();
        let knn = build_knn(&room.cloud, 16).unwrap();
        let normals: Vec<[f64; 3]> = (0..room.cloud.len() as u32)
            .map(|p| eigen_features(&room.cloud, &knn, p).normal)
            .collect();
        let (mut found, mut truth) = (BTreeSet::new(), BTreeSet::new());
        let (mut found_steep, mut truth_steep) = (BTreeSet::new(), BTreeSet::new());
        for (view, (mapped, oracle)) in room.views.iter().zip(views) {
            let center = view.center();
            let steep_enough = |p: u32| {
                let ray = (Vector3::from(room.cloud.positions[p as usize]) - center).normalize();
                ray.dot(&Vector3::from(normals[p as usize])).abs() >= 0.5
            };
            for v in mapped {
                found.insert((view.image_id, v.point_id));
                if steep_enough(v.point_id) {
                    found_steep.insert((view.image_id, v.point_id));
                }
            }
            for v in oracle {
                truth.insert((view.image_id, v.point_id));
                if steep_enough(v.point_id) {
                    truth_steep.insert((view.image_id, v.point_id));
                }
            }
        }
        scores.push(f1(&found, &truth));
        steep.push(f1(&found_steep, &truth_steep));
    }
    let elapsed = busy.as_secs_f64();
    let worst = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let worst_steep = steep.iter().cloned().fold(f64::INFINITY, f64::min);
    let ok = worst >= 0.98 && elapsed < 10.0;
    println!(
        "criterion 1 info: min F1 over pairs seen at >= 30 deg incidence {worst_steep:.4}"
    );
    report(
        1,
        "visibility fidelity",
        ok,
        format!(
            "min F1 {worst:.4} mean F1 {:.4} over 20 scenes, {elapsed:.2}s",
            scores.iter().sum::<f64>() / scores.len() as f64
        ),
    );
    assert!(ok, "per-scene F1 {scores:?}, {elapsed:.2}s");
}

#[test]
fn criterion_2_throughput() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let spec = BoxRoomSpec {
        resolution: 0.011,
        n_points: Some(1_000_000),
        n_cameras: 32,
        image_size: 512,
        equirectangular: true,
        ..BoxRoomSpec::default()
    };
    let room = box_room(&spec);
    assert_eq!(room.cloud.len(), 1_000_000);
    assert!(room.views.iter().all(|v| v.size() == (1024, 512)));
    let params = MappingParams::new(SplatParams::indoor(spec.resolution));
    let start = Instant::now();
    let (mapping, timings) = compute_mapping(&room.cloud, &room.views, &params).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let ok = elapsed < 120.0 && mapping.n_entries() > 0;
    report(
        2,
        "throughput",
        ok,
        format!(
            "{} entries in {elapsed:.1}s (visibility {:.1}s, geometry {:.1}s, conditions {:.1}s, csr {:.1}s)",
            mapping.n_entries(),
            timings.visibility.as_secs_f64(),
            timings.geometry.as_secs_f64(),
            timings.conditions.as_secs_f64(),
            timings.csr.as_secs_f64()
        ),
    );
    assert!(ok);
}

/// Random aggregation instance with `n_points` points of 1 to `max_views` views.
fn instance(
    seed: u64,
    n_points: usize,
    max_views: usize,
) -> (AggregationParams<f64>, ViewBatch<f64>, Vec<f64>) {
    let (c, k, m, d) = (16, 4, 8, N_CONDITIONS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params::<f64>(c, k, m, seed).unwrap();
    let mut offsets = vec![0];
    let mut ids = Vec::new();
    for _ in 0..n_points {
        let n = rng.gen_range(1..=max_views);
        ids.extend(0..n as u32);
        offsets.push(ids.len());
    }
    let e = ids.len();
    let features = (0..e * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let conditions = (0..e * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let batch = ViewBatch::new(c, d, offsets, ids, features, conditions).unwrap();
    let upstream = (0..n_points * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (params, batch, upstream)
}

#[test]
fn criterion_3_gradient_correctness() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let config = GradCheckConfig::default();
    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (params, batch, upstream) = instance(seed, 3, 6);
        let check = grad_check(&params, &batch, &upstream, &config).unwrap();
        worst = worst.max(check.max_error());
        if !check.passed() {
            failed.push((seed, check.failures().join(",")));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = failed.is_empty() && elapsed < 60.0;
    report(
        3,
        "gradient correctness",
        ok,
        format!(
            "{} of 100 instances failed, worst relative error {worst:.2e}, {elapsed:.1}s",
            failed.len()
        ),
    );
    assert!(ok, "failures {failed:?}");
}

#[test]
fn criterion_4_normalization_and_gate_range() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = 4;
    let mut worst_sum = 0.0f64;
    let mut gates_in_range = true;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=12);
        let spread = 10f64.powf(rng.gen_range(-2.0..2.5));
        let x: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-spread..spread)).collect();
        let a = attention(&x, k);
        for kk in 0..k {
            let s: f64 = (0..n).map(|i| a[i * k + kk]).sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
        let alpha: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let beta: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        gates_in_range &= gating(&x, &alpha, &beta)
            .iter()
            .all(|g| (0.0..=1.0).contains(g));
    }

    let mut all_zero = true;
    for seed in 0..20 {
        let (mut params, batch, _) = instance(1000 + seed, 50, 8);
        params.phi3.l2.weight.iter_mut().for_each(|w| *w = 0.0);
        params
            .phi3
            .l2
            .bias
            .iter_mut()
            .for_each(|b| *b = -rng.gen_range(0.0..2.0));
        params.alpha.iter_mut().for_each(|a| *a = 1.0);
        params.beta.iter_mut().for_each(|b| *b = 0.0);
        let out = forward(&batch, &params).unwrap();
        all_zero &= out.scores.iter().all(|&s| s <= 0.0);
        all_zero &= out.pooled.iter().all(|&v| v == 0.0);
    }
    let ok = worst_sum <= 1e-6 && gates_in_range && all_zero;
    report(
        4,
        "attention normalization and gate range",
        ok,
        format!(
            "max |sum - 1| {worst_sum:.2e}, gates in [0, 1]: {gates_in_range}, pooled exactly zero under non-positive scores: {all_zero}"
        ),
    );
    assert!(ok);
}

/// Copy of `batch` with each point's views reordered by `perms[p]`.
fn permuted(batch: &ViewBatch<f64>, perms: &[Vec<usize>]) -> ViewBatch<f64> {
    let (c, d) = (batch.c(), batch.d());
    let (mut ids, mut features, mut conditions) = (Vec::new(), Vec::new(), Vec::new());
    for (p, perm) in perms.iter().enumerate() {
        let base = batch.views(p).start;
        for &i in perm {
            ids.push(batch.image_ids()[base + i]);
            features.extend_from_slice(batch.feature(base + i));
            conditions.extend_from_slice(batch.condition(base + i));
        }
    }
    ViewBatch::new(c, d, batch.offsets().to_vec(), ids, features, conditions).unwrap()
}

fn flat(params: &AggregationParams<f64>) -> Vec<f64> {
    params.tensors().into_iter().flatten().copied().collect()
}

#[test]
fn criterion_5_set_invariance() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let (params, batch, upstream) = instance(5, 6, 8);
    let (base_out, cache) = forward_train(&batch, &params).unwrap();
    let base_grad = flat(&backward(&batch, &params, &cache, &upstream).unwrap().params);
    let scale = base_grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut bitwise = true;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let perms: Vec<Vec<usize>> = (0..batch.n_points())
            .map(|p| {
                let mut v: Vec<usize> = (0..batch.views(p).len()).collect();
                v.shuffle(&mut rng);
                v
            })
            .collect();
        let shuffled = permuted(&batch, &perms);
        let (out, cache) = forward_train(&shuffled, &params).unwrap();
        bitwise &= out
            .pooled
            .iter()
            .zip(&base_out.pooled)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        let grad = flat(&backward(&shuffled, &params, &cache, &upstream).unwrap().params);
        let diff = grad
            .iter()
            .zip(&base_grad)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(diff / scale);
    }
    let ok = bitwise && worst < 1e-12;
    report(
        5,
        "set invariance",
        ok,
        format!("pooled bitwise equal: {bitwise}, max relative gradient change {worst:.2e}"),
    );
    assert!(ok);
}

#[test]
fn criterion_6_toy_fusion_separation() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let config = ToyConfig::default();
    let data = ToyData::build(&config).unwrap();
    let mut acc = BTreeMap::new();
    for mode in [FusionMode::Early, FusionMode::XyzOnly, FusionMode::ImageOnly] {
        acc.insert(mode.to_string(), train_on(&data, &config, mode).unwrap().accuracy);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let (early, xyz, image) = (acc["early"], acc["xyz-only"], acc["image-only"]);
    let ok = early >= 0.95 && early - xyz >= 0.15 && image > xyz && elapsed < 300.0;
    report(
        6,
        "toy fusion separation",
        ok,
        format!("early {early:.3}, xyz-only {xyz:.3}, image-only {image:.3}, {elapsed:.1}s"),
    );
    assert!(ok);
}

#[test]
fn criterion_7_batch_planner() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let spec = BoxRoomSpec {
        n_cameras: 10,
        image_size: 512,
        equirectangular: true,
        seed: 7,
        ..BoxRoomSpec::default()
    };
    let room = box_room(&spec);
    let r = SplatParams::INDOOR_R_MAX;
    let params = MappingParams::new(SplatParams::indoor(spec.resolution));
    let (mapping, _) = compute_mapping(&room.cloud, &room.views, &params).unwrap();
    let crops: BTreeSet<(u32, u32)> = DEFAULT_CROPS.iter().copied().collect();
    let max_area = DEFAULT_CROPS
        .iter()
        .map(|&(w, h)| w as u64 * h as u64)
        .max()
        .unwrap();
    let margin = 8;
    let seen: Vec<u32> = (0..mapping.n_points() as u32)
        .filter(|&p| !mapping.views_of(p as usize).unwrap().is_empty())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut violations = Vec::new();
    let mut pool = 0usize;
    let mut margin_checked = 0usize;
    for plan_seed in 0..1000u64 {
        let sample: Vec<u32> = if plan_seed % 2 == 0 {
            let n = rng.gen_range(1..400);
            seen.choose_multiple(&mut rng, n).copied().collect()
        } else {
            let c = room.cloud.positions[*seen.choose(&mut rng).unwrap() as usize];
            let radius = rng.gen_range(0.1..1.0);
            seen.iter()
                .copied()
                .filter(|&p| {
                    let q = room.cloud.positions[p as usize];
                    (0..3).map(|i| (q[i] - c[i]).powi(2)).sum::<f64>() <= radius * radius
                })
                .collect()
        };
        let budget = rng.gen_range(0..4 * max_area);
        let lambda = rng.gen_range(0.0..4.0);
        let max_images = if rng.gen_bool(0.5) {
            Some(rng.gen_range(1..=10))
        } else {
            None
        };
        let config = BatchConfig::new(
            DEFAULT_CROPS.to_vec(),
            margin,
            budget,
            lambda,
            max_images,
            plan_seed,
        )
        .unwrap();
        let plan = plan_batch(&sample, &room.cloud, &room.views, &mapping, &config).unwrap();
        let images: BTreeSet<u32> = sample
            .iter()
            .flat_map(|&p| mapping.views_of(p as usize).unwrap().iter().map(|e| e.image_id))
            .collect();
        pool = pool.max(images.len());

        let areas: u64 = plan.chosen.iter().map(|c| c.viewport.area()).sum();
        if plan.spent != areas || (budget > 0 && plan.spent >= budget + max_area) {
            violations.push(format!("plan {plan_seed}: spent {} budget {budget}", plan.spent));
        }
        if budget == 0 && !plan.chosen.is_empty() {
            violations.push(format!("plan {plan_seed}: zero budget spent"));
        }
        if let Some(cap) = max_images {
            if plan.chosen.len() > cap {
                violations.push(format!("plan {plan_seed}: {} images over cap {cap}", plan.chosen.len()));
            }
        }
        for chosen in &plan.chosen {
            let vp = chosen.viewport;
            if !crops.contains(&(vp.width, vp.height)) {
                violations.push(format!("plan {plan_seed}: crop {}x{}", vp.width, vp.height));
            }
            let view = &room.views[chosen.image_id as usize];
            let pts: Vec<[f64; 3]> = sample
                .iter()
                .filter(|&&p| {
                    mapping
                        .views_of(p as usize)
                        .unwrap()
                        .iter()
                        .any(|e| e.image_id == chosen.image_id)
                })
                .map(|&p| room.cloud.positions[p as usize])
                .collect();
            let centered = view.recenter_equirect(&pts).unwrap();
            let (w, h) = centered.size();
            let pixels: Vec<(i64, i64)> = pts
                .iter()
                .map(|p| {
                    let (u, v) = centered.project(p).unwrap().pixel(w, h).unwrap();
                    (u as i64, v as i64)
                })
                .collect();
            let umin = pixels.iter().map(|p| p.0).min().unwrap();
            let umax = pixels.iter().map(|p| p.0).max().unwrap();
            let vmin = pixels.iter().map(|p| p.1).min().unwrap();
            let vmax = pixels.iter().map(|p| p.1).max().unwrap();
            let m = margin as i64;
            let fits = DEFAULT_CROPS.iter().any(|&(cw, ch)| {
                cw as i64 >= umax - umin + 1 + 2 * m && ch as i64 >= vmax - vmin + 1 + 2 * m
            });
            if fits {
                margin_checked += 1;
                if let Some(&(u, v)) = pixels.iter().find(|&&(u, v)| vp.margin_of(u, v) < m) {
                    violations.push(format!(
                        "plan {plan_seed}: image {} pixel ({u}, {v}) margin {}",
                        chosen.image_id,
                        vp.margin_of(u, v)
                    ));
                }
            }
        }
    }

    let pairs = |m: &MultiViewMapping| -> BTreeSet<(u32, u32)> {
        m.iter().map(|(p, e)| (p, e.image_id)).collect()
    };
    let mut counts = Vec::new();
    let mut nested = true;
    let mut previous = pairs(&mapping);
    for d in [r, r / 2.0, r / 4.0] {
        let filtered = mapping.filter_by_depth(d);
        filtered.validate().unwrap();
        let kept = pairs(&filtered);
        nested &= kept.is_subset(&previous) && filtered.entries().iter().all(|e| e.depth as f64 <= d);
        let expected = mapping.entries().iter().filter(|e| e.depth as f64 <= d).count();
        nested &= filtered.n_entries() == expected;
        counts.push(filtered.n_entries());
        previous = kept;
    }
    let monotone = counts.windows(2).all(|w| w[0] >= w[1]);

    let ok = violations.is_empty() && monotone && nested && pool == 10;
    report(
        7,
        "batch planner",
        ok,
        format!(
            "1000 plans, {} violations, candidate pool {pool}, margin verified on {margin_checked} crops; entries at R, R/2, R/4: {counts:?}, nested and depth-bounded: {nested}",
            violations.len()
        ),
    );
    assert!(ok, "{violations:?}");
}

fn fuzz_f32(rng: &mut ChaCha8Rng) -> f32 {
    match rng.gen_range(0..8) {
        0 => 0.0,
        1 => -0.0,
        2 => f32::from_bits(rng.gen_range(1..0x0080_0000)),
        3 => f32::MAX,
        _ => loop {
            let v = f32::from_bits(rng.gen());
            if v.is_finite() {
                break v;
            }
        },
    }
}

fn fuzz_mapping(rng: &mut ChaCha8Rng, max_points: usize, max_images: u32) -> MultiViewMapping {
    let n_points = rng.gen_range(0..=max_points);
    let n_images = rng.gen_range(0..=max_images);
    let mut ids: Vec<u32> = (0..n_images).map(|i| i * 3 + rng.gen_range(0..3)).collect();
    ids.shuffle(rng);
    let images: Vec<ImageEntries> = ids
        .into_iter()
        .map(|image_id| {
            let entries = if n_points == 0 {
                Vec::new()
            } else {
                let chosen: Vec<u32> = (0..n_points as u32).filter(|_| rng.gen_bool(0.4)).collect();
                chosen
                    .into_iter()
                    .map(|point_id| PointEntry {
                        point_id,
                        u: rng.gen_range(0..=u16::MAX as u32),
                        v: rng.gen_range(0..=u16::MAX as u32),
                        depth: fuzz_f32(rng).abs(),
                        conditions: std::array::from_fn(|_| fuzz_f32(rng)),
                    })
                    .collect()
            };
            ImageEntries { image_id, entries }
        })
        .collect();
    MultiViewMapping::build(n_points, &images).unwrap()
}

fn same_bits(a: &MultiViewMapping, b: &MultiViewMapping) -> bool {
    a.offsets() == b.offsets()
        && a.entries().len() == b.entries().len()
        && a.entries().iter().zip(b.entries()).all(|(x, y)| {
            x.image_id == y.image_id
                && x.u == y.u
                && x.v == y.v
                && x.depth.to_bits() == y.depth.to_bits()
                && x.conditions
                    .iter()
                    .zip(&y.conditions)
                    .all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

#[test]
fn criterion_8_format_round_trips() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mvmp_ok = 0;
    let mut pfm_ok = 0;
    for _ in 0..1000 {
        let mapping = fuzz_mapping(&mut rng, 40, 6);
        let back = MultiViewMapping::from_bytes(&mapping.to_bytes());
        if back.map(|b| same_bits(&b, &mapping)).unwrap_or(false) {
            mvmp_ok += 1;
        }

        let (w, h) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let data: Vec<f32> = (0..w * h)
            .map(|_| {
                if rng.gen_bool(0.1) {
                    f32::from_bits(rng.gen())
                } else {
                    fuzz_f32(&mut rng)
                }
            })
            .collect();
        let raster = ImageRaster::new(w, h, 1, data).unwrap();
        let back = decode_pfm(&encode_pfm(&raster).unwrap()).unwrap();
        if back.width() == w
            && back.height() == h
            && back
                .data()
                .iter()
                .zip(raster.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
        {
            pfm_ok += 1;
        }
    }

    let sample = fuzz_mapping(&mut rng, 20, 4);
    let good = sample.to_bytes();
    let mut rejections = Vec::new();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    rejections.push(matches!(
        MultiViewMapping::from_bytes(&bad_magic),
        Err(MappingError::BadMagic(_))
    ));
    let mut bad_version = good.clone();
    bad_version[4..8].copy_from_slice(&2u32.to_le_bytes());
    rejections.push(matches!(
        MultiViewMapping::from_bytes(&bad_version),
        Err(MappingError::VersionMismatch(2))
    ));
    rejections.push(matches!(
        MultiViewMapping::from_bytes(&good[..10]),
        Err(MappingError::Truncated { .. })
    ));
    rejections.push(matches!(
        MultiViewMapping::from_bytes(&good[..good.len() - 1]),
        Err(MappingError::Truncated { .. })
    ));
    let pfm = encode_pfm(&ImageRaster::filled(4, 3, 1, 1.5).unwrap()).unwrap();
    let mut pf_color = pfm.clone();
    pf_color[1] = b'F';
    rejections.push(matches!(decode_pfm(&pf_color), Err(PfmError::BadHeader(_))));
    let mut pf_magic = pfm.clone();
    pf_magic[0] = b'Q';
    rejections.push(matches!(decode_pfm(&pf_magic), Err(PfmError::BadHeader(_))));
    let big_endian = String::from_utf8_lossy(&pfm).replacen("-1.0", "1.0", 1);
    rejections.push(matches!(
        decode_pfm(big_endian.as_bytes()),
        Err(PfmError::BadHeader(_)) | Err(PfmError::Truncated { .. })
    ));
    rejections.push(matches!(
        decode_pfm(b"Pf\n0 3\n-1.0\n"),
        Err(PfmError::BadHeader(_))
    ));
    rejections.push(matches!(
        decode_pfm(&pfm[..pfm.len() - 2]),
        Err(PfmError::Truncated { .. })
    ));
    let rejected = rejections.iter().filter(|&&r| r).count();

    let ok = mvmp_ok == 1000 && pfm_ok == 1000 && rejected == rejections.len();
    report(
        8,
        "format round-trips",
        ok,
        format!(
            "MVMP {mvmp_ok}/1000, PFM {pfm_ok}/1000 bit-exact, {rejected}/{} corruptions rejected with typed errors",
            rejections.len()
        ),
    );
    assert!(ok, "{rejections:?}");
}

#[test]
fn criterion_9_store_oracle_equivalence() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut grouping_ok = 0;
    let mut ablation_ok = 0;
    for _ in 0..200 {
        let n_points = rng.gen_range(1..30);
        let n_images = rng.gen_range(0..8u32);
        let mut ids: Vec<u32> = (0..n_images).map(|i| i * 5 + rng.gen_range(0..5)).collect();
        ids.shuffle(&mut rng);
        let mut pairs = Vec::new();
        let images: Vec<ImageEntries> = ids
            .iter()
            .map(|&image_id| {
                let mut pts: Vec<u32> = (0..n_points as u32).filter(|_| rng.gen_bool(0.5)).collect();
                pts.shuffle(&mut rng);
                let entries = pts
                    .into_iter()
                    .map(|point_id| {
                        let e = PointEntry {
                            point_id,
                            u: rng.gen_range(0..2048),
                            v: rng.gen_range(0..1024),
                            depth: rng.gen_range(0.1..8.0),
                            conditions: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
                        };
                        pairs.push((image_id, e));
                        e
                    })
                    .collect();
                ImageEntries { image_id, entries }
            })
            .collect();
        let mapping = MultiViewMapping::build(n_points, &images).unwrap();

        let grouped = (0..n_points).all(|p| {
            let mut naive: Vec<(u32, PointEntry)> = pairs
                .iter()
                .filter(|(_, e)| e.point_id as usize == p)
                .copied()
                .collect();
            naive.sort_by_key(|(id, _)| *id);
            let stored = mapping.views_of(p).unwrap();
            stored.len() == naive.len()
                && stored.iter().zip(&naive).all(|(s, (id, e))| {
                    s.image_id == *id
                        && s.u as u32 == e.u
                        && s.v as u32 == e.v
                        && s.depth.to_bits() == e.depth.to_bits()
                        && s.conditions == e.conditions
                })
        });
        grouping_ok += grouped as usize;

        let field = rng.gen_range(0..N_CONDITIONS);
        let once = mapping.ablate_condition(field).unwrap();
        let twice = once.ablate_condition(field).unwrap();
        let constant = once
            .entries()
            .windows(2)
            .all(|w| w[0].conditions[field].to_bits() == w[1].conditions[field].to_bits());
        let others = once.offsets() == mapping.offsets()
            && once.entries().iter().zip(mapping.entries()).all(|(a, b)| {
                a.image_id == b.image_id
                    && a.u == b.u
                    && a.v == b.v
                    && a.depth.to_bits() == b.depth.to_bits()
                    && (0..N_CONDITIONS)
                        .filter(|&f| f != field)
                        .all(|f| a.conditions[f].to_bits() == b.conditions[f].to_bits())
            });
        ablation_ok += (same_bits(&once, &twice) && constant && others) as usize;
    }
    let ok = grouping_ok == 200 && ablation_ok == 200;
    report(
        9,
        "store oracle equivalence",
        ok,
        format!("views_of matches naive grouping {grouping_ok}/200, ablation idempotent and isolated {ablation_ok}/200"),
    );
    assert!(ok);
}
