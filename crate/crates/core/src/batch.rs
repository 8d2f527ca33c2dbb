//! Dynamic-size image batching: each candidate image is cropped to the
//! smallest allowed window around the sampled points it sees, then images are
//! drawn at random, proportionally to a size/coverage score, until a pixel
//! budget is spent.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::camera::{CameraError, CameraView, Viewport};
use crate::mapping::MultiViewMapping;
use crate::scene_io::{EngineConfig, PointCloud};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("no sampled point is visible in the view")]
    NoVisiblePoints,
    #[error("invalid batch config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchConfig {
    /// Allowed crop sizes (width, height), sorted by ascending area.
    pub crops: Vec<(u32, u32)>,
    pub margin: u32,
    pub budget: u64,
    pub lambda: f64,
    pub max_images: Option<usize>,
    pub seed: u64,
}

impl BatchConfig {
    pub fn new(
        mut crops: Vec<(u32, u32)>,
        margin: u32,
        budget: u64,
        lambda: f64,
        max_images: Option<usize>,
        seed: u64,
    ) -> Result<Self, BatchError> {
        if crops.is_empty() || crops.iter().any(|&(w, h)| w == 0 || h == 0) {
            return Err(BatchError::InvalidConfig("crop sizes must be non-empty".into()));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(BatchError::InvalidConfig(format!("lambda {lambda} must be >= 0")));
        }
        crops.sort_by_key(|&(w, h)| (w as u64 * h as u64, w));
        crops.dedup();
        Ok(Self {
            crops,
            margin,
            budget,
            lambda,
            max_images,
            seed,
        })
    }

    /// Planner settings from the engine config; the default budget is four
    /// images of `full_area` pixels.
    pub fn from_engine(cfg: &EngineConfig, full_area: u64) -> Result<Self, BatchError> {
        Self::new(
            cfg.crops.clone(),
            cfg.margin,
            cfg.budget.unwrap_or(4 * full_area),
            cfg.lambda,
            None,
            cfg.seed,
        )
    }

    pub fn largest_crop(&self) -> (u32, u32) {
        *self.crops.last().expect("validated non-empty")
    }
}

/// Tightest allowed window around `pixels` with `margin` on every side. When no
/// crop is large enough, the largest one is centered on the bounding box.
pub fn crop_image(
    view: &CameraView,
    pixels: &[(u32, u32)],
    config: &BatchConfig,
) -> Result<Viewport, BatchError> {
    let Some(&(u, v)) = pixels.first() else {
        return Err(BatchError::NoVisiblePoints);
    };
    let (mut umin, mut umax, mut vmin, mut vmax) = (u as i64, u as i64, v as i64, v as i64);
    for &(u, v) in pixels {
        umin = umin.min(u as i64);
        umax = umax.max(u as i64);
        vmin = vmin.min(v as i64);
        vmax = vmax.max(v as i64);
    }
    let m = config.margin as i64;
    let need_w = umax - umin + 1 + 2 * m;
    let need_h = vmax - vmin + 1 + 2 * m;
    let fit = config
        .crops
        .iter()
        .find(|&&(w, h)| w as i64 >= need_w && h as i64 >= need_h);
    let (u0, v0, (w, h)) = match fit {
        Some(&(w, h)) => (
            umin - m - (w as i64 - need_w) / 2,
            vmin - m - (h as i64 - need_h) / 2,
            (w, h),
        ),
        None => {
            let (w, h) = config.largest_crop();
            (
                umin + (umax - umin + 1 - w as i64).div_euclid(2),
                vmin + (vmax - vmin + 1 - h as i64).div_euclid(2),
                (w, h),
            )
        }
    };
    Ok(Viewport {
        u0,
        v0,
        width: w,
        height: h,
        rotation_offset: view.rotation_offset(),
    })
}

/// `area / max_area + lambda * unseen / max_unseen`; a zero maximum
/// contributes nothing.
pub fn score_image(area: u64, unseen: usize, max_area: u64, max_unseen: usize, lambda: f64) -> f64 {
    let a = if max_area == 0 {
        0.0
    } else {
        area as f64 / max_area as f64
    };
    let s = if max_unseen == 0 {
        0.0
    } else {
        unseen as f64 / max_unseen as f64
    };
    a + lambda * s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChosenImage {
    pub image_id: u32,
    pub viewport: Viewport,
    pub area: u64,
    /// Sampled points it adds to the batch's coverage when picked.
    pub unseen: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub size: (u32, u32),
    pub image_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchPlan {
    pub chosen: Vec<ChosenImage>,
    pub spent: u64,
    pub buckets: Vec<Bucket>,
}

impl BatchPlan {
    /// One `image_id u0 v0 w h score` record per line, in pick order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for c in &self.chosen {
            let vp = &c.viewport;
            let _ = writeln!(
                out,
                "{} {} {} {} {} {:.6}",
                c.image_id, vp.u0, vp.v0, vp.width, vp.height, c.score
            );
        }
        out
    }
}

/// Candidate image with its window and the sample indices it sees.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub image_id: u32,
    pub viewport: Viewport,
    pub seen: Vec<u32>,
}

impl Candidate {
    pub fn area(&self) -> u64 {
        self.viewport.area()
    }
}

/// Crops every view that sees at least one sampled point. Panoramas are
/// recentered on the sampled points first.
pub fn candidates(
    sample: &[u32],
    cloud: &PointCloud,
    views: &[CameraView],
    mapping: &MultiViewMapping,
    config: &BatchConfig,
) -> Result<Vec<Candidate>, BatchError> {
    let mut per_image: BTreeMap<u32, Vec<(u32, u32, u32)>> = BTreeMap::new();
    for (s, &p) in sample.iter().enumerate() {
        let views_of = mapping
            .views_of(p as usize)
            .map_err(|e| BatchError::InvalidConfig(e.to_string()))?;
        for e in views_of {
            per_image
                .entry(e.image_id)
                .or_default()
                .push((s as u32, e.u as u32, e.v as u32));
        }
    }
    let mut out = Vec::new();
    for view in views {
        let Some(hits) = per_image.get(&view.image_id) else {
            continue;
        };
        let (view, pixels) = if view.model.is_equirectangular() {
            let pts: Vec<[f64; 3]> = hits
                .iter()
                .map(|&(s, _, _)| cloud.positions[sample[s as usize] as usize])
                .collect();
            let centered = view.recenter_equirect(&pts)?;
            let w = view.size().0 as i64;
            let delta = view.column_shift() - centered.column_shift();
            let pixels = hits
                .iter()
                .map(|&(_, u, v)| ((u as i64 + delta).rem_euclid(w) as u32, v))
                .collect::<Vec<_>>();
            (centered, pixels)
        } else {
            (view.clone(), hits.iter().map(|&(_, u, v)| (u, v)).collect())
        };
        out.push(Candidate {
            image_id: view.image_id,
            viewport: crop_image(&view, &pixels, config)?,
            seen: hits.iter().map(|&(s, _, _)| s).collect(),
        });
    }
    Ok(out)
}

/// Budgeted random selection over prepared candidates. `n_sample` is the size
/// of the point sample the candidates' `seen` lists index into.
pub fn select(mut cands: Vec<Candidate>, n_sample: usize, config: &BatchConfig) -> BatchPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut covered = vec![0u64; n_sample.div_ceil(64)];
    let is_covered = |bits: &[u64], s: u32| bits[s as usize / 64] >> (s % 64) & 1 == 1;
    let mut plan = BatchPlan::default();
    let mut remaining = config.budget as i128;
    while remaining > 0
        && !cands.is_empty()
        && config.max_images.map_or(true, |n| plan.chosen.len() < n)
    {
        let unseen: Vec<usize> = cands
            .iter()
            .map(|c| c.seen.iter().filter(|&&s| !is_covered(&covered, s)).count())
            .collect();
        let max_area = cands.iter().map(Candidate::area).max().unwrap_or(0);
        let max_unseen = unseen.iter().copied().max().unwrap_or(0);
        let scores: Vec<f64> = cands
            .iter()
            .zip(&unseen)
            .map(|(c, &n)| score_image(c.area(), n, max_area, max_unseen, config.lambda))
            .collect();
        let total: f64 = scores.iter().filter(|&&s| s > 0.0).sum();
        if !(total > 0.0) {
            break;
        }
        let mut r = rng.gen::<f64>() * total;
        let mut pick = None;
        for (i, &s) in scores.iter().enumerate() {
            if s <= 0.0 {
                continue;
            }
            pick = Some(i);
            if r < s {
                break;
            }
            r -= s;
        }
        let i = pick.expect("positive total");
        let c = cands.remove(i);
        for &s in &c.seen {
            covered[s as usize / 64] |= 1 << (s % 64);
        }
        remaining -= c.area() as i128;
        plan.spent += c.area();
        plan.chosen.push(ChosenImage {
            image_id: c.image_id,
            viewport: c.viewport,
            area: c.area(),
            unseen: unseen[i],
            score: scores[i],
        });
    }
    let mut buckets: BTreeMap<(u32, u32), Vec<u32>> = BTreeMap::new();
    for c in &plan.chosen {
        buckets
            .entry((c.viewport.width, c.viewport.height))
            .or_default()
            .push(c.image_id);
    }
    plan.buckets = buckets
        .into_iter()
        .map(|(size, image_ids)| Bucket { size, image_ids })
        .collect();
    plan
}

/// Plans one batch for the point sample `sample`.
pub fn plan_batch(
    sample: &[u32],
    cloud: &PointCloud,
    views: &[CameraView],
    mapping: &MultiViewMapping,
    config: &BatchConfig,
) -> Result<BatchPlan, BatchError> {
    let cands = candidates(sample, cloud, views, mapping, config)?;
    Ok(select(cands, sample.len(), config))
}
