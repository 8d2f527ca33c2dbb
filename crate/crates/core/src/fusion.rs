//! Early and late fusion of pooled image features with 3D features, and a
//! small trainable stack that learns texture-defined classes end to end.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{
    backward, forward_train, init_params, AggregationError, AggregationParams, Activation, Linear,
    Mlp, PooledFeatures, ViewBatch,
};
use crate::geometry::N_CONDITIONS;
use crate::pipeline::{compute_mapping, MappingParams, PipelineError};
use crate::scene_io::ImageRaster;
use crate::synth::{textured_room, TexturedRoomSpec};
use crate::visibility::SplatParams;

/// Width of the per-pixel descriptor: RGB, 3x3 mean RGB, 9x9 mean RGB.
pub const PIXEL_DESCRIPTOR: usize = 9;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid toy config: {0}")]
    Config(String),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Per-point `[3D features, pooled image features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures {
    pub width3: usize,
    pub c: usize,
    /// `N x (width3 + c)`.
    pub data: Vec<f64>,
    pub seen: Vec<bool>,
}

impl FusedFeatures {
    pub fn width(&self) -> usize {
        self.width3 + self.c
    }

    pub fn n_points(&self) -> usize {
        self.seen.len()
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.width()..(p + 1) * self.width()]
    }

    pub fn features3(&self, p: usize) -> &[f64] {
        &self.row(p)[..self.width3]
    }

    pub fn image_part(&self, p: usize) -> &[f64] {
        &self.row(p)[self.width3..]
    }
}

fn concat(f3: &[f64], width3: usize, pooled: &PooledFeatures<f64>) -> Result<FusedFeatures, FusionError> {
    let n = pooled.n_points();
    if f3.len() != n * width3 {
        return Err(FusionError::LengthMismatch(format!(
            "{} 3D values for {n} points of width {width3}",
            f3.len()
        )));
    }
    let c = pooled.c;
    let mut data = Vec::with_capacity(n * (width3 + c));
    for p in 0..n {
        data.extend_from_slice(&f3[p * width3..(p + 1) * width3]);
        data.extend_from_slice(pooled.point(p));
    }
    Ok(FusedFeatures {
        width3,
        c,
        data,
        seen: pooled.seen.clone(),
    })
}

/// Concatenation of raw 3D features with pooled image features, feeding the
/// point encoder.
pub fn early_fuse(f3: &[f64], width3: usize, pooled: &PooledFeatures<f64>) -> Result<FusedFeatures, FusionError> {
    concat(f3, width3, pooled)
}

/// Concatenation of encoded 3D features with pooled image features, feeding
/// the classifier.
pub fn late_fuse(
    decoded: &[f64],
    width: usize,
    pooled: &PooledFeatures<f64>,
) -> Result<FusedFeatures, FusionError> {
    concat(decoded, width, pooled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    XyzOnly,
    Early,
    Late,
    ImageOnly,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::XyzOnly,
        FusionMode::Early,
        FusionMode::Late,
        FusionMode::ImageOnly,
    ];

    pub fn uses_images(self) -> bool {
        self != FusionMode::XyzOnly
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::XyzOnly => "xyz-only",
            FusionMode::Early => "early",
            FusionMode::Late => "late",
            FusionMode::ImageOnly => "image-only",
        })
    }
}

impl FromStr for FusionMode {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| FusionError::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub scene: TexturedRoomSpec,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Image feature width.
    pub channels: usize,
    pub blocks: usize,
    pub embedding: usize,
    /// Hidden width of the pixel extractor and point encoder.
    pub hidden: usize,
    /// Point encoder output width.
    pub encoder_out: usize,
    pub knn_k: usize,
    pub r_max: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            scene: TexturedRoomSpec::default(),
            epochs: 200,
            lr: 0.05,
            seed: 0,
            channels: 16,
            blocks: 4,
            embedding: 8,
            hidden: 32,
            encoder_out: 32,
            knn_k: 16,
            r_max: SplatParams::INDOOR_R_MAX,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: &str| Err(FusionError::Config(m.to_string()));
        if self.scene.n_classes < 2 {
            return bad("at least two classes are needed");
        }
        if self.scene.n_cameras == 0 {
            return bad("at least one camera is needed");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("learning rate must be positive");
        }
        if self.channels == 0 || self.blocks == 0 || self.channels % self.blocks != 0 {
            return bad("channels must be a positive multiple of blocks");
        }
        if self.embedding == 0 || self.hidden == 0 || self.encoder_out == 0 {
            return bad("layer widths must be positive");
        }
        if !(self.scene.resolution > 0.0) || !(self.scene.tile > 0.0) {
            return bad("resolution and tile size must be positive");
        }
        Ok(())
    }
}

/// Mean of a `(2r+1)^2` window per pixel and channel, clipped at the borders.
pub fn box_mean(img: &ImageRaster, radius: u32) -> Vec<f32> {
    let (w, h, ch) = (img.width() as usize, img.height() as usize, img.channels() as usize);
    let stride = w + 1;
    let mut integral = vec![0.0f64; (w + 1) * (h + 1) * ch];
    for v in 0..h {
        for u in 0..w {
            for c in 0..ch {
                let at = |uu: usize, vv: usize| (vv * stride + uu) * ch + c;
                integral[at(u + 1, v + 1)] = img.get(u as u32, v as u32, c as u8) as f64
                    + integral[at(u, v + 1)]
                    + integral[at(u + 1, v)]
                    - integral[at(u, v)];
            }
        }
    }
    let r = radius as usize;
    let mut out = vec![0.0f32; w * h * ch];
    for v in 0..h {
        let (v0, v1) = (v.saturating_sub(r), (v + r + 1).min(h));
        for u in 0..w {
            let (u0, u1) = (u.saturating_sub(r), (u + r + 1).min(w));
            let area = ((v1 - v0) * (u1 - u0)) as f64;
            for c in 0..ch {
                let at = |uu: usize, vv: usize| (vv * stride + uu) * ch + c;
                let s = integral[at(u1, v1)] - integral[at(u0, v1)] - integral[at(u1, v0)]
                    + integral[at(u0, v0)];
                out[(v * w + u) * ch + c] = (s / area) as f32;
            }
        }
    }
    out
}

/// Prepared scene: labels, normalized coordinates, and per-view pixel
/// descriptors and conditions laid out like an aggregation batch.
#[derive(Debug, Clone)]
pub struct ToyData {
    pub n_classes: usize,
    pub labels: Vec<usize>,
    /// `N x 3`, scaled into `[-1, 1]`.
    pub xyz: Vec<f64>,
    /// `E x 9`, standardized per column.
    pub descriptors: Vec<f64>,
    /// Batch skeleton carrying offsets, image ids and standardized conditions.
    pub batch: ViewBatch<f64>,
}

impl ToyData {
    pub fn build(config: &ToyConfig) -> Result<Self, FusionError> {
        config.validate()?;
        let room = textured_room(&config.scene);
        let cloud = &room.cloud;
        let splat = SplatParams::new(cloud.resolution, 1.0, config.r_max)
            .map_err(|e| FusionError::Config(e.to_string()))?;
        let mut params = MappingParams::new(splat);
        params.knn_k = config.knn_k;
        let (mapping, _) = compute_mapping(cloud, &room.views, &params)?;

        let maps: Vec<[Vec<f32>; 2]> = room
            .images
            .iter()
            .map(|img| [box_mean(img, 1), box_mean(img, 4)])
            .collect();
        let width = |id: u32| room.images[id as usize].width() as usize;
        let mut descriptors = Vec::with_capacity(mapping.n_entries() * PIXEL_DESCRIPTOR);
        let batch = ViewBatch::from_mapping(&mapping, 1, None, |_, e, _| {
            let img = &room.images[e.image_id as usize];
            let at = (e.v as usize * width(e.image_id) + e.u as usize) * 3;
            descriptors.extend(img.pixel(e.u as u32, e.v as u32).iter().map(|&x| x as f64));
            for m in &maps[e.image_id as usize] {
                descriptors.extend(m[at..at + 3].iter().map(|&x| x as f64));
            }
        });

        let e = batch.n_entries();
        let mut conditions = batch.conditions().to_vec();
        standardize_columns(&mut conditions, N_CONDITIONS);
        standardize_columns(&mut descriptors, PIXEL_DESCRIPTOR);
        let batch = ViewBatch::new(
            config.channels,
            N_CONDITIONS,
            batch.offsets().to_vec(),
            batch.image_ids().to_vec(),
            vec![0.0; e * config.channels],
            conditions,
        )?;

        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &cloud.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let xyz = cloud
            .positions
            .iter()
            .flat_map(|p| {
                (0..3).map(move |a| {
                    let half = 0.5 * (hi[a] - lo[a]);
                    if half > 0.0 {
                        (p[a] - 0.5 * (lo[a] + hi[a])) / half
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        let labels = cloud
            .labels
            .as_ref()
            .expect("generator labels points")
            .iter()
            .map(|&l| l as usize)
            .collect();
        Ok(Self {
            n_classes: room.n_classes,
            labels,
            xyz,
            descriptors,
            batch,
        })
    }

    pub fn n_points(&self) -> usize {
        self.labels.len()
    }
}

/// Rescales each column of a row-major `rows x width` table to zero mean and
/// unit variance; constant columns are only centered.
fn standardize_columns(table: &mut [f64], width: usize) {
    let rows = table.len() / width.max(1);
    let n = rows.max(1) as f64;
    for j in 0..width {
        let mean = (0..rows).map(|i| table[i * width + j]).sum::<f64>() / n;
        let var = (0..rows).map(|i| (table[i * width + j] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 1e-12 { var.sqrt() } else { 1.0 };
        for i in 0..rows {
            table[i * width + j] = (table[i * width + j] - mean) / sd;
        }
    }
}

/// Weight scale keeping activation variance through rectified layers.
const RELU_GAIN: f64 = 2.449_489_742_783_178;

/// Pixel extractor, aggregation head, point encoder and linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub mode: FusionMode,
    pub extractor: Mlp<f64>,
    pub aggregation: AggregationParams<f64>,
    pub encoder: Mlp<f64>,
    pub classifier: Linear<f64>,
}

/// Gradients with the same layout as [`ToyModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGrads {
    pub extractor: Mlp<f64>,
    pub aggregation: AggregationParams<f64>,
    pub encoder: Mlp<f64>,
    pub classifier: Linear<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyReport {
    pub mode: FusionMode,
    /// Accuracy of the trained model.
    pub accuracy: f64,
    pub final_loss: f64,
    /// Loss and accuracy before each update.
    pub records: Vec<EpochRecord>,
}

impl ToyReport {
    /// One JSON record per line.
    pub fn metrics_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }
}

impl ToyModel {
    pub fn new(config: &ToyConfig, n_classes: usize, mode: FusionMode) -> Result<Self, FusionError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        let act = Activation::default();
        let c = config.channels;
        let (enc_in, cls_in) = match mode {
            FusionMode::XyzOnly => (3, config.encoder_out),
            FusionMode::Early => (3 + c, config.encoder_out),
            FusionMode::Late => (3, config.encoder_out + c),
            FusionMode::ImageOnly => (c, config.encoder_out),
        };
        Ok(Self {
            mode,
            extractor: Mlp::random_scaled(PIXEL_DESCRIPTOR, config.hidden, c, RELU_GAIN, act, &mut rng),
            aggregation: init_params(c, config.blocks, config.embedding, config.seed)?,
            encoder: Mlp::random_scaled(enc_in, config.hidden, config.encoder_out, RELU_GAIN, act, &mut rng),
            classifier: Linear::random(cls_in, n_classes, &mut rng),
        })
    }

    fn zero_grads(&self) -> ToyGrads {
        ToyGrads {
            extractor: self.extractor.zeros_like(),
            aggregation: self.aggregation.zeros_like(),
            encoder: self.encoder.zeros_like(),
            classifier: Linear::zeros(self.classifier.inp, self.classifier.out),
        }
    }

    /// Mean cross-entropy, accuracy and gradients over all labeled points.
    pub fn evaluate(&self, data: &ToyData) -> Result<(f64, f64, ToyGrads), FusionError> {
        let n = data.n_points();
        let e = data.batch.n_entries();
        let c = self.aggregation.c();
        let hx = self.extractor.hidden();
        let mut grads = self.zero_grads();

        let mut ext_h = vec![0.0; e * hx];
        let mut batch = data.batch.clone();
        let pooled_cache = if self.mode.uses_images() {
            let feats = batch.features_mut();
            for i in 0..e {
                self.extractor.forward(
                    &data.descriptors[i * PIXEL_DESCRIPTOR..(i + 1) * PIXEL_DESCRIPTOR],
                    &mut ext_h[i * hx..(i + 1) * hx],
                    &mut feats[i * c..(i + 1) * c],
                );
            }
            Some(forward_train(&batch, &self.aggregation)?)
        } else {
            None
        };
        let pooled = pooled_cache.as_ref().map(|(p, _)| p);

        let enc_in = self.encoder.inp();
        let he = self.encoder.hidden();
        let eo = self.encoder.out();
        let k = self.classifier.out;
        let mut enc_x = vec![0.0; n * enc_in];
        for p in 0..n {
            let row = &mut enc_x[p * enc_in..(p + 1) * enc_in];
            match self.mode {
                FusionMode::XyzOnly | FusionMode::Late => {
                    row.copy_from_slice(&data.xyz[p * 3..(p + 1) * 3])
                }
                FusionMode::Early => {
                    row[..3].copy_from_slice(&data.xyz[p * 3..(p + 1) * 3]);
                    row[3..].copy_from_slice(pooled.unwrap().point(p));
                }
                FusionMode::ImageOnly => row.copy_from_slice(pooled.unwrap().point(p)),
            }
        }
        let mut enc_h = vec![0.0; n * he];
        let mut enc_y = vec![0.0; n * eo];
        for p in 0..n {
            self.encoder.forward(
                &enc_x[p * enc_in..(p + 1) * enc_in],
                &mut enc_h[p * he..(p + 1) * he],
                &mut enc_y[p * eo..(p + 1) * eo],
            );
        }
        let cls_x = match self.mode {
            FusionMode::Late => late_fuse(&enc_y, eo, pooled.unwrap())?.data,
            _ => enc_y,
        };
        let ci = self.classifier.inp;

        let mut loss = 0.0;
        let mut correct = 0usize;
        let mut logits = vec![0.0; k];
        let mut d_cls_x = vec![0.0; n * ci];
        let inv_n = 1.0 / n.max(1) as f64;
        for p in 0..n {
            let x = &cls_x[p * ci..(p + 1) * ci];
            self.classifier.forward(x, &mut logits);
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
            let label = data.labels[p];
            loss += (z.ln() + top - logits[label]) * inv_n;
            let pred = (0..k).fold(0, |b, j| if logits[j] > logits[b] { j } else { b });
            correct += (pred == label) as usize;
            let dl: Vec<f64> = (0..k)
                .map(|j| ((logits[j] - top).exp() / z - (j == label) as u8 as f64) * inv_n)
                .collect();
            self.classifier.backward(
                x,
                &dl,
                &mut grads.classifier,
                Some(&mut d_cls_x[p * ci..(p + 1) * ci]),
            );
        }

        let mut d_pooled = vec![0.0; n * c];
        let mut d_enc_x = vec![0.0; enc_in];
        for p in 0..n {
            let d_cls = &d_cls_x[p * ci..(p + 1) * ci];
            if self.mode == FusionMode::Late {
                d_pooled[p * c..(p + 1) * c].copy_from_slice(&d_cls[eo..]);
            }
            d_enc_x.iter_mut().for_each(|v| *v = 0.0);
            self.encoder.backward(
                &enc_x[p * enc_in..(p + 1) * enc_in],
                &enc_h[p * he..(p + 1) * he],
                &d_cls[..eo],
                &mut grads.encoder,
                Some(&mut d_enc_x),
            );
            match self.mode {
                FusionMode::Early => d_pooled[p * c..(p + 1) * c].copy_from_slice(&d_enc_x[3..]),
                FusionMode::ImageOnly => d_pooled[p * c..(p + 1) * c].copy_from_slice(&d_enc_x),
                _ => {}
            }
        }

        if let Some((_, cache)) = &pooled_cache {
            let g = backward(&batch, &self.aggregation, cache, &d_pooled)?;
            grads.aggregation = g.params;
            for i in 0..e {
                self.extractor.backward(
                    &data.descriptors[i * PIXEL_DESCRIPTOR..(i + 1) * PIXEL_DESCRIPTOR],
                    &ext_h[i * hx..(i + 1) * hx],
                    &g.features[i * c..(i + 1) * c],
                    &mut grads.extractor,
                    None,
                );
            }
        }
        Ok((loss, correct as f64 * inv_n, grads))
    }

    /// Plain gradient step.
    pub fn step(&mut self, grads: &ToyGrads, lr: f64) {
        let upd = |a: &mut Vec<f64>, g: &Vec<f64>| {
            for (x, d) in a.iter_mut().zip(g) {
                *x -= lr * d;
            }
        };
        for (a, g) in self.extractor.tensors_mut().into_iter().zip(grads.extractor.tensors()) {
            upd(a, g);
        }
        for (a, g) in self.encoder.tensors_mut().into_iter().zip(grads.encoder.tensors()) {
            upd(a, g);
        }
        upd(&mut self.classifier.weight, &grads.classifier.weight);
        upd(&mut self.classifier.bias, &grads.classifier.bias);
        self.aggregation.add_scaled(&grads.aggregation, -lr);
    }

    /// Full-batch gradient descent for `epochs` steps.
    pub fn train(&mut self, data: &ToyData, epochs: usize, lr: f64) -> Result<ToyReport, FusionError> {
        let mut records = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let (loss, accuracy, grads) = self.evaluate(data)?;
            records.push(EpochRecord {
                epoch,
                loss,
                accuracy,
            });
            self.step(&grads, lr);
        }
        let (final_loss, accuracy, _) = self.evaluate(data)?;
        Ok(ToyReport {
            mode: self.mode,
            accuracy,
            final_loss,
            records,
        })
    }
}

/// Builds the scene and trains one model in `mode`.
pub fn train_toy(config: &ToyConfig, mode: FusionMode) -> Result<ToyReport, FusionError> {
    let data = ToyData::build(config)?;
    train_on(&data, config, mode)
}

/// Trains one model in `mode` on prepared data.
pub fn train_on(data: &ToyData, config: &ToyConfig, mode: FusionMode) -> Result<ToyReport, FusionError> {
    let mut model = ToyModel::new(config, data.n_classes, mode)?;
    model.train(data, config.epochs, config.lr)
}
