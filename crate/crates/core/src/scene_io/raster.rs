use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster {width}x{height}x{channels} needs {expected} values, got {got}")]
    Shape {
        width: u32,
        height: u32,
        channels: u8,
        expected: usize,
        got: usize,
    },
    #[error("unsupported channel count {0}")]
    Channels(u8),
    #[error("image decode error on {path}: {msg}")]
    Decode { path: String, msg: String },
}

/// Row-major float raster with 1 or 3 interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRaster {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<f32>,
}

impl ImageRaster {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<f32>) -> Result<Self, RasterError> {
        if channels != 1 && channels != 3 {
            return Err(RasterError::Channels(channels));
        }
        let expected = width as usize * height as usize * channels as usize;
        if width == 0 || height == 0 || data.len() != expected {
            return Err(RasterError::Shape {
                width,
                height,
                channels,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, channels: u8, value: f32) -> Result<Self, RasterError> {
        let n = width as usize * height as usize * channels as usize;
        Self::new(width, height, channels, vec![value; n])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, u: u32, v: u32, ch: u8) -> f32 {
        self.data[(v as usize * self.width as usize + u as usize) * self.channels as usize
            + ch as usize]
    }

    pub fn pixel(&self, u: u32, v: u32) -> &[f32] {
        let c = self.channels as usize;
        let i = (v as usize * self.width as usize + u as usize) * c;
        &self.data[i..i + c]
    }

    pub fn pixel_mut(&mut self, u: u32, v: u32) -> &mut [f32] {
        let c = self.channels as usize;
        let i = (v as usize * self.width as usize + u as usize) * c;
        &mut self.data[i..i + c]
    }
}

/// Loads a PNG or JPEG as an RGB raster with values in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRaster, RasterError> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| RasterError::Decode {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    ImageRaster::new(w, h, 3, data)
}

/// 8-bit PNG export. Lossy: values are clamped to `[0, 1]` and quantized;
/// use PFM when exact values matter.
pub fn save_png(path: impl AsRef<Path>, raster: &ImageRaster) -> Result<(), RasterError> {
    let path = path.as_ref();
    let bytes: Vec<u8> = raster
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = if raster.channels == 3 {
        image::ExtendedColorType::Rgb8
    } else {
        image::ExtendedColorType::L8
    };
    image::save_buffer(path, &bytes, raster.width, raster.height, color).map_err(|e| {
        RasterError::Decode {
            path: path.display().to_string(),
            msg: e.to_string(),
        }
    })
}
