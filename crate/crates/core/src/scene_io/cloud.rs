use thiserror::Error;

/// Label value for points without a class.
pub const UNLABELED: i32 = -1;

#[derive(Debug, Error, PartialEq)]
pub enum CloudError {
    #[error("point {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("resolution must be positive, got {0}")]
    BadResolution(f64),
    #[error("{channel} channel has {got} values for {expected} points")]
    ChannelLength {
        channel: &'static str,
        got: usize,
        expected: usize,
    },
}

/// Point positions in meters plus optional per-point channels.
///
/// `resolution` is the voxel-grid spacing (typical inter-point distance) used by
/// the splat size and density descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub colors: Option<Vec<[f32; 3]>>,
    pub labels: Option<Vec<i32>>,
    pub resolution: f64,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, resolution: f64) -> Result<Self, CloudError> {
        let cloud = Self {
            positions,
            colors: None,
            labels: None,
            resolution,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn with_colors(mut self, colors: Vec<[f32; 3]>) -> Result<Self, CloudError> {
        self.colors = Some(colors);
        self.validate()?;
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<i32>) -> Result<Self, CloudError> {
        self.labels = Some(labels);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CloudError> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(CloudError::BadResolution(self.resolution));
        }
        if let Some(i) = self
            .positions
            .iter()
            .position(|p| !p.iter().all(|v| v.is_finite()))
        {
            return Err(CloudError::NonFinite(i));
        }
        let n = self.positions.len();
        if let Some(c) = &self.colors {
            if c.len() != n {
                return Err(CloudError::ChannelLength {
                    channel: "color",
                    got: c.len(),
                    expected: n,
                });
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(CloudError::ChannelLength {
                    channel: "label",
                    got: l.len(),
                    expected: n,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Sub-cloud made of the given point ids, channels carried along.
    pub fn select(&self, ids: &[u32]) -> PointCloud {
        PointCloud {
            positions: ids.iter().map(|&i| self.positions[i as usize]).collect(),
            colors: self
                .colors
                .as_ref()
                .map(|c| ids.iter().map(|&i| c[i as usize]).collect()),
            labels: self
                .labels
                .as_ref()
                .map(|l| ids.iter().map(|&i| l[i as usize]).collect()),
            resolution: self.resolution,
        }
    }
}
