//! CSR store of point-image mappings.
//!
//! Entries of point `p` occupy `entries[offsets[p]..offsets[p + 1]]`, ordered
//! by strictly increasing image id.
//!
//! Binary layout (`MVMP`, all little-endian):
//!
//! | field   | type            |
//! |---------|-----------------|
//! | magic   | `b"MVMP"`       |
//! | version | `u32` (= 1)     |
//! | N       | `u64` points    |
//! | E       | `u64` entries   |
//! | offsets | `u64 x (N + 1)` |
//! | entries | `E x 44 bytes`: `image_id u32, u u16, v u16, depth f32, conditions 8 x f32` |

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::geometry::N_CONDITIONS;

pub const MAGIC: &[u8; 4] = b"MVMP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_BYTES: usize = 4 + 4 + 8 + 8;
const ENTRY_BYTES: usize = 4 + 2 + 2 + 4 + 4 * N_CONDITIONS;

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("point {point} is mapped twice in image {image_id}")]
    DuplicatePair { point: u32, image_id: u32 },
    #[error("point {point} out of range for {n_points} points")]
    OutOfRange { point: usize, n_points: usize },
    #[error("condition index {0} out of range")]
    FieldOutOfRange(usize),
    #[error("pixel ({u}, {v}) does not fit 16 bits")]
    PixelOverflow { u: u32, v: u32 },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    VersionMismatch(u32),
    #[error("file truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("store invariant violated: {0}")]
    InvariantViolation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingEntry {
    pub image_id: u32,
    pub u: u16,
    pub v: u16,
    pub depth: f32,
    pub conditions: [f32; N_CONDITIONS],
}

/// One image's entries, as produced by visibility plus descriptors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageEntries {
    pub image_id: u32,
    pub entries: Vec<PointEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointEntry {
    pub point_id: u32,
    pub u: u32,
    pub v: u32,
    pub depth: f32,
    pub conditions: [f32; N_CONDITIONS],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultiViewMapping {
    offsets: Vec<u64>,
    entries: Vec<MappingEntry>,
}

impl MultiViewMapping {
    /// Empty store for `n_points` points.
    pub fn empty(n_points: usize) -> Self {
        Self {
            offsets: vec![0; n_points + 1],
            entries: Vec::new(),
        }
    }

    /// Regroups per-image entries by point.
    pub fn build(n_points: usize, images: &[ImageEntries]) -> Result<Self, MappingError> {
        let mut counts = vec![0u64; n_points + 1];
        for img in images {
            for e in &img.entries {
                let p = e.point_id as usize;
                if p >= n_points {
                    return Err(MappingError::OutOfRange {
                        point: p,
                        n_points,
                    });
                }
                if e.u > u16::MAX as u32 || e.v > u16::MAX as u32 {
                    return Err(MappingError::PixelOverflow { u: e.u, v: e.v });
                }
                counts[p + 1] += 1;
            }
        }
        for p in 0..n_points {
            counts[p + 1] += counts[p];
        }
        let total = counts[n_points] as usize;
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.sort_by_key(|&i| images[i].image_id);
        let mut fill = counts.clone();
        let placeholder = MappingEntry {
            image_id: 0,
            u: 0,
            v: 0,
            depth: 0.0,
            conditions: [0.0; N_CONDITIONS],
        };
        let mut entries = vec![placeholder; total];
        // images visited by ascending id, so every slice comes out sorted
        for &i in &order {
            let img = &images[i];
            for e in &img.entries {
                let p = e.point_id as usize;
                let slot = fill[p] as usize;
                if slot > counts[p] as usize && entries[slot - 1].image_id == img.image_id {
                    return Err(MappingError::DuplicatePair {
                        point: e.point_id,
                        image_id: img.image_id,
                    });
                }
                entries[slot] = MappingEntry {
                    image_id: img.image_id,
                    u: e.u as u16,
                    v: e.v as u16,
                    depth: e.depth,
                    conditions: e.conditions,
                };
                fill[p] += 1;
            }
        }
        Ok(Self {
            offsets: counts,
            entries,
        })
    }

    pub fn n_points(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn entries(&self) -> &[MappingEntry] {
        &self.entries
    }

    /// The views of point `p`.
    pub fn views_of(&self, p: usize) -> Result<&[MappingEntry], MappingError> {
        if p >= self.n_points() {
            return Err(MappingError::OutOfRange {
                point: p,
                n_points: self.n_points(),
            });
        }
        Ok(&self.entries[self.offsets[p] as usize..self.offsets[p + 1] as usize])
    }

    /// `(point_id, entry)` pairs in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, &MappingEntry)> + '_ {
        (0..self.n_points()).flat_map(move |p| {
            self.entries[self.offsets[p] as usize..self.offsets[p + 1] as usize]
                .iter()
                .map(move |e| (p as u32, e))
        })
    }

    /// Distinct image ids present in the store, ascending.
    pub fn image_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.entries.iter().map(|e| e.image_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Mean number of views over points seen at least once.
    pub fn mean_views_per_seen_point(&self) -> f64 {
        let seen = self.offsets.windows(2).filter(|w| w[1] > w[0]).count();
        if seen == 0 {
            0.0
        } else {
            self.entries.len() as f64 / seen as f64
        }
    }

    /// Keeps entries matching `keep`, preserving order.
    pub fn retain(&self, mut keep: impl FnMut(u32, &MappingEntry) -> bool) -> Self {
        let mut offsets = Vec::with_capacity(self.offsets.len());
        let mut entries = Vec::new();
        offsets.push(0);
        for p in 0..self.n_points() {
            for e in &self.entries[self.offsets[p] as usize..self.offsets[p + 1] as usize] {
                if keep(p as u32, e) {
                    entries.push(*e);
                }
            }
            offsets.push(entries.len() as u64);
        }
        Self { offsets, entries }
    }

    /// Drops entries farther than `d_max`.
    pub fn filter_by_depth(&self, d_max: f64) -> Self {
        self.retain(|_, e| (e.depth as f64) <= d_max)
    }

    /// Restricts to the given images.
    pub fn filter_images(&self, images: &[u32]) -> Self {
        let keep: HashSet<u32> = images.iter().copied().collect();
        self.retain(|_, e| keep.contains(&e.image_id))
    }

    /// Replaces one descriptor column by its mean over all entries.
    pub fn ablate_condition(&self, field: usize) -> Result<Self, MappingError> {
        if field >= N_CONDITIONS {
            return Err(MappingError::FieldOutOfRange(field));
        }
        let mut out = self.clone();
        if self.entries.is_empty() {
            return Ok(out);
        }
        let sum: f64 = self.entries.iter().map(|e| e.conditions[field] as f64).sum();
        let mean = (sum / self.entries.len() as f64) as f32;
        for e in &mut out.entries {
            e.conditions[field] = mean;
        }
        Ok(out)
    }

    /// Checks all CSR invariants.
    pub fn validate(&self) -> Result<(), MappingError> {
        let bad = |m: String| Err(MappingError::InvariantViolation(m));
        if self.offsets.first() != Some(&0) {
            return bad("offsets[0] != 0".into());
        }
        if *self.offsets.last().unwrap() != self.entries.len() as u64 {
            return bad(format!(
                "offsets[N] = {} but E = {}",
                self.offsets.last().unwrap(),
                self.entries.len()
            ));
        }
        for (p, w) in self.offsets.windows(2).enumerate() {
            if w[1] < w[0] {
                return bad(format!("offsets decrease at point {p}"));
            }
            let slice = &self.entries[w[0] as usize..w[1] as usize];
            if slice.windows(2).any(|e| e[1].image_id <= e[0].image_id) {
                return bad(format!("image ids of point {p} not strictly increasing"));
            }
        }
        if let Some(e) = self
            .entries
            .iter()
            .find(|e| !(e.depth.is_finite() && e.depth >= 0.0))
        {
            return bad(format!("invalid depth {}", e.depth));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            HEADER_BYTES + 8 * self.offsets.len() + ENTRY_BYTES * self.entries.len(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_points() as u64).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for o in &self.offsets {
            out.extend_from_slice(&o.to_le_bytes());
        }
        for e in &self.entries {
            out.extend_from_slice(&e.image_id.to_le_bytes());
            out.extend_from_slice(&e.u.to_le_bytes());
            out.extend_from_slice(&e.v.to_le_bytes());
            out.extend_from_slice(&e.depth.to_le_bytes());
            for c in &e.conditions {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    /// Parses and validates a serialized store.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MappingError> {
        let need = |needed: usize| -> Result<(), MappingError> {
            if bytes.len() < needed {
                Err(MappingError::Truncated {
                    needed,
                    have: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(MappingError::BadMagic(magic));
        }
        need(HEADER_BYTES)?;
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(MappingError::VersionMismatch(version));
        }
        let n = u64_at(8);
        let e = u64_at(16);
        let needed = (n as u128 + 1) * 8 + e as u128 * ENTRY_BYTES as u128 + HEADER_BYTES as u128;
        if needed > bytes.len() as u128 {
            return Err(MappingError::Truncated {
                needed: needed.min(usize::MAX as u128) as usize,
                have: bytes.len(),
            });
        }
        if needed < bytes.len() as u128 {
            return Err(MappingError::InvariantViolation(format!(
                "{} trailing bytes",
                bytes.len() as u128 - needed
            )));
        }
        let (n, e) = (n as usize, e as usize);
        let offsets: Vec<u64> = (0..=n).map(|i| u64_at(HEADER_BYTES + 8 * i)).collect();
        let base = HEADER_BYTES + 8 * (n + 1);
        let f32_at = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let entries = (0..e)
            .map(|j| {
                let s = base + j * ENTRY_BYTES;
                let mut conditions = [0.0f32; N_CONDITIONS];
                for (k, c) in conditions.iter_mut().enumerate() {
                    *c = f32_at(s + 12 + 4 * k);
                }
                MappingEntry {
                    image_id: u32_at(s),
                    u: u16::from_le_bytes([bytes[s + 4], bytes[s + 5]]),
                    v: u16::from_le_bytes([bytes[s + 6], bytes[s + 7]]),
                    depth: f32_at(s + 8),
                    conditions,
                }
            })
            .collect();
        let m = Self { offsets, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn serialize(&self, path: impl AsRef<Path>) -> Result<(), MappingError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| MappingError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn deserialize(path: impl AsRef<Path>) -> Result<Self, MappingError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| MappingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
