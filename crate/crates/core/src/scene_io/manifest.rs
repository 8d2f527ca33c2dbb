//! Pose manifests: one camera per line,
//!
//! ```text
//! <id> <raster-path|-> PINHOLE fx fy cx cy W H  R00 R01 R02 R10 .. R22  t0 t1 t2
//! <id> <raster-path|-> EQUIRECT W H             R00 R01 R02 R10 .. R22  t0 t1 t2
//! ```
//!
//! `R` (row-major) and `t` form the camera-to-world pose. Blank lines and lines
//! starting with `#` are ignored. Relative raster paths resolve against the
//! manifest's directory.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::camera::{rotation_deviation, CameraError, CameraModel, CameraView, Pose};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("line {line}: rotation of image {id} is not a proper rotation (deviation {deviation:e})")]
    BadRotation { line: usize, id: u32, deviation: f64 },
    #[error("line {line}: duplicate image id {id}")]
    DuplicateId { line: usize, id: u32 },
    #[error("line {line}: unknown camera model {model:?}")]
    UnknownModel { line: usize, model: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {source}")]
    Camera {
        line: usize,
        #[source]
        source: CameraError,
    },
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEntry {
    pub image_id: u32,
    pub raster: Option<PathBuf>,
    pub model: CameraModel,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseEntry {
    pub fn view(&self) -> CameraView {
        CameraView::new(
            self.image_id,
            self.model,
            Pose {
                rotation: self.rotation,
                position: self.translation,
            },
        )
        .expect("validated on load")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseManifest {
    pub entries: Vec<PoseEntry>,
}

impl PoseManifest {
    pub fn views(&self) -> Vec<CameraView> {
        self.entries.iter().map(PoseEntry::view).collect()
    }

    pub fn get(&self, image_id: u32) -> Option<&PoseEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self, ManifestError> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let tokens: Vec<&str> = raw.split_whitespace().collect();
            let entry = parse_line(line, &tokens, base_dir)?;
            if !seen.insert(entry.image_id) {
                return Err(ManifestError::DuplicateId {
                    line,
                    id: entry.image_id,
                });
            }
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let path = e
                .raster
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "-".into());
            let _ = write!(s, "{} {}", e.image_id, path);
            match e.model {
                CameraModel::Pinhole {
                    fx,
                    fy,
                    cx,
                    cy,
                    width,
                    height,
                } => {
                    let _ = write!(s, " PINHOLE {fx} {fy} {cx} {cy} {width} {height}");
                }
                CameraModel::Equirectangular { width, height } => {
                    let _ = write!(s, " EQUIRECT {width} {height}");
                }
            }
            for r in 0..3 {
                for c in 0..3 {
                    let _ = write!(s, " {}", e.rotation[(r, c)]);
                }
            }
            for t in e.translation.iter() {
                let _ = write!(s, " {t}");
            }
            s.push('\n');
        }
        s
    }
}

fn parse_line(
    line: usize,
    tokens: &[&str],
    base_dir: Option<&Path>,
) -> Result<PoseEntry, ManifestError> {
    let parse_err = |msg: String| ManifestError::Parse { line, msg };
    if tokens.len() < 3 {
        return Err(parse_err(format!("expected at least 3 fields, got {}", tokens.len())));
    }
    let image_id: u32 = tokens[0]
        .parse()
        .map_err(|_| parse_err(format!("bad image id {:?}", tokens[0])))?;
    let raster = match tokens[1] {
        "-" => None,
        p => {
            let p = PathBuf::from(p);
            Some(match base_dir {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p,
            })
        }
    };
    let (n_params, rest_at) = match tokens[2] {
        "PINHOLE" => (6, 3),
        "EQUIRECT" => (2, 3),
        other => {
            return Err(ManifestError::UnknownModel {
                line,
                model: other.to_string(),
            })
        }
    };
    let numbers: Vec<f64> = tokens[rest_at..]
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| parse_err(format!("bad number {t:?}")))
        })
        .collect::<Result<_, _>>()?;
    if numbers.len() != n_params + 12 {
        return Err(parse_err(format!(
            "expected {} numeric fields, got {}",
            n_params + 12,
            numbers.len()
        )));
    }
    let dim = |v: f64| -> Result<u32, ManifestError> {
        if v.fract() == 0.0 && v >= 1.0 && v <= u32::MAX as f64 {
            Ok(v as u32)
        } else {
            Err(parse_err(format!("bad raster dimension {v}")))
        }
    };
    let model = if n_params == 6 {
        CameraModel::Pinhole {
            fx: numbers[0],
            fy: numbers[1],
            cx: numbers[2],
            cy: numbers[3],
            width: dim(numbers[4])?,
            height: dim(numbers[5])?,
        }
    } else {
        CameraModel::Equirectangular {
            width: dim(numbers[0])?,
            height: dim(numbers[1])?,
        }
    };
    model
        .validate()
        .map_err(|source| ManifestError::Camera { line, source })?;
    let r = &numbers[n_params..n_params + 9];
    let rotation = Matrix3::from_row_slice(r);
    let deviation = rotation_deviation(&rotation);
    if !(deviation <= crate::camera::ROTATION_TOLERANCE) {
        return Err(ManifestError::BadRotation {
            line,
            id: image_id,
            deviation,
        });
    }
    let t = &numbers[n_params + 9..];
    let translation = Vector3::new(t[0], t[1], t[2]);
    if !translation.iter().all(|v| v.is_finite()) {
        return Err(parse_err("non-finite translation".into()));
    }
    Ok(PoseEntry {
        image_id,
        raster,
        model,
        rotation,
        translation,
    })
}

pub fn read_pose_manifest(path: impl AsRef<Path>) -> Result<PoseManifest, ManifestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    PoseManifest::parse(&text, path.parent())
}

pub fn write_pose_manifest(
    path: impl AsRef<Path>,
    manifest: &PoseManifest,
) -> Result<(), ManifestError> {
    let path = path.as_ref();
    fs::write(path, manifest.to_text()).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const IDENTITY: &str = "1 0 0 0 1 0 0 0 1";

    #[test]
    fn identity_pinhole_entry() {
        let text = format!("3 img.png PINHOLE 100 100 64 64 128 128 {IDENTITY} 0 0 0\n");
        let m = PoseManifest::parse(&text, Some(Path::new("/data"))).unwrap();
        assert_eq!(m.entries.len(), 1);
        let e = &m.entries[0];
        assert_eq!(e.image_id, 3);
        assert_eq!(e.raster.as_deref(), Some(Path::new("/data/img.png")));
        assert_eq!(e.rotation, Matrix3::identity());
        assert_eq!(e.view().size(), (128, 128));
    }

    #[test]
    fn scaled_rotation_is_rejected() {
        let text = "0 - PINHOLE 100 100 64 64 128 128 2 0 0 0 2 0 0 0 2 0 0 0\n";
        assert!(matches!(
            PoseManifest::parse(text, None),
            Err(ManifestError::BadRotation { id: 0, .. })
        ));
        // reflection: orthonormal but det = -1
        let text = "0 - EQUIRECT 64 32 -1 0 0 0 1 0 0 0 1 0 0 0\n";
        assert!(matches!(
            PoseManifest::parse(text, None),
            Err(ManifestError::BadRotation { .. })
        ));
    }

    #[test]
    fn duplicate_and_unknown() {
        let text = format!(
            "7 - EQUIRECT 64 32 {IDENTITY} 0 0 0\n# comment\n\n7 - EQUIRECT 64 32 {IDENTITY} 1 0 0\n"
        );
        assert!(matches!(
            PoseManifest::parse(&text, None),
            Err(ManifestError::DuplicateId { line: 4, id: 7 })
        ));
        let text = format!("1 - FISHEYE 64 32 {IDENTITY} 0 0 0\n");
        assert!(matches!(
            PoseManifest::parse(&text, None),
            Err(ManifestError::UnknownModel { .. })
        ));
        let text = format!("1 - PINHOLE 100 100 64 64 128 {IDENTITY} 0 0 0\n");
        assert!(matches!(
            PoseManifest::parse(&text, None),
            Err(ManifestError::Parse { .. })
        ));
        let text = format!("1 - PINHOLE 100 100 200 64 128 128 {IDENTITY} 0 0 0\n");
        assert!(matches!(
            PoseManifest::parse(&text, None),
            Err(ManifestError::Camera { .. })
        ));
    }

    #[test]
    fn text_round_trip() {
        let pose = Pose::look_at(
            Vector3::new(0.1, 0.2, 0.3),
            Vector3::new(1.0, -2.0, 4.0),
            Vector3::new(0.0, 0.0, 1.0),
        );
        let m = PoseManifest {
            entries: vec![
                PoseEntry {
                    image_id: 0,
                    raster: None,
                    model: CameraModel::Equirectangular {
                        width: 1024,
                        height: 512,
                    },
                    rotation: pose.rotation,
                    translation: pose.position,
                },
                PoseEntry {
                    image_id: 9,
                    raster: Some(PathBuf::from("/abs/x.png")),
                    model: CameraModel::Pinhole {
                        fx: 128.5,
                        fy: 128.0,
                        cx: 127.5,
                        cy: 128.0,
                        width: 256,
                        height: 256,
                    },
                    rotation: Matrix3::identity(),
                    translation: Vector3::new(1.0, 2.0, 3.0),
                },
            ],
        };
        assert_eq!(PoseManifest::parse(&m.to_text(), None).unwrap(), m);
    }
}
