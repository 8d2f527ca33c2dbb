//! Grayscale PFM depth maps (`Pf`, little-endian, scale -1.0).
//!
//! Rows are stored bottom-to-top as the format requires; unset pixels hold
//! `+inf`. Writing then reading reproduces every value bit-exactly.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::raster::ImageRaster;

#[derive(Debug, Error)]
pub enum PfmError {
    #[error("depth maps must be single-channel, got {0} channels")]
    NotSingleChannel(u8),
    #[error("bad PFM header: {0}")]
    BadHeader(String),
    #[error("PFM payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn encode_pfm(depth: &ImageRaster) -> Result<Vec<u8>, PfmError> {
    if depth.channels() != 1 {
        return Err(PfmError::NotSingleChannel(depth.channels()));
    }
    let (w, h) = (depth.width() as usize, depth.height() as usize);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for row in (0..h).rev() {
        for v in &depth.data()[row * w..(row + 1) * w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<ImageRaster, PfmError> {
    let mut pos = 0;
    let mut token = |what: &str| -> Result<String, PfmError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(PfmError::BadHeader(format!("missing {what}")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    match token("magic")?.as_str() {
        "Pf" => {}
        "PF" => return Err(PfmError::BadHeader("color PFM is not a depth map".into())),
        other => return Err(PfmError::BadHeader(format!("magic {other:?}"))),
    }
    let parse_dim = |s: String| -> Result<usize, PfmError> {
        match s.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(PfmError::BadHeader(format!("dimension {s:?}"))),
        }
    };
    let w = parse_dim(token("width")?)?;
    let h = parse_dim(token("height")?)?;
    let scale_tok = token("scale")?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| PfmError::BadHeader(format!("scale {scale_tok:?}")))?;
    if !(scale < 0.0) {
        return Err(PfmError::BadHeader("only little-endian PFM is supported".into()));
    }
    // exactly one whitespace byte separates the header from the payload
    let payload = &bytes[(pos + 1).min(bytes.len())..];
    let expected = w * h * 4;
    if payload.len() < expected {
        return Err(PfmError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let mut data = vec![0.0f32; w * h];
    for (i, chunk) in payload[..expected].chunks_exact(4).enumerate() {
        let (row_from_bottom, col) = (i / w, i % w);
        data[(h - 1 - row_from_bottom) * w + col] =
            f32::from_le_bytes(chunk.try_into().unwrap());
    }
    ImageRaster::new(w as u32, h as u32, 1, data)
        .map_err(|e| PfmError::BadHeader(e.to_string()))
}

pub fn write_depth_map(path: impl AsRef<Path>, depth: &ImageRaster) -> Result<(), PfmError> {
    let path = path.as_ref();
    let bytes = encode_pfm(depth)?;
    fs::write(path, bytes).map_err(|source| PfmError::IoFailure {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_depth_map(path: impl AsRef<Path>) -> Result<ImageRaster, PfmError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| PfmError::IoFailure {
        path: path.display().to_string(),
        source,
    })?;
    decode_pfm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_round_trip() {
        let r = ImageRaster::new(2, 2, 1, vec![1.0, 2.0, 3.0, f32::INFINITY]).unwrap();
        let back = decode_pfm(&encode_pfm(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn minimal_file_layout() {
        let r = ImageRaster::new(1, 1, 1, vec![0.0]).unwrap();
        let bytes = encode_pfm(&r).unwrap();
        let mut expected = b"Pf\n1 1\n-1.0\n".to_vec();
        expected.extend_from_slice(&[0, 0, 0, 0]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rows_are_bottom_up() {
        let r = ImageRaster::new(1, 2, 1, vec![7.0, 9.0]).unwrap();
        let bytes = encode_pfm(&r).unwrap();
        let payload = &bytes[bytes.len() - 8..];
        assert_eq!(f32::from_le_bytes(payload[..4].try_into().unwrap()), 9.0);
    }

    #[test]
    fn rejects_three_channels_and_bad_headers() {
        let rgb = ImageRaster::new(1, 1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(encode_pfm(&rgb), Err(PfmError::NotSingleChannel(3))));
        assert!(matches!(decode_pfm(b"P6\n1 1\n255\n"), Err(PfmError::BadHeader(_))));
        assert!(matches!(decode_pfm(b"Pf\n1 1\n1.0\n\0\0\0\0"), Err(PfmError::BadHeader(_))));
        assert!(matches!(decode_pfm(b"Pf\n0 1\n-1.0\n"), Err(PfmError::BadHeader(_))));
        assert!(matches!(
            decode_pfm(b"Pf\n2 1\n-1.0\n\0\0\0\0"),
            Err(PfmError::Truncated { expected: 8, found: 4 })
        ));
    }
}
