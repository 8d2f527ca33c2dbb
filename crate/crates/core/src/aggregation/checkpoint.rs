//! Parameter checkpoints: a named-tensor container followed by the SHA-256 of
//! everything before it.
//!
//! ```text
//! magic "VFCK" | u32 version | u32 activation | f64 slope | u32 count
//! count x ( u32 name_len | name | u32 ndim | ndim x u64 dim | f64 payload )
//! [u8; 32] sha256
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::mlp::{Activation, Linear, Mlp};
use super::model::{AggregationParams, TENSOR_NAMES};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint hash mismatch")]
    HashMismatch,
    #[error("bad tensor layout: {0}")]
    Layout(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// SHA-256 over the serialized tensors, hex encoded.
pub fn manifest_hash(params: &AggregationParams<f64>) -> String {
    let bytes = to_bytes(params);
    bytes[bytes.len() - 32..]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn to_bytes(params: &AggregationParams<f64>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let (code, slope) = match params.activation() {
        Activation::LeakyRelu(s) => (0u32, s),
        Activation::Relu => (1, 0.0),
        Activation::Identity => (2, 0.0),
    };
    out.extend_from_slice(&code.to_le_bytes());
    out.extend_from_slice(&slope.to_le_bytes());
    out.extend_from_slice(&(TENSOR_NAMES.len() as u32).to_le_bytes());
    for ((name, shape), data) in TENSOR_NAMES.iter().zip(params.shapes()).zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in &shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<AggregationParams<f64>, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 4 + 32 {
        return Err(CheckpointError::Truncated);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch(version));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::HashMismatch);
    }
    let code = r.u32()?;
    let slope = r.f64()?;
    let activation = match code {
        0 => Activation::LeakyRelu(slope),
        1 => Activation::Relu,
        2 => Activation::Identity,
        other => return Err(CheckpointError::Layout(format!("activation code {other}"))),
    };
    let count = r.u32()? as usize;
    if count != TENSOR_NAMES.len() {
        return Err(CheckpointError::Layout(format!("{count} tensors")));
    }
    let mut tensors = Vec::with_capacity(count);
    for expected in TENSOR_NAMES {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Layout("tensor name is not utf-8".into()))?;
        if name != expected {
            return Err(CheckpointError::Layout(format!("expected {expected}, found {name}")));
        }
        let ndim = r.u32()? as usize;
        if ndim == 0 || ndim > 2 {
            return Err(CheckpointError::Layout(format!("{name}: rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= body.len() / 8)
            .ok_or(CheckpointError::Truncated)?;
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        tensors.push((shape, data));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Layout("trailing bytes".into()));
    }
    let mut it = tensors.into_iter();
    let mut mlp = || -> Result<Mlp<f64>, CheckpointError> {
        let mut linear = || -> Result<Linear<f64>, CheckpointError> {
            let (ws, weight) = it.next().unwrap();
            let (bs, bias) = it.next().unwrap();
            if ws.len() != 2 || bs != [ws[0]] {
                return Err(CheckpointError::Layout("linear layer shapes".into()));
            }
            Ok(Linear {
                out: ws[0],
                inp: ws[1],
                weight,
                bias,
            })
        };
        Ok(Mlp {
            l1: linear()?,
            l2: linear()?,
            activation,
        })
    };
    let (phi0, phi1, phi2, phi3) = (mlp()?, mlp()?, mlp()?, mlp()?);
    let alpha = it.next().unwrap().1;
    let beta = it.next().unwrap().1;
    let params = AggregationParams {
        phi0,
        phi1,
        phi2,
        phi3,
        alpha,
        beta,
    };
    params
        .validate()
        .map_err(|e| CheckpointError::Layout(e.to_string()))?;
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &AggregationParams<f64>) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AggregationParams<f64>, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}
