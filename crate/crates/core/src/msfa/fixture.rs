//! Binary matrix fixtures: a little-endian `u32` header length, a JSON
//! header `{"shape":[r,c],"dtype":"f32","name":...}`, then row-major `f32`
//! little-endian values.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad header: {0}")]
    Header(String),
    #[error("expected {expected} bytes of data, found {found}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub name: String,
}

pub fn encode_matrix(name: &str, m: &Array2<f64>) -> Vec<u8> {
    let header = FixtureHeader {
        shape: vec![m.nrows(), m.ncols()],
        dtype: "f32".into(),
        name: name.into(),
    };
    let h = serde_json::to_vec(&header).expect("plain header");
    let mut out = Vec::with_capacity(4 + h.len() + 4 * m.len());
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    for v in m.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<(FixtureHeader, Array2<f64>), FixtureError> {
    let len_bytes: [u8; 4] = bytes
        .get(..4)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| FixtureError::Header("missing length prefix".into()))?;
    let hlen = u32::from_le_bytes(len_bytes) as usize;
    let hbytes = bytes
        .get(4..4 + hlen)
        .ok_or_else(|| FixtureError::Header("header runs past end of file".into()))?;
    let header: FixtureHeader = serde_json::from_slice(hbytes).map_err(|e| FixtureError::Header(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(FixtureError::Header(format!("unsupported dtype {:?}", header.dtype)));
    }
    let [r, c] = header.shape[..] else {
        return Err(FixtureError::Header(format!("expected 2-d shape, got {:?}", header.shape)));
    };
    let data = &bytes[4 + hlen..];
    let expected = r * c * 4;
    if data.len() != expected {
        return Err(FixtureError::Truncated {
            expected,
            found: data.len(),
        });
    }
    let values = data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")) as f64)
        .collect();
    let m = Array2::from_shape_vec((r, c), values).map_err(|e| FixtureError::Header(e.to_string()))?;
    Ok((header, m))
}

pub fn write_matrix(path: &Path, name: &str, m: &Array2<f64>) -> Result<(), FixtureError> {
    fs::write(path, encode_matrix(name, m))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<(FixtureHeader, Array2<f64>), FixtureError> {
    decode_matrix(&fs::read(path)?)
}
