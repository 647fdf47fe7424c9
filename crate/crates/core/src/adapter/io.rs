//! Adapter parameter files.
//!
//! Layout: u32 LE header length, a JSON header describing every tensor, then
//! the tensors back to back as XMRG blobs. Offsets in the header are relative
//! to the end of the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdapterConfig, AdapterParams, TENSOR_NAMES};
use crate::corpus::FeatureMatrix;
use crate::error::{Error, Result};
use crate::tensor::Mat;

const FORMAT: &str = "xmrag-adapter";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: AdapterConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
    length: usize,
}

pub fn write_params(params: &AdapterParams<f32>) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    let mut tensors = Vec::with_capacity(TENSOR_NAMES.len());
    for (name, t) in TENSOR_NAMES.iter().zip(params.tensors()) {
        let blob = FeatureMatrix::new(t.rows, t.cols, t.data.clone())
            .map_err(|e| Error::ParamFile(format!("tensor {name}: {e}")))?
            .to_bytes();
        tensors.push(TensorEntry {
            name: (*name).to_string(),
            rows: t.rows,
            cols: t.cols,
            offset: body.len(),
            length: blob.len(),
        });
        body.extend_from_slice(&blob);
    }
    let header = serde_json::to_vec(&Header {
        format: FORMAT.into(),
        version: VERSION,
        config: params.config,
        tensors,
    })?;
    let mut out = Vec::with_capacity(4 + header.len() + body.len());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn read_params(bytes: &[u8]) -> Result<AdapterParams<f32>> {
    let bad = |m: String| Error::ParamFile(m);
    if bytes.len() < 4 {
        return Err(bad("file shorter than its length prefix".into()));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let body_start = 4usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("header length {hlen} exceeds file size")))?;
    let header: Header = serde_json::from_slice(&bytes[4..body_start])?;
    if header.format != FORMAT {
        return Err(bad(format!("unexpected format {:?}", header.format)));
    }
    if header.version != VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    let body = &bytes[body_start..];
    let mut params = AdapterParams::<f32>::zeros(header.config)?;
    for (name, dst) in TENSOR_NAMES.iter().zip(params.tensors_mut()) {
        let entry = header
            .tensors
            .iter()
            .find(|e| e.name == *name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if (entry.rows, entry.cols) != (dst.rows, dst.cols) {
            return Err(bad(format!(
                "tensor {name} is {}x{}, config implies {}x{}",
                entry.rows, entry.cols, dst.rows, dst.cols
            )));
        }
        let blob = entry
            .offset
            .checked_add(entry.length)
            .filter(|&e| e <= body.len())
            .map(|e| &body[entry.offset..e])
            .ok_or_else(|| bad(format!("tensor {name} runs past end of file")))?;
        let m = FeatureMatrix::from_bytes(blob).map_err(|e| bad(format!("tensor {name}: {e}")))?;
        if (m.rows(), m.cols()) != (dst.rows, dst.cols) {
            return Err(bad(format!("tensor {name} blob shape disagrees with header")));
        }
        *dst = Mat::from_vec(m.rows(), m.cols(), m.into_values());
    }
    Ok(params)
}

pub fn save_params(path: impl AsRef<Path>, params: &AdapterParams<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_params(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<AdapterParams<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_params(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> AdapterParams<f32> {
        let cfg = AdapterConfig {
            d_vision: 6,
            d_text: 4,
            d_model: 8,
            heads: 2,
            query_tokens: 3,
            hidden: 5,
            d_out: 4,
        };
        AdapterParams::init(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let p = params();
        let back = read_params(&write_params(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.bin");
        let p = params();
        save_params(&path, &p).unwrap();
        assert_eq!(load_params(&path).unwrap(), p);
    }

    #[test]
    fn truncation_and_garbage_rejected() {
        let bytes = write_params(&params()).unwrap();
        assert!(read_params(&bytes[..bytes.len() - 3]).is_err());
        assert!(read_params(&bytes[..2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 0xff;
        bad[1] = 0xff;
        assert!(read_params(&bad).is_err());
    }

    #[test]
    fn non_finite_weights_not_written() {
        let mut p = params();
        p.mlp_w1.data[2] = f32::NAN;
        assert!(matches!(write_params(&p), Err(Error::ParamFile(_))));
    }
}
