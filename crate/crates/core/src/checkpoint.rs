//! Checkpoint files: one JSON header line followed by the little-endian `f64` parameter blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::optim::Params;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<(String, Vec<usize>)>,
}

pub fn to_bytes(meta: &Value, params: &Params) -> Result<Vec<u8>> {
    let header = Header {
        meta: meta.clone(),
        tensors: params.shapes(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend(params.to_le_bytes());
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Value, Params)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Validation("checkpoint has no header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])?;
    let params = Params::from_le_bytes(&header.tensors, &bytes[nl + 1..])?;
    Ok((header.meta, params))
}

pub fn save(path: &Path, meta: &Value, params: &Params) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(meta, params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Value, Params)> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn round_trip() {
        let mut p = Params::new();
        p.push(
            "w",
            Tensor::matrix(1, 3, vec![0.1, 0.2, f64::EPSILON]).unwrap(),
        );
        let meta = serde_json::json!({"kind": "test", "seed": 4});
        let (m, q) = from_bytes(&to_bytes(&meta, &p).unwrap()).unwrap();
        assert_eq!(m, meta);
        assert_eq!(q, p);
    }
}
