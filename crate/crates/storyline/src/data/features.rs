//! Photo-feature files.
//!
//! Layout: the magic bytes `INFT`, a little-endian `u32` format version, the
//! `u32` row and column counts, then `rows * cols` 32-bit little-endian
//! floats in row-major order. Values are stored in 32 bits regardless of the
//! precision the model runs in; reading widens exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"INFT";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Write a rank-2 feature tensor. Values are narrowed to 32 bits.
pub fn write_features<R: Scalar>(path: &Path, features: &Tensor<R>) -> Result<()> {
    if features.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "write_features",
            lhs: features.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    let (rows, cols) = (features.shape()[0], features.shape()[1]);
    if rows == 0 || cols == 0 {
        return Err(Error::Degenerate(
            "feature files must have at least one row and column".into(),
        ));
    }
    if !features.all_finite() {
        return Err(Error::non_finite("write_features"));
    }
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * rows * cols);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in features.data() {
        bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Read a feature file into the requested precision.
pub fn read_features<R: Scalar>(path: &Path) -> Result<Tensor<R>> {
    let bytes = std::fs::read(path)?;
    let fail = |reason: String| Error::Format {
        path: path.display().to_string(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail("file shorter than the fixed header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("bad magic bytes, not a feature file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unsupported format version {version}")));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(fail(format!("degenerate shape {rows}x{cols}")));
    }
    let expected = HEADER_LEN + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(fail(format!(
            "expected {expected} bytes for {rows}x{cols} features, file has {}",
            bytes.len()
        )));
    }
    let data: Vec<R> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| R::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(fail("non-finite feature value".into()));
    }
    Tensor::new(&[rows, cols], data)
}
