//! Binary feature files.
//!
//! Layout: one JSON header line `{"rows","cols","dtype":"f32","order":
//! "row-major"}` terminated by `\n`, followed by raw little-endian 32-bit
//! floats. Token-block files add `"n_l"` to the header and store
//! `rows x n_l x cols` values in row-major order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{FeatureMatrix, TokenBlock};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    rows: usize,
    cols: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_l: Option<usize>,
    dtype: String,
    order: String,
}

fn encode(rows: usize, cols: usize, n_l: Option<usize>, values: &[f32]) -> Vec<u8> {
    let header = Header {
        rows,
        cols,
        n_l,
        dtype: "f32".to_string(),
        order: "row-major".to_string(),
    };
    let mut bytes = serde_json::to_vec(&header).expect("header serializes");
    bytes.push(b'\n');
    bytes.reserve(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn decode(bytes: &[u8], context: &str) -> Result<(Header, Vec<f32>)> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format(format!("{context}: missing header line")))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Format(format!("{context}: bad header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::Format(format!(
            "{context}: unsupported dtype {:?}",
            header.dtype
        )));
    }
    if header.order != "row-major" {
        return Err(Error::Format(format!(
            "{context}: unsupported order {:?}",
            header.order
        )));
    }
    let payload = &bytes[newline + 1..];
    let expected = header.rows * header.cols * header.n_l.unwrap_or(1) * 4;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "{context}: expected {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    Ok((header, values))
}

pub fn write_matrix(path: impl AsRef<Path>, matrix: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(matrix.rows(), matrix.cols(), None, matrix.data());
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, values) = decode(&bytes, &path.display().to_string())?;
    if header.n_l.is_some() {
        return Err(Error::Format(format!(
            "{}: token-block file where a plain matrix was expected",
            path.display()
        )));
    }
    FeatureMatrix::new(header.rows, header.cols, values)
}

pub fn write_token_block(path: impl AsRef<Path>, block: &TokenBlock) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(block.batch(), block.dim(), Some(block.n_l()), block.data());
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_token_block(path: impl AsRef<Path>) -> Result<TokenBlock> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, values) = decode(&bytes, &path.display().to_string())?;
    let n_l = header.n_l.ok_or_else(|| {
        Error::Format(format!(
            "{}: header lacks n_l; not a token-block file",
            path.display()
        ))
    })?;
    TokenBlock::new(header.rows, n_l, header.cols, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = FeatureMatrix::new(2, 3, vec![1.0, -2.5, 0.0, 4.0, 5.5, -6.25]).unwrap();
        write_matrix(&path, &m).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(back.rows(), 2);
        assert_eq!(back.cols(), 3);
        assert_eq!(back.data(), m.data());
    }

    #[test]
    fn token_block_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let b = TokenBlock::new(2, 2, 3, (0..12).map(|i| i as f32).collect()).unwrap();
        write_token_block(&path, &b).unwrap();
        let back = read_token_block(&path).unwrap();
        assert_eq!(back.batch(), 2);
        assert_eq!(back.n_l(), 2);
        assert_eq!(back.dim(), 3);
        assert_eq!(back.data(), b.data());
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = FeatureMatrix::new(1, 4, vec![1.0; 4]).unwrap();
        write_matrix(&path, &m).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Format(_))));
    }

    #[test]
    fn matrix_reader_rejects_block_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let b = TokenBlock::new(1, 2, 2, vec![0.0; 4]).unwrap();
        write_token_block(&path, &b).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Format(_))));
        let m = FeatureMatrix::new(2, 2, vec![0.0; 4]).unwrap();
        let path2 = dir.path().join("m.bin");
        write_matrix(&path2, &m).unwrap();
        assert!(matches!(read_token_block(&path2), Err(Error::Format(_))));
    }
}
