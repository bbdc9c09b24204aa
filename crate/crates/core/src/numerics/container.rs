//! The `M2RP` on-disk container.
//!
//! Single matrix (version 1):
//!
//! ```text
//! "M2RP" | u32 version = 1 | u32 rows | u32 cols | rows·cols × f32   (little endian, row-major)
//! ```
//!
//! Named bundle (version 2), used for parameter sets and checkpoints:
//!
//! ```text
//! "M2RP" | u32 version = 2 | u32 manifest_len | manifest (UTF-8) | payload
//! ```
//!
//! The manifest holds `# key = value` metadata lines followed by one line per
//! matrix, `name rows cols offset`, where `offset` is the byte offset of the
//! matrix's f32 data inside the payload.

use std::fs;
use std::path::Path;

use super::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"M2RP";
pub const VERSION_MATRIX: u32 = 1;
pub const VERSION_BUNDLE: u32 = 2;

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * m.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION_MATRIX.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    push_f32(&mut out, m);
    out
}

fn push_f32(out: &mut Vec<u8>, m: &Matrix) {
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    let version = check_header(bytes)?;
    if version != VERSION_MATRIX {
        return Err(Error::Format(format!("expected matrix version 1, found {version}")));
    }
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let data = read_f32s(bytes, 16, rows * cols)?;
    if bytes.len() != 16 + 4 * rows * cols {
        return Err(Error::Format(format!(
            "trailing bytes: expected {} bytes, found {}",
            16 + 4 * rows * cols,
            bytes.len()
        )));
    }
    Matrix::new(rows, cols, data)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    fs::write(path, encode_matrix(m))?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    decode_matrix(&fs::read(path)?)
}

fn check_header(bytes: &[u8]) -> Result<u32> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing M2RP magic".into()));
    }
    read_u32(bytes, 4)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated header at byte {at}")))
}

fn read_f32s(bytes: &[u8], at: usize, n: usize) -> Result<Vec<f64>> {
    let end = at + 4 * n;
    let raw = bytes
        .get(at..end)
        .ok_or_else(|| Error::Format(format!("truncated payload: need {n} floats at byte {at}")))?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

/// Ordered collection of named matrices plus key-value metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bundle {
    pub meta: Vec<(String, String)>,
    pub entries: Vec<(String, Matrix)>,
}

impl Bundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.entries.push((name.into(), m));
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("bundle has no entry named {name}")))
    }

    /// The manifest text exactly as written into the file.
    pub fn manifest(&self) -> Result<String> {
        let mut text = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') || k.trim().is_empty() {
                return Err(Error::Format(format!("invalid metadata key/value {k:?}")));
            }
            text.push_str(&format!("# {k} = {v}\n"));
        }
        let mut offset = 0usize;
        for (name, m) in &self.entries {
            if name.is_empty() || name.contains(char::is_whitespace) || name.starts_with('#') {
                return Err(Error::Format(format!("invalid entry name {name:?}")));
            }
            text.push_str(&format!("{name} {} {} {offset}\n", m.rows(), m.cols()));
            offset += 4 * m.data().len();
        }
        Ok(text)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let manifest = self.manifest()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION_BUNDLE.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for (_, m) in &self.entries {
            push_f32(&mut out, m);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let version = check_header(bytes)?;
        if version != VERSION_BUNDLE {
            return Err(Error::Format(format!("expected bundle version 2, found {version}")));
        }
        let mlen = read_u32(bytes, 8)? as usize;
        let manifest = bytes
            .get(12..12 + mlen)
            .ok_or_else(|| Error::Format("truncated manifest".into()))?;
        let manifest = std::str::from_utf8(manifest)
            .map_err(|e| Error::Format(format!("manifest is not UTF-8: {e}")))?;
        let payload = &bytes[12 + mlen..];

        let mut bundle = Bundle::new();
        let mut expected_offset = 0usize;
        for (lineno, line) in manifest.lines().enumerate() {
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest
                    .split_once(" = ")
                    .ok_or_else(|| Error::Format(format!("manifest line {}: bad metadata", lineno + 1)))?;
                bundle.meta.push((k.to_string(), v.to_string()));
                continue;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Format(format!("manifest line {}: bad number {s:?}", lineno + 1)))
            };
            let [name, rows, cols, offset] = fields[..] else {
                return Err(Error::Format(format!("manifest line {}: expected 4 fields", lineno + 1)));
            };
            let (rows, cols, offset) = (parse(rows)?, parse(cols)?, parse(offset)?);
            if offset != expected_offset {
                return Err(Error::Format(format!(
                    "manifest line {}: offset {offset}, expected {expected_offset}",
                    lineno + 1
                )));
            }
            let data = read_f32s(payload, offset, rows * cols)?;
            expected_offset += 4 * rows * cols;
            bundle.entries.push((name.to_string(), Matrix::new(rows, cols, data)?));
        }
        if payload.len() != expected_offset {
            return Err(Error::Format("payload length does not match manifest".into()));
        }
        Ok(bundle)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_header_layout() {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let bytes = encode_matrix(&m);
        assert_eq!(&bytes[..4], b"M2RP");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 12);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode_matrix(b"XXXX\x01\0\0\0").is_err());
        let mut bytes = encode_matrix(&Matrix::zeros(2, 2));
        bytes.pop();
        assert!(decode_matrix(&bytes).is_err());
    }

    #[test]
    fn bundle_manifest_offsets() {
        let mut b = Bundle::new();
        b.set_meta("seed", "7");
        b.push("a", Matrix::zeros(2, 3));
        b.push("b", Matrix::identity(2));
        assert_eq!(b.manifest().unwrap(), "# seed = 7\na 2 3 0\nb 2 2 24\n");
        let back = Bundle::decode(&b.encode().unwrap()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.meta("seed"), Some("7"));
    }

    #[test]
    fn bundle_rejects_whitespace_names() {
        let mut b = Bundle::new();
        b.push("bad name", Matrix::zeros(1, 1));
        assert!(b.encode().is_err());
    }
}
