//! The CSMILEMB bag file.
//!
//! ```text
//! 0..8    b"CSMILEMB"
//! 8..12   n  (u32 LE)
//! 12..16  d  (u32 LE)
//! 16..    n*d f32 LE, instance-major
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::Bag;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CSMILEMB";
pub const HEADER_LEN: usize = 16;

/// Serializes a bag's embeddings. Values are narrowed to f32.
pub fn encode_bag(bag: &Bag) -> Result<Vec<u8>> {
    if bag.embeddings.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("bag {}", bag.id)));
    }
    let (n, d) = bag.embeddings.dim();
    let n32 = u32::try_from(n).map_err(|_| Error::Format(format!("n = {n} exceeds u32")))?;
    let d32 = u32::try_from(d).map_err(|_| Error::Format(format!("d = {d} exceeds u32")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * d);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for &v in bag.embeddings.iter() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::NonFinite(format!("bag {}: {v} overflows f32", bag.id)));
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(out)
}

/// Parses a bag payload into an `n × d` matrix promoted to f64.
pub fn decode_bag(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file is {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("magic number mismatch".into()));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if n == 0 || d == 0 {
        return Err(Error::Format(format!("empty shape {n}×{d}")));
    }
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format(format!("shape {n}×{d} overflows")))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload length {} does not match {n}×{d} (expected {expected})",
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(n * d);
    for chunk in bytes[HEADER_LEN..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "instance {} feature {}",
                values.len() / d,
                values.len() % d
            )));
        }
        values.push(f64::from(v));
    }
    Ok(Array2::from_shape_vec((n, d), values).expect("length checked above"))
}

pub fn save_bag(bag: &Bag, path: &Path) -> Result<()> {
    let bytes = encode_bag(bag)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bag_file(path: &Path, id: &str, label: u8) -> Result<Bag> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let embeddings = decode_bag(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    Bag::new(id, label, embeddings)
}
