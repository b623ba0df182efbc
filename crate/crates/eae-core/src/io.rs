//! Shared on-disk container: a length-prefixed JSON header followed by a
//! raw little-endian `f64` payload. Checkpoints, encoder ensembles, and
//! dataset caches all use this layout.

use crate::{EaeError, Result};
use std::io::{Read, Write};
use std::path::Path;

fn format_err(path: &Path, offset: u64, reason: impl Into<String>) -> EaeError {
    EaeError::Format {
        path: path.display().to_string(),
        offset,
        reason: reason.into(),
    }
}

/// Write `header` (JSON text) and `payload` to `path`.
pub fn write_container(path: &Path, header: &str, payload: &[f64]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header_bytes = header.as_bytes();
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(header_bytes)?;
    for v in payload {
        file.write_all(&v.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

/// Read a container back as `(header_json, payload)`.
pub fn read_container(path: &Path) -> Result<(String, Vec<f64>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|_| format_err(path, 0, "truncated header length"))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| format_err(path, 4, format!("truncated header, expected {header_len} bytes")))?;
    let header = String::from_utf8(header_bytes)
        .map_err(|e| format_err(path, 4 + e.utf8_error().valid_up_to() as u64, "header is not UTF-8"))?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if rest.len() % 8 != 0 {
        return Err(format_err(
            path,
            4 + header_len as u64 + (rest.len() - rest.len() % 8) as u64,
            "payload is not a whole number of 8-byte floats",
        ));
    }
    let payload = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blob.bin");
        let payload = vec![0.1, -2.5e-300, f64::MAX, 0.0, 1.0 / 3.0];
        write_container(&path, r#"{"k":1}"#, &payload).unwrap();
        let (header, back) = read_container(&path).unwrap();
        assert_eq!(header, r#"{"k":1}"#);
        assert_eq!(
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            payload.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        write_container(&path, "{}", &[1.0, 2.0]).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 3]).unwrap();
        let err = read_container(&path).unwrap_err();
        match err {
            crate::EaeError::Format { offset, .. } => assert!(offset > 0),
            other => panic!("unexpected {other:?}"),
        }
    }
}
