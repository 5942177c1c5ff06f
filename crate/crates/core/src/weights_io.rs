//! Weight checkpoint format: a one-line text header (`VOXDETW1 <count>`)
//! followed by the flat parameter vector as little-endian f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC: &str = "VOXDETW1";

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("payload truncated: header promised {expected} params, found {found}")]
    Truncated { expected: usize, found: usize },
}

pub fn save_params(path: &Path, params: &[f64]) -> Result<(), WeightsError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC} {}", params.len())?;
    for p in params {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<Vec<f64>, WeightsError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)
            .map_err(|_| WeightsError::BadHeader("missing newline".into()))?;
        if b[0] == b'\n' {
            break;
        }
        if header.len() > 64 {
            return Err(WeightsError::BadHeader("header too long".into()));
        }
        header.push(b[0]);
    }
    let header = String::from_utf8(header)
        .map_err(|_| WeightsError::BadHeader("non-utf8 header".into()))?;
    let mut parts = header.split_whitespace();
    match parts.next() {
        Some(MAGIC) => {}
        other => {
            return Err(WeightsError::BadHeader(format!(
                "expected magic '{MAGIC}', got '{}'",
                other.unwrap_or("")
            )))
        }
    }
    let expected: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| WeightsError::BadHeader("missing param count".into()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected * 8 {
        return Err(WeightsError::Truncated {
            expected,
            found: payload.len() / 8,
        });
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
