//! Binary portable pixmap (P6) and graymap (P5) files, 8 bits per sample.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PnmError + '_ {
    move |source| PnmError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Encodes interleaved RGB bytes as P6.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PnmError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

/// Decoded image: `(width, height, samples)` with 3 or 1 samples per pixel.
pub fn read_pnm(path: &Path) -> Result<(usize, usize, Vec<u8>), PnmError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes).map_err(|reason| PnmError::Format {
        path: path.display().to_string(),
        reason,
    })
}

pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?.to_string());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(format!("unsupported magic {other}")),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(format!("only maxval 255 is supported, got {maxval}"));
    }
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(format!("raster truncated: need {need} bytes"));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| i as u8 * 10).collect();
        let (w, h, data) = decode(&encode_ppm(2, 3, &rgb)).unwrap();
        assert_eq!((w, h), (2, 3));
        assert_eq!(data, rgb);
        let gray = vec![0, 255, 7, 9];
        assert_eq!(decode(&encode_pgm(2, 2, &gray)).unwrap().2, gray);
    }

    #[test]
    fn comments_and_errors() {
        let mut bytes = b"P5\n# note\n1 1\n255\n".to_vec();
        bytes.push(42);
        assert_eq!(decode(&bytes).unwrap().2, vec![42]);
        assert!(decode(b"P3\n1 1\n255\n").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x01").is_err());
    }
}
