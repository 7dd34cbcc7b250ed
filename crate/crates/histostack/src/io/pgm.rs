//! Binary PGM (P5) reader/writer, 8- and 16-bit (16-bit samples are
//! big-endian per the format). Used for integer section images and masks.

use crate::error::{Error, Result};
use std::path::Path;

/// Decoded PGM: dimensions, maxval, and samples as f64.
#[derive(Debug, Clone)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    pub samples: Vec<f64>,
}

/// Parses a binary PGM from bytes.
pub fn read_pgm_bytes(bytes: &[u8], label: &str) -> Result<Pgm> {
    let mut pos = 0usize;

    // Token reader: skips whitespace and '#' comments in the header.
    let mut token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::parse(label, 1, "unexpected end of PGM header"));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .map(|s| s.to_string())
            .map_err(|_| Error::parse(label, 1, "PGM header is not ASCII"))
    };

    let magic = token(&mut pos)?;
    if magic != "P5" {
        return Err(Error::parse(label, 1, format!("bad PGM magic {magic:?} (only P5)")));
    }
    let width: usize = token(&mut pos)?
        .parse()
        .map_err(|_| Error::parse(label, 1, "bad width"))?;
    let height: usize = token(&mut pos)?
        .parse()
        .map_err(|_| Error::parse(label, 1, "bad height"))?;
    let maxval: u32 = token(&mut pos)?
        .parse()
        .map_err(|_| Error::parse(label, 1, "bad maxval"))?;
    if width == 0 || height == 0 {
        return Err(Error::parse(label, 1, "zero PGM dimensions"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse(label, 1, format!("maxval {maxval} out of range")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::parse(label, 1, "missing raster separator"));
    }
    pos += 1;

    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::parse(label, 1, "dimensions overflow"))?;
    let data = &bytes[pos..];
    let samples = if maxval < 256 {
        if data.len() < n {
            return Err(Error::parse(
                label,
                1,
                format!("raster has {} bytes, expected {n}", data.len()),
            ));
        }
        data[..n].iter().map(|&b| b as f64).collect()
    } else {
        if data.len() < 2 * n {
            return Err(Error::parse(
                label,
                1,
                format!("raster has {} bytes, expected {}", data.len(), 2 * n),
            ));
        }
        data[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
            .collect()
    };
    Ok(Pgm {
        width,
        height,
        maxval,
        samples,
    })
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_pgm_bytes(&bytes, &path.display().to_string())
}

/// Serializes samples (clamped and rounded to [0, maxval]) as binary PGM.
pub fn pgm_to_bytes(width: usize, height: usize, maxval: u32, samples: &[f64]) -> Vec<u8> {
    assert_eq!(samples.len(), width * height);
    assert!(maxval >= 1 && maxval <= 65535);
    let mut out = Vec::with_capacity(32 + samples.len() * 2);
    out.extend_from_slice(format!("P5\n{width} {height}\n{maxval}\n").as_bytes());
    if maxval < 256 {
        out.extend(
            samples
                .iter()
                .map(|&s| s.round().clamp(0.0, maxval as f64) as u8),
        );
    } else {
        for &s in samples {
            let v = s.round().clamp(0.0, maxval as f64) as u16;
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, maxval: u32, samples: &[f64]) -> Result<()> {
    std::fs::write(path, pgm_to_bytes(width, height, maxval, samples))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_8bit() {
        let samples: Vec<f64> = (0..12).map(|i| (i * 20) as f64).collect();
        let bytes = pgm_to_bytes(4, 3, 255, &samples);
        let p = read_pgm_bytes(&bytes, "mem").unwrap();
        assert_eq!(p.width, 4);
        assert_eq!(p.height, 3);
        assert_eq!(p.samples, samples);
    }

    #[test]
    fn round_trip_16bit() {
        let samples: Vec<f64> = (0..6).map(|i| (i * 9000) as f64).collect();
        let bytes = pgm_to_bytes(3, 2, 65535, &samples);
        let p = read_pgm_bytes(&bytes, "mem").unwrap();
        assert_eq!(p.maxval, 65535);
        assert_eq!(p.samples, samples);
    }

    #[test]
    fn comments_allowed() {
        let bytes = b"P5\n# a comment\n2 2\n255\n\x01\x02\x03\x04";
        let p = read_pgm_bytes(bytes, "mem").unwrap();
        assert_eq!(p.samples, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rejects_p2_and_truncation() {
        assert!(read_pgm_bytes(b"P2\n2 2\n255\n1 2 3 4", "mem").is_err());
        assert!(read_pgm_bytes(b"P5\n2 2\n255\n\x01\x02", "mem").is_err());
    }
}
