//! On-disk volume format and slice previews.
//!
//! Volumes are stored in a small headered binary format:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "AMGV"
//! 4       2     version (u16, little-endian) = 1
//! 6       1     dtype code (1 = f64, 2 = u8)
//! 7       4     depth  D (u32, little-endian)
//! 11      4     height H (u32, little-endian)
//! 15      4     width  W (u32, little-endian)
//! 19      ...   payload, little-endian, z-major row-major, D*H*W elements
//! ```
//!
//! Reads reject wrong magic, unsupported versions, mismatched dtypes,
//! and payloads whose length disagrees with the header — each with its
//! own error. Round trips are bit-exact.
//!
//! Slice previews use binary PGM (P5), which needs no image library.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Real;

pub const VOLUME_MAGIC: [u8; 4] = *b"AMGV";
pub const VOLUME_VERSION: u16 = 1;

const DTYPE_F64: u8 = 1;
const DTYPE_U8: u8 = 2;
const HEADER_LEN: usize = 19;

fn dtype_name(code: u8) -> String {
    match code {
        DTYPE_F64 => "f64".into(),
        DTYPE_U8 => "u8".into(),
        other => format!("unknown dtype code {other}"),
    }
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn write_header(out: &mut Vec<u8>, dtype: u8, dims: (usize, usize, usize)) -> Result<()> {
    let (d, h, w) = dims;
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "volume dims must all be positive, got {d}x{h}x{w}"
        )));
    }
    if d > u32::MAX as usize || h > u32::MAX as usize || w > u32::MAX as usize {
        return Err(Error::Config("volume dims exceed the u32 header range".into()));
    }
    out.extend_from_slice(&VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    out.push(dtype);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    Ok(())
}

/// Parsed header: dtype code and dims.
fn read_header(path: &Path, bytes: &[u8]) -> Result<(u8, (usize, usize, usize))> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path_str(path),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[0..4]);
    if magic != VOLUME_MAGIC {
        return Err(Error::BadMagic {
            path: path_str(path),
            expected: VOLUME_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VOLUME_VERSION {
        return Err(Error::Version {
            path: path_str(path),
            found: version,
            supported: VOLUME_VERSION,
        });
    }
    let dtype = bytes[6];
    let dim = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    Ok((dtype, (dim(7), dim(11), dim(15))))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = File::open(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path_str(path), e))?;
    Ok(bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    f.write_all(bytes).map_err(|e| Error::io(path_str(path), e))
}

/// Check payload size and return it, or the size-mismatch error.
fn check_payload<'a>(
    path: &Path,
    bytes: &'a [u8],
    numel: usize,
    elem_size: usize,
) -> Result<&'a [u8]> {
    let expected = numel * elem_size;
    let found = bytes.len() - HEADER_LEN;
    if found != expected {
        return Err(Error::Truncated {
            path: path_str(path),
            expected,
            found,
        });
    }
    Ok(&bytes[HEADER_LEN..])
}

/// Write an f64 field (values stored exactly; round trips are bit-exact).
pub fn write_volume_f64(path: &Path, dims: (usize, usize, usize), data: &[Real]) -> Result<()> {
    let (d, h, w) = dims;
    if data.len() != d * h * w {
        return Err(Error::Config(format!(
            "payload has {} elements, dims say {}",
            data.len(),
            d * h * w
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * 8);
    write_header(&mut out, DTYPE_F64, dims)?;
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &out)
}

/// Read an f64 field: `(dims, data)`.
pub fn read_volume_f64(path: &Path) -> Result<((usize, usize, usize), Vec<Real>)> {
    let bytes = read_file(path)?;
    let (dtype, dims) = read_header(path, &bytes)?;
    if dtype != DTYPE_F64 {
        return Err(Error::DtypeMismatch {
            path: path_str(path),
            expected: "f64",
            found: dtype_name(dtype),
        });
    }
    let (d, h, w) = dims;
    let payload = check_payload(path, &bytes, d * h * w, 8)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| Real::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((dims, data))
}

/// Write a u8 label field.
pub fn write_volume_u8(path: &Path, dims: (usize, usize, usize), data: &[u8]) -> Result<()> {
    let (d, h, w) = dims;
    if data.len() != d * h * w {
        return Err(Error::Config(format!(
            "payload has {} elements, dims say {}",
            data.len(),
            d * h * w
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + data.len());
    write_header(&mut out, DTYPE_U8, dims)?;
    out.extend_from_slice(data);
    write_file(path, &out)
}

/// Read a u8 label field: `(dims, data)`.
pub fn read_volume_u8(path: &Path) -> Result<((usize, usize, usize), Vec<u8>)> {
    let bytes = read_file(path)?;
    let (dtype, dims) = read_header(path, &bytes)?;
    if dtype != DTYPE_U8 {
        return Err(Error::DtypeMismatch {
            path: path_str(path),
            expected: "u8",
            found: dtype_name(dtype),
        });
    }
    let (d, h, w) = dims;
    let payload = check_payload(path, &bytes, d * h * w, 1)?;
    Ok((dims, payload.to_vec()))
}

/// Write an `[H, W]` image with values in [0, 1] as binary PGM (P5),
/// quantized to 8 bits by round-to-nearest.
pub fn write_pgm(path: &Path, h: usize, w: usize, data: &[Real]) -> Result<()> {
    if data.len() != h * w || h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "pgm payload has {} elements, dims say {h}x{w}",
            data.len()
        )));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    write_file(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().expect("temp dir");
        // Keep the dir alive for the test's duration by leaking it;
        // the OS cleans the tree up with the tempdir root.
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let dims = (4usize, 8usize, 8usize);
        let data = rng::normal_vec(&mut rng::seeded(1), 4 * 8 * 8);
        let path = tmp("vol.amgv");
        write_volume_f64(&path, dims, &data).unwrap();
        let (rd, rdata) = read_volume_f64(&path).unwrap();
        assert_eq!(rd, dims);
        assert_eq!(
            rdata.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            "round trip must preserve every bit"
        );
    }

    #[test]
    fn u8_round_trip_is_exact() {
        let dims = (2usize, 3usize, 5usize);
        let data: Vec<u8> = (0..30).map(|i| (i % 4) as u8).collect();
        let path = tmp("mask.amgv");
        write_volume_u8(&path, dims, &data).unwrap();
        let (rd, rdata) = read_volume_u8(&path).unwrap();
        assert_eq!(rd, dims);
        assert_eq!(rdata, data);
    }

    #[test]
    fn corrupted_magic_is_a_distinct_error() {
        let path = tmp("bad.amgv");
        write_volume_u8(&path, (1, 2, 2), &[0, 1, 2, 3]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match read_volume_u8(&path) {
            Err(Error::BadMagic { expected, found, .. }) => {
                assert_eq!(expected, VOLUME_MAGIC);
                assert_eq!(&found, b"XMGV");
            }
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_a_distinct_error() {
        let path = tmp("short.amgv");
        let data = vec![0.5; 8];
        write_volume_f64(&path, (2, 2, 2), &data).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        match read_volume_f64(&path) {
            Err(Error::Truncated { expected, found, .. }) => {
                assert_eq!(expected, 64);
                assert_eq!(found, 63);
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn dtype_mismatch_is_a_distinct_error() {
        let path = tmp("wrongtype.amgv");
        write_volume_u8(&path, (1, 2, 2), &[1, 2, 3, 4]).unwrap();
        match read_volume_f64(&path) {
            Err(Error::DtypeMismatch { expected, found, .. }) => {
                assert_eq!(expected, "f64");
                assert_eq!(found, "u8");
            }
            other => panic!("expected DtypeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_version_is_a_distinct_error() {
        let path = tmp("vfuture.amgv");
        write_volume_u8(&path, (1, 1, 1), &[7]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9; // version low byte
        std::fs::write(&path, &bytes).unwrap();
        match read_volume_u8(&path) {
            Err(Error::Version { found, supported, .. }) => {
                assert_eq!(found, 9);
                assert_eq!(supported, VOLUME_VERSION);
            }
            other => panic!("expected Version, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_reports_the_path() {
        let err = read_volume_f64(Path::new("/nonexistent/v.amgv")).unwrap_err();
        match err {
            Error::Io { path, .. } => assert!(path.contains("nonexistent")),
            other => panic!("expected Io, got {other:?}"),
        }
    }

    #[test]
    fn pgm_bytes_are_exact() {
        let path = tmp("img.pgm");
        // 2x3 image; 0.5 quantizes to round(127.5) = 128.
        write_pgm(&path, 2, 3, &[0.0, 0.5, 1.0, 0.25, 2.0, -1.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expect = b"P5\n3 2\n255\n".to_vec();
        expect.extend_from_slice(&[0, 128, 255, 64, 255, 0]);
        assert_eq!(bytes, expect);
    }
}
