//! The `.lsv` volume file format.
//!
//! Little-endian throughout: magic `LSV1`; `u32` channels, depth, height,
//! width; three `f32` spacings `(sz, sy, sx)`; then `channels*d*h*w` `f32`
//! intensities in channel-major, then depth-major order. Round-trips are
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Volume, VolumeError};

const MAGIC: &[u8; 4] = b"LSV1";
/// Voxel-count guard; headers past this are treated as corrupt rather than
/// honored with a huge allocation.
const MAX_ELEMENTS: u64 = 1 << 31;

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for dim in [v.channels, v.dims[0], v.dims[1], v.dims[2]] {
        let dim = u32::try_from(dim).map_err(|_| VolumeError::DimensionOverflow {
            channels: v.channels as u64,
            d: v.dims[0] as u64,
            h: v.dims[1] as u64,
            w: v.dims[2] as u64,
        })?;
        w.write_all(&dim.to_le_bytes())?;
    }
    for s in v.spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    for &val in &v.data {
        w.write_all(&val.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 4 + 4 * 4 + 3 * 4];
    read_exact_or(&mut r, &mut header, |_| {
        VolumeError::MalformedHeader("file shorter than the fixed header".into())
    })?;
    if &header[0..4] != MAGIC {
        return Err(VolumeError::MalformedHeader(format!(
            "bad magic {:02x?}, expected {:02x?}",
            &header[0..4],
            MAGIC
        )));
    }
    let field = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (channels, d, h, w) = (field(0) as u64, field(1) as u64, field(2) as u64, field(3) as u64);
    if channels == 0 || d == 0 || h == 0 || w == 0 {
        return Err(VolumeError::MalformedHeader("zero-sized dimension".into()));
    }
    let elements = channels
        .checked_mul(d)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .filter(|&v| v <= MAX_ELEMENTS)
        .ok_or(VolumeError::DimensionOverflow { channels, d, h, w })?;
    let mut spacing = [0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        *s = f32::from_le_bytes(header[20 + 4 * i..24 + 4 * i].try_into().unwrap());
    }

    let expected = elements * 4;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let got = payload.len() as u64;
    if got < expected {
        return Err(VolumeError::TruncatedPayload { expected, got });
    }
    if got > expected {
        return Err(VolumeError::TrailingData { extra: got - expected });
    }
    let mut data = Vec::with_capacity(elements as usize);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(VolumeError::NonFinite { index });
    }
    Ok(Volume {
        channels: channels as usize,
        dims: [d as usize, h as usize, w as usize],
        spacing,
        data,
    })
}

fn read_exact_or<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    err: impl Fn(std::io::Error) -> VolumeError,
) -> Result<(), VolumeError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            err(e)
        } else {
            VolumeError::Io(e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("volseq_lsv_test_{}_{name}", std::process::id()));
        p
    }

    #[test]
    fn zero_volume_round_trips_bit_exactly() {
        let v = Volume::zeros(1, [6, 6, 6], [1.5, 1.5, 1.5]);
        let path = tmpfile("zeros.lsv");
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert!(v.bytes_eq(&back));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn four_channel_volume_reads_back_with_shape() {
        let dims = [72, 72, 72];
        let n = 4 * 72 * 72 * 72;
        let data: Vec<f32> = (0..n).map(|i| (i % 97) as f32 * 0.25 - 3.0).collect();
        let v = Volume::new(4, dims, [1.5, 1.5, 1.5], data).unwrap();
        let path = tmpfile("fourch.lsv");
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.channels, 4);
        assert_eq!(back.dims, [72, 72, 72]);
        assert!(v.bytes_eq(&back));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn header_only_file_is_a_truncated_payload() {
        let path = tmpfile("truncated.lsv");
        {
            let mut f = std::fs::File::create(&path).unwrap();
            f.write_all(b"LSV1").unwrap();
            for dim in [1u32, 6, 6, 6] {
                f.write_all(&dim.to_le_bytes()).unwrap();
            }
            for s in [1.0f32, 1.0, 1.0] {
                f.write_all(&s.to_le_bytes()).unwrap();
            }
        }
        assert!(matches!(load_volume(&path), Err(VolumeError::TruncatedPayload { .. })));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn bad_magic_and_overflow_are_distinct_errors() {
        let path = tmpfile("magic.lsv");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load_volume(&path), Err(VolumeError::MalformedHeader(_))));

        {
            let mut f = std::fs::File::create(&path).unwrap();
            f.write_all(b"LSV1").unwrap();
            for dim in [u32::MAX, u32::MAX, u32::MAX, u32::MAX] {
                f.write_all(&dim.to_le_bytes()).unwrap();
            }
            for s in [1.0f32, 1.0, 1.0] {
                f.write_all(&s.to_le_bytes()).unwrap();
            }
        }
        assert!(matches!(load_volume(&path), Err(VolumeError::DimensionOverflow { .. })));
        std::fs::remove_file(&path).ok();
    }
}
