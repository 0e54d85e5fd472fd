//! Minimal single-file NIfTI-1 (`.nii`, `.nii.gz`) reader and writer for 3-D scalar volumes.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{format_err, io_err, Result};

const HEADER_SIZE: usize = 348;
const WRITE_OFFSET: usize = 352;

/// Scalar volume with NIfTI (Fortran) ordering: `data[x + nx * (y + ny * z)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Self {
        assert_eq!(data.len(), dims.iter().product::<usize>(), "volume buffer size");
        Self { dims, data }
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[x + self.dims[0] * (y + self.dims[1] * z)]
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    little: bool,
}

impl Cursor<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.bytes[at], self.bytes[at + 1]];
        if self.little {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    }

    fn word(&self, at: usize) -> [u8; 4] {
        let mut b = [0u8; 4];
        b.copy_from_slice(&self.bytes[at..at + 4]);
        if !self.little {
            b.reverse();
        }
        b
    }

    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.word(at))
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.word(at))
    }

    fn sample(&self, at: usize, datatype: i16) -> f32 {
        let b = &self.bytes[at..];
        let ordered = |n: usize| {
            let mut v = b[..n].to_vec();
            if !self.little {
                v.reverse();
            }
            v
        };
        match datatype {
            2 => b[0] as f32,
            256 => b[0] as i8 as f32,
            4 => i16::from_le_bytes(ordered(2).try_into().unwrap()) as f32,
            512 => u16::from_le_bytes(ordered(2).try_into().unwrap()) as f32,
            8 => i32::from_le_bytes(ordered(4).try_into().unwrap()) as f32,
            768 => u32::from_le_bytes(ordered(4).try_into().unwrap()) as f32,
            16 => f32::from_le_bytes(ordered(4).try_into().unwrap()),
            64 => f64::from_le_bytes(ordered(8).try_into().unwrap()) as f32,
            _ => unreachable!("datatype checked before sampling"),
        }
    }
}

fn bytes_per_sample(datatype: i16) -> Option<usize> {
    match datatype {
        2 | 256 => Some(1),
        4 | 512 => Some(2),
        8 | 768 | 16 => Some(4),
        64 => Some(8),
        _ => None,
    }
}

pub fn read_nifti(path: &Path) -> Result<Volume> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(io_err(path))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(io_err(path))?;
        raw = out;
    }
    if raw.len() < HEADER_SIZE {
        return Err(format_err(path, "truncated NIfTI header"));
    }
    let little = if i32::from_le_bytes(raw[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        true
    } else if i32::from_be_bytes(raw[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        false
    } else {
        return Err(format_err(path, "not a NIfTI-1 file"));
    };
    let c = Cursor { bytes: &raw, little };
    debug_assert_eq!(c.i32(0), HEADER_SIZE as i32);

    let ndim = c.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(format_err(path, format!("invalid dimension count {ndim}")));
    }
    let mut dims = [1usize; 3];
    for d in 0..ndim as usize {
        let n = c.i16(42 + 2 * d);
        if n < 1 {
            return Err(format_err(path, format!("dimension {d} has size {n}")));
        }
        if d < 3 {
            dims[d] = n as usize;
        } else if n != 1 {
            return Err(format_err(path, "only 3-D scalar volumes are supported"));
        }
    }
    let datatype = c.i16(70);
    let width = bytes_per_sample(datatype)
        .ok_or_else(|| format_err(path, format!("unsupported datatype code {datatype}")))?;
    let offset = c.f32(108);
    if !(offset >= HEADER_SIZE as f32) {
        return Err(format_err(path, format!("invalid voxel offset {offset}")));
    }
    let offset = offset as usize;
    let count: usize = dims.iter().product();
    if raw.len() < offset + count * width {
        return Err(format_err(path, "truncated voxel data"));
    }
    let (slope, inter) = (c.f32(112), c.f32(116));
    let scale = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);
    let data = (0..count)
        .map(|i| {
            let v = c.sample(offset + i * width, datatype);
            if scale {
                v * slope + inter
            } else {
                v
            }
        })
        .collect();
    Ok(Volume::new(dims, data))
}

/// Writes a little-endian float32 NIfTI-1 file, gzipped when the name ends in `.gz`.
pub fn write_nifti(path: &Path, volume: &Volume) -> Result<()> {
    if volume.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(format_err(path, "dimension exceeds NIfTI-1 limit"));
    }
    let mut buf = vec![0u8; WRITE_OFFSET];
    buf[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    buf[40..42].copy_from_slice(&3i16.to_le_bytes());
    for (d, &n) in volume.dims.iter().enumerate() {
        buf[42 + 2 * d..44 + 2 * d].copy_from_slice(&(n as i16).to_le_bytes());
    }
    for d in 3..7 {
        buf[42 + 2 * d..44 + 2 * d].copy_from_slice(&1i16.to_le_bytes());
    }
    buf[70..72].copy_from_slice(&16i16.to_le_bytes());
    buf[72..74].copy_from_slice(&32i16.to_le_bytes());
    for d in 0..4 {
        buf[76 + 4 * d..80 + 4 * d].copy_from_slice(&1f32.to_le_bytes());
    }
    buf[108..112].copy_from_slice(&(WRITE_OFFSET as f32).to_le_bytes());
    buf[112..116].copy_from_slice(&1f32.to_le_bytes());
    buf[344..348].copy_from_slice(b"n+1\0");
    buf.reserve(4 * volume.data.len());
    for v in &volume.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }

    let file = File::create(path).map_err(io_err(path))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut gz = GzEncoder::new(file, Compression::fast());
        gz.write_all(&buf).map_err(io_err(path))?;
        gz.finish().map_err(io_err(path))?;
    } else {
        let mut file = file;
        file.write_all(&buf).map_err(io_err(path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_volume_roundtrips_plain_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume::new([4, 3, 2], (0..24).map(|i| i as f32 * 0.5 - 3.0).collect());
        for name in ["v.nii", "v.nii.gz"] {
            let p = dir.path().join(name);
            write_nifti(&p, &vol).unwrap();
            assert_eq!(read_nifti(&p).unwrap(), vol);
        }
        assert_eq!(vol.get(1, 2, 1), vol.data[1 + 4 * (2 + 3)]);
    }

    #[test]
    fn big_endian_int16_with_scaling() {
        let mut buf = vec![0u8; 352];
        buf[0..4].copy_from_slice(&348i32.to_be_bytes());
        buf[40..42].copy_from_slice(&3i16.to_be_bytes());
        for (d, n) in [2i16, 2, 1].iter().enumerate() {
            buf[42 + 2 * d..44 + 2 * d].copy_from_slice(&n.to_be_bytes());
        }
        buf[70..72].copy_from_slice(&4i16.to_be_bytes());
        buf[108..112].copy_from_slice(&352f32.to_be_bytes());
        buf[112..116].copy_from_slice(&2f32.to_be_bytes());
        buf[116..120].copy_from_slice(&1f32.to_be_bytes());
        for v in [-3i16, 0, 5, 100] {
            buf.extend_from_slice(&v.to_be_bytes());
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("be.nii");
        std::fs::write(&p, &buf).unwrap();
        let vol = read_nifti(&p).unwrap();
        assert_eq!(vol.dims, [2, 2, 1]);
        assert_eq!(vol.data, vec![-5.0, 1.0, 11.0, 201.0]);

        std::fs::write(&p, &buf[..buf.len() - 1]).unwrap();
        assert!(read_nifti(&p).is_err());
    }
}
