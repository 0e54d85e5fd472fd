//! In-memory images and their on-disk encodings.
//!
//! Digit benchmarks are stored as 8-bit grayscale PNG. MRI half-slices are
//! stored as little-endian `f32` with a short header:
//! `magic, channels, height, width` as `u16` each, followed by `C·H·W` floats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{format_err, io_err, Error, Result};

pub const HALF_SLICE_MAGIC: u16 = 0x5354;
const HALF_SLICE_HEADER: usize = 8;

/// Channel-major float image, `data[(c * height + y) * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "image buffer size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// 8-bit intensity to the network range [-1, 1].
pub fn byte_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Network range back to 8-bit, clipping out-of-range values.
pub fn unit_to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let file = File::create(path).map_err(io_err(path))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let enc_err = |source| Error::PngEncode {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = encoder.write_header().map_err(enc_err)?;
    writer.write_image_data(pixels).map_err(enc_err)?;
    writer.finish().map_err(enc_err)?;
    Ok(())
}

/// Reads an 8-bit PNG and returns `(width, height, luma)`. Color images are
/// reduced to their first channel.
pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(io_err(path))?;
    let dec_err = |source| Error::PngDecode {
        path: path.to_path_buf(),
        source,
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(dec_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(dec_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let step = info.color_type.samples();
    let luma = buf[..info.buffer_size()].iter().step_by(step).copied().collect::<Vec<_>>();
    if luma.len() != w * h {
        return Err(format_err(path, "unexpected png layout"));
    }
    Ok((w, h, luma))
}

pub fn write_half_slice(path: &Path, image: &Image) -> Result<()> {
    let dims = [image.channels, image.height, image.width];
    if dims.iter().any(|&d| d > u16::MAX as usize) {
        return Err(format_err(path, "dimension exceeds 16-bit header field"));
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let mut bytes = Vec::with_capacity(HALF_SLICE_HEADER + 4 * image.data.len());
    bytes.extend_from_slice(&HALF_SLICE_MAGIC.to_le_bytes());
    for d in dims {
        bytes.extend_from_slice(&(d as u16).to_le_bytes());
    }
    for v in &image.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

pub fn read_half_slice(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    if bytes.len() < HALF_SLICE_HEADER {
        return Err(format_err(path, "truncated header"));
    }
    let word = |i: usize| u16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]);
    if word(0) != HALF_SLICE_MAGIC {
        return Err(format_err(path, format!("bad magic {:#06x}", word(0))));
    }
    let (c, h, w) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let expected = HALF_SLICE_HEADER + 4 * c * h * w;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let data = bytes[HALF_SLICE_HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Image::new(c, h, w, data))
}

/// Loads an example image in network range: PNG bytes are mapped to [-1, 1],
/// half-slice floats are returned as stored.
pub fn load_image(path: &Path) -> Result<Image> {
    if path.extension().is_some_and(|e| e == "png") {
        let (w, h, luma) = read_gray_png(path)?;
        Ok(Image::new(1, h, w, luma.into_iter().map(byte_to_unit).collect()))
    } else {
        read_half_slice(path)
    }
}

/// Loads a mask as `{0, 1}` floats (any nonzero byte is foreground).
pub fn load_mask(path: &Path) -> Result<Image> {
    let (w, h, luma) = read_gray_png(path)?;
    Ok(Image::new(
        1,
        h,
        w,
        luma.into_iter().map(|v| if v > 0 { 1.0 } else { 0.0 }).collect(),
    ))
}

pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_gray_png(path, width, height, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_endpoints_and_roundtrip() {
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
        for v in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(v)), v);
        }
        assert_eq!(unit_to_byte(7.0), 255);
    }

    #[test]
    fn png_and_half_slice_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..35).map(|i| (i * 7) as u8).collect();
        let p = dir.path().join("a.png");
        write_gray_png(&p, 7, 5, &pixels).unwrap();
        assert_eq!(read_gray_png(&p).unwrap(), (7, 5, pixels));

        let img = Image::new(2, 3, 4, (0..24).map(|i| i as f32 * 0.25 - 1.0).collect());
        let b = dir.path().join("a.bin");
        write_half_slice(&b, &img).unwrap();
        assert_eq!(read_half_slice(&b).unwrap(), img);
        assert_eq!(std::fs::metadata(&b).unwrap().len(), 8 + 4 * 24);

        let bytes = std::fs::read(&b).unwrap();
        std::fs::write(&b, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_half_slice(&b), Err(Error::Format { .. })));
    }
}
