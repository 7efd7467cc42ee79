//! 8-bit PNG import/export for images and label maps.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::data::{DenseLabelMap, Domain, SegImage};
use crate::error::{io_err, Error, Result};

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png { path: path.to_path_buf(), reason: e.to_string() }
}

pub fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory png header");
        writer.write_image_data(data).expect("in-memory png body");
    }
    out
}

/// Decodes to `(width, height, channels, bytes)`.
pub fn decode_png(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, Vec<u8>), String> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format!("unsupported bit depth {:?}", info.bit_depth));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(format!("unsupported color type {other:?}")),
    };
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, channels, buf))
}

pub fn image_to_rgb8(image: &SegImage) -> Vec<u8> {
    image.pixels().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

pub fn write_image_png(path: impl AsRef<Path>, image: &SegImage) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(image.width(), image.height(), png::ColorType::Rgb, &image_to_rgb8(image));
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_image_png(path: impl AsRef<Path>, id: &str, domain: Domain) -> Result<SegImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (w, h, ch, data) = decode_png(&bytes).map_err(|e| png_err(path, e))?;
    let pixels: Vec<f64> = match ch {
        3 => data.iter().map(|&b| f64::from(b) / 255.0).collect(),
        4 => data
            .chunks_exact(4)
            .flat_map(|px| px[..3].iter().map(|&b| f64::from(b) / 255.0))
            .collect(),
        1 => data.iter().flat_map(|&b| [f64::from(b) / 255.0; 3]).collect(),
        _ => unreachable!(),
    };
    SegImage::new(id, h, w, pixels, domain)
}

pub fn label_png_bytes(labels: &DenseLabelMap) -> Vec<u8> {
    encode_png(labels.width(), labels.height(), png::ColorType::Grayscale, labels.as_slice())
}

pub fn write_label_png(path: impl AsRef<Path>, labels: &DenseLabelMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, label_png_bytes(labels)).map_err(io_err(path))
}

pub fn read_label_png(path: impl AsRef<Path>) -> Result<DenseLabelMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (w, h, ch, data) = decode_png(&bytes).map_err(|e| png_err(path, e))?;
    if ch != 1 {
        return Err(png_err(path, format!("label png must be single-channel, found {ch} channels")));
    }
    DenseLabelMap::new(h, w, data)
}

pub fn write_rgb_png(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_png(width, height, png::ColorType::Rgb, rgb)).map_err(io_err(path))
}
