//! 8-bit PNG and binary PPM output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Quantizes [0, 1] values to bytes (values outside are clamped).
pub fn to_bytes(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
    let to_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    };
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(bytes).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

/// Writes an H×W×3 image as an 8-bit sRGB PNG.
pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    check_len(rgb.len(), width * height * 3)?;
    write_png(path, width, height, png::ColorType::Rgb, &to_bytes(rgb))
}

/// Writes an H×W mask as an 8-bit grayscale PNG.
pub fn write_mask_png(path: &Path, width: usize, height: usize, mask: &[f64]) -> Result<()> {
    check_len(mask.len(), width * height)?;
    write_png(path, width, height, png::ColorType::Grayscale, &to_bytes(mask))
}

/// Binary PPM bytes: `P6\n{W} {H}\n255\n` then row-major RGB triples.
pub fn ppm_bytes(width: usize, height: usize, rgb: &[f64]) -> Result<Vec<u8>> {
    check_len(rgb.len(), width * height * 3)?;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(to_bytes(rgb));
    Ok(out)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    let bytes = ppm_bytes(width, height, rgb)?;
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Decodes an 8-bit RGB PNG back to [0, 1] floats.
pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let fmt = |e: png::DecodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(fmt)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("{}: expected 8-bit RGB", path.display())));
    }
    let data = buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((info.width as usize, info.height as usize, data))
}

fn check_len(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dimension(format!("image has {got} values, expected {want}")));
    }
    Ok(())
}
