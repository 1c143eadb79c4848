//! PNG encoding/decoding for images, masks and colour-mapped heatmaps.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

fn decode(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let bad = |e: png::DecodingError| Error::Image { path: path.to_path_buf(), reason: e.to_string() };
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Image {
        path: path.to_path_buf(),
        reason: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let samples = info.color_type.samples();
    buf.truncate(info.line_size * info.height as usize);
    let (w, h) = (info.width as usize, info.height as usize);
    // Drop per-row padding, if any.
    let mut packed = Vec::with_capacity(w * h * samples);
    for row in buf.chunks(info.line_size) {
        packed.extend_from_slice(&row[..w * samples]);
    }
    Ok((h, w, samples, packed))
}

/// Reads a PNG as an image with `channels` (1 or 3) planes scaled to `[0, 1]`.
/// Alpha is discarded; grey is replicated to RGB and RGB is reduced to luma
/// when needed.
pub fn read_image(path: &Path, channels: usize) -> Result<Image> {
    if channels != 1 && channels != 3 {
        return Err(Error::Config(format!("unsupported channel count {channels}")));
    }
    let (h, w, samples, bytes) = decode(path)?;
    let colour = samples >= 3;
    let mut out = Image::filled(channels, h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let px = &bytes[(y * w + x) * samples..(y * w + x + 1) * samples];
            let rgb = if colour {
                [px[0], px[1], px[2]].map(|v| v as f32 / 255.0)
            } else {
                [px[0] as f32 / 255.0; 3]
            };
            if channels == 3 {
                for (c, v) in rgb.iter().enumerate() {
                    out.set(c, y, x, *v);
                }
            } else {
                out.set(0, y, x, 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]);
            }
        }
    }
    out.clamp_unit();
    Ok(out)
}

/// Reads a single-channel mask; values above 127 are lesion pixels.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let (h, w, samples, bytes) = decode(path)?;
    let data = bytes.chunks(samples).map(|px| (px[0] > 127) as u8).collect();
    Ok(Mask::new(h, w, data))
}

fn encode(path: &Path, w: usize, h: usize, colour: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(colour);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::Image { path: path.to_path_buf(), reason: e.to_string() };
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(bytes).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

fn quantise(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel image as an 8-bit PNG.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let colour = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::Config(format!("cannot write {c}-channel png"))),
    };
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push(quantise(image.get(ch, y, x)));
            }
        }
    }
    encode(path, w, h, colour, &bytes)
}

/// Writes a mask with values {0, 255}.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    encode(path, mask.width(), mask.height(), png::ColorType::Grayscale, &bytes)
}

/// Blue-to-red colour map of values already normalised to `[0, 1]`.
pub fn colormap(v: f32) -> [u8; 3] {
    let t = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [quantise(r), quantise(g), quantise(b)]
}

/// Writes `values` (row-major `h x w`) min-max normalised through [`colormap`].
pub fn write_colormap(path: &Path, values: &[f32], h: usize, w: usize) -> Result<()> {
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = values.iter().flat_map(|&v| colormap((v - lo) / span)).collect();
    encode(path, w, h, png::ColorType::Rgb, &bytes)
}
