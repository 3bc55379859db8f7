//! PNG and raw float images.
//!
//! Raw dumps: magic `GS3I`, then `u32` width, height, channels, then `f32`
//! values, all little-endian, row-major with interleaved channels.

use std::path::Path;

use gs3_core::ImageBuffer;

use crate::error::{IoError, IoResult};

pub const RAW_MAGIC: &[u8; 4] = b"GS3I";
pub const RAW_EXTENSION: &str = "gs3i";

pub fn encode_raw(img: &ImageBuffer) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * img.data.len());
    out.extend_from_slice(RAW_MAGIC);
    for v in [img.width, img.height, img.channels] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &img.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_raw(bytes: &[u8]) -> IoResult<ImageBuffer> {
    if bytes.len() < 16 {
        return Err(IoError::Truncated(format!("raw image header needs 16 bytes, got {}", bytes.len())));
    }
    if &bytes[..4] != RAW_MAGIC {
        return Err(IoError::Magic { expected: "GS3I".into(), found: String::from_utf8_lossy(&bytes[..4]).into_owned() });
    }
    let (w, h, c) = (u32_at(bytes, 4), u32_at(bytes, 8), u32_at(bytes, 12));
    let n = w as usize * h as usize * c as usize;
    if bytes.len() != 16 + 4 * n {
        return Err(IoError::Truncated(format!("raw image {w}x{h}x{c} needs {} bytes, got {}", 16 + 4 * n, bytes.len())));
    }
    let data = bytes[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    Ok(ImageBuffer::from_data(w, h, c, data)?)
}

fn is_raw(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case(RAW_EXTENSION))
}

/// Loads a PNG (8-bit values divided by 255, no transfer curve; an alpha
/// channel premultiplies the color) or a raw float dump.
pub fn load_image(path: &Path) -> IoResult<ImageBuffer> {
    if is_raw(path) {
        let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
        return decode_raw(&bytes).map_err(|e| IoError::format(path, e.to_string()));
    }
    let dynamic = image::open(path).map_err(|e| IoError::format(path, e.to_string()))?;
    let rgba = dynamic.to_rgba8();
    let (w, h) = rgba.dimensions();
    let mut data = Vec::with_capacity(w as usize * h as usize * 3);
    for px in rgba.pixels() {
        let a = px[3] as f64 / 255.0;
        for k in 0..3 {
            data.push(px[k] as f64 / 255.0 * a);
        }
    }
    Ok(ImageBuffer::from_data(w, h, 3, data)?)
}

/// Writes an 8-bit PNG (values clamped to [0, 1]) or, for a `.gs3i` path, a raw dump.
pub fn save_image(img: &ImageBuffer, path: &Path) -> IoResult<()> {
    if is_raw(path) {
        return std::fs::write(path, encode_raw(img)).map_err(|e| IoError::io(path, e));
    }
    let bytes = img.to_rgb8();
    let result = match img.channels {
        1 => {
            let gray: Vec<u8> = bytes.chunks_exact(3).map(|p| p[0]).collect();
            image::save_buffer(path, &gray, img.width, img.height, image::ColorType::L8)
        }
        _ => image::save_buffer(path, &bytes, img.width, img.height, image::ColorType::Rgb8),
    };
    result.map_err(|e| IoError::format(path, e.to_string()))
}
