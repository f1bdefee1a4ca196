//! 8-bit RGB patch files: PNG and binary PPM (P6).

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::stain_math::RgbPatch;

/// Extensions recognised as patch files, lowercase.
pub const PATCH_EXTENSIONS: [&str; 2] = ["png", "ppm"];

pub fn is_patch_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| PATCH_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

pub fn read_patch(path: &Path) -> Result<RgbPatch> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = rgb.pixels().map(|p| p.0).collect();
    RgbPatch::new(w as usize, h as usize, pixels)
}

/// Writes PNG unless the extension is `.ppm`, in which case binary P6 is used.
pub fn write_patch(path: &Path, patch: &RgbPatch) -> Result<()> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ppm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    if format == ImageFormat::Pnm {
        return write_ppm(path, patch);
    }
    let buf: Vec<u8> = patch.pixels().iter().flatten().copied().collect();
    let img = RgbImage::from_raw(patch.width() as u32, patch.height() as u32, buf)
        .expect("pixel buffer length matches dimensions");
    img.save_with_format(path, format)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn write_ppm(path: &Path, patch: &RgbPatch) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", patch.width(), patch.height()).into_bytes();
    bytes.extend(patch.pixels().iter().flatten());
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
