//! 8-bit grayscale PGM/PNG frames and binary masks.

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader};

use super::IntensityClip;
use crate::error::{Error, Result};

fn is_frame_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "png")
    )
}

/// Frame files in `dir`, sorted by file name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_frame_file(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Load a grayscale image as `(width, height, pixels)`.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

pub fn write_gray(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::Input(format!("pixel buffer does not match {width}x{height}")))?;
    img.save(path)?;
    Ok(())
}

/// Write real values in `[0, max]` as an 8-bit image, rounding to nearest.
pub fn write_scaled(path: &Path, width: usize, height: usize, values: &[f64], max: f64) -> Result<()> {
    let px = values
        .iter()
        .map(|v| (v / max * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write_gray(path, width, height, px)
}

/// A directory of equally sized frames, one per tick, as luminance `v / 255`.
pub fn read_clip(dir: &Path) -> Result<IntensityClip> {
    let files = list_frames(dir)?;
    if files.is_empty() {
        return Err(Error::Input(format!("no PGM/PNG frames in {}", dir.display())));
    }
    let mut data = Vec::new();
    let mut dims = None;
    for f in &files {
        let (w, h, px) = read_gray(f)?;
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::Input(format!(
                    "{} is {w}x{h}, earlier frames are {}x{}",
                    f.display(),
                    d.0,
                    d.1
                )))
            }
            _ => {}
        }
        data.extend(px.into_iter().map(|p| p as f64 / 255.0));
    }
    let (w, h) = dims.unwrap();
    IntensityClip::new(w, h, files.len(), data)
}

/// Binary mask: pixels above 127 are foreground.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, px) = read_gray(path)?;
    Ok((w, h, px.into_iter().map(|p| (p > 127) as u8).collect()))
}

pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[u8]) -> Result<()> {
    write_gray(path, width, height, mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect())
}
