//! 8-bit RGB images and 16-bit depth maps.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::grid::Grid;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Quantizes a `[0, 1]` intensity to 8 bits.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_rgb(path: &Path) -> Result<Grid<[f64; 3]>> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| p.0.map(|c| f64::from(c) / 255.0))
        .collect();
    Ok(Grid::from_vec(w as usize, h as usize, data))
}

pub fn write_rgb(path: &Path, grid: &Grid<[f64; 3]>) -> Result<()> {
    ensure_parent(path)?;
    let img: RgbImage = ImageBuffer::from_fn(grid.width as u32, grid.height as u32, |x, y| {
        Rgb(grid.get(x as usize, y as usize).map(quantize_u8))
    });
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// 16-bit depth; stored value `v` means `v * scale` meters, 0 means missing.
pub fn read_depth16(path: &Path, scale: f64) -> Result<Grid<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_luma16();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| f64::from(p.0[0]) * scale).collect();
    Ok(Grid::from_vec(w as usize, h as usize, data))
}

pub fn write_depth16(path: &Path, depth: &Grid<f64>, scale: f64) -> Result<()> {
    ensure_parent(path)?;
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(depth.width as u32, depth.height as u32, |x, y| {
            let v = (depth.get(x as usize, y as usize) / scale).round();
            Luma([v.clamp(0.0, f64::from(u16::MAX)) as u16])
        });
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}
