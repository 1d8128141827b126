//! PNG and JSON file helpers.

use crate::error::Result;
use crate::renderer::Mask;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::path::Path;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb_png(rgb: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w, _) = rgb.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        Rgb([to_u8(rgb[[i, j, 0]]), to_u8(rgb[[i, j, 1]]), to_u8(rgb[[i, j, 2]])])
    });
    img.save(path)?;
    Ok(())
}

pub fn load_rgb_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(i, j, c)| {
        img.get_pixel(j as u32, i as u32)[c] as f64 / 255.0
    }))
}

/// 16-bit depth in thousandths of a world unit.
pub fn save_depth_png(depth: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = depth.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(depth[[y as usize, x as usize]] * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16])
    });
    img.save(path)?;
    Ok(())
}

pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let res = mask.resolution;
    let img = GrayImage::from_fn(res.width as u32, res.height as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

/// Binary alpha from a mask PNG: one where the first channel exceeds half.
pub fn load_mask_png(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        if img.get_pixel(j as u32, i as u32)[0] > 127 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Tiles equally sized images left to right, wrapping after `columns`.
pub fn contact_sheet(frames: &[Array3<f64>], columns: usize) -> Array3<f64> {
    if frames.is_empty() {
        return Array3::zeros((0, 0, 3));
    }
    let (h, w, _) = frames[0].dim();
    let columns = columns.clamp(1, frames.len());
    let rows = frames.len().div_ceil(columns);
    let mut sheet = Array3::zeros((rows * h, columns * w, 3));
    for (k, f) in frames.iter().enumerate() {
        let (r, c) = (k / columns, k % columns);
        sheet
            .slice_mut(ndarray::s![r * h..(r + 1) * h, c * w..(c + 1) * w, ..])
            .assign(f);
    }
    sheet
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(crate::Error::Missing(path.display().to_string()));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Array3::from_shape_fn((3, 5, 3), |(i, j, c)| (i * 15 + j * 3 + c) as f64 / 45.0);
        save_rgb_png(&img, &p).unwrap();
        let back = load_rgb_png(&p).unwrap();
        assert_eq!(back.dim(), (3, 5, 3));
        assert!(back.iter().zip(img.iter()).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }

    #[test]
    fn contact_sheet_layout() {
        let frames: Vec<_> = (0..5).map(|k| Array3::from_elem((2, 3, 3), k as f64)).collect();
        let sheet = contact_sheet(&frames, 3);
        assert_eq!(sheet.dim(), (4, 9, 3));
        assert_eq!(sheet[[0, 4, 0]], 1.0);
        assert_eq!(sheet[[3, 4, 0]], 4.0);
        assert_eq!(sheet[[3, 8, 0]], 0.0);
    }
}
