//! Image and heatmap file I/O.
//!
//! Images travel as PNG. Masks are 8-bit PNG with 0 = background and
//! 255 = set. Heatmaps are 16-bit binary PGM (big-endian samples per the
//! netpbm spec) with a JSON sidecar recording the min/max used for
//! quantization.

use std::path::Path;

use anyhow::{Context, Result};
use firm_core::image::{dims, Image, Mask};
use ndarray::{Array2, Array3};

use crate::DataError;

/// Load a PNG as an `[0, 1]` image with the requested channel count (1 or 3).
pub fn load_png(path: &Path, channels: usize) -> Result<Image<f32>> {
    let img = image::open(path)
        .map_err(|e| DataError(format!("unreadable image {}: {e}", path.display())))?;
    Ok(match channels {
        1 => {
            let gray = img.to_luma8();
            let (w, h) = gray.dimensions();
            Array3::from_shape_fn((h as usize, w as usize, 1), |(y, x, _)| {
                gray.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0
            })
        }
        3 => {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
                rgb.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
            })
        }
        other => anyhow::bail!(DataError(format!("unsupported channel count {other}"))),
    })
}

/// Write an `[0, 1]` image as 8-bit PNG (grayscale or RGB by channel count).
pub fn save_png(path: &Path, img: &Image<f32>) -> Result<()> {
    let (h, w) = dims(img);
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match img.shape()[2] {
        1 => {
            let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([to_u8(img[[y as usize, x as usize, 0]])])
            });
            buf.save(path)
                .with_context(|| format!("writing {}", path.display()))?;
        }
        3 => {
            let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                image::Rgb([
                    to_u8(img[[y as usize, x as usize, 0]]),
                    to_u8(img[[y as usize, x as usize, 1]]),
                    to_u8(img[[y as usize, x as usize, 2]]),
                ])
            });
            buf.save(path)
                .with_context(|| format!("writing {}", path.display()))?;
        }
        other => anyhow::bail!("unsupported channel count {other}"),
    }
    Ok(())
}

/// Write a boolean mask as 8-bit PNG (0 / 255).
pub fn save_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    buf.save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Load an 8-bit mask PNG: any value above 127 counts as set.
pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| DataError(format!("unreadable mask {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] > 127
    }))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct HeatmapSidecar {
    min: f64,
    max: f64,
}

/// Write a real-valued map as 16-bit PGM plus a `<path>.json` sidecar with
/// the min/max needed to undo the quantization.
pub fn save_heatmap_pgm(path: &Path, map: &Array2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let min = map.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
    let max = map.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let span = (max - min).max(f64::MIN_POSITIVE);
    let mut bytes = Vec::with_capacity(32 + 2 * h * w);
    bytes.extend_from_slice(format!("P5\n{w} {h}\n65535\n").as_bytes());
    for v in map.iter() {
        let q = (((*v as f64 - min) / span) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    let sidecar = serde_json::to_string_pretty(&HeatmapSidecar { min, max })?;
    std::fs::write(sidecar_path(path), sidecar)?;
    Ok(())
}

/// Read back a heatmap written by [`save_heatmap_pgm`].
pub fn load_heatmap_pgm(path: &Path) -> Result<Array2<f32>> {
    let bytes = std::fs::read(path)?;
    let header_err = || DataError(format!("bad PGM header in {}", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err())?);
    }
    if fields.len() != 4 || fields[0] != "P5" || fields[3] != "65535" {
        anyhow::bail!(header_err());
    }
    let w: usize = fields[1].parse().map_err(|_| header_err())?;
    let h: usize = fields[2].parse().map_err(|_| header_err())?;
    pos += 1; // single whitespace after maxval
    let data = &bytes[pos..];
    if data.len() != 2 * w * h {
        anyhow::bail!(DataError(format!(
            "PGM payload is {} bytes, expected {}",
            data.len(),
            2 * w * h
        )));
    }
    let sidecar: HeatmapSidecar =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let span = (sidecar.max - sidecar.min).max(f64::MIN_POSITIVE);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let i = 2 * (y * w + x);
        let q = u16::from_be_bytes([data[i], data[i + 1]]) as f64;
        (sidecar.min + q / 65535.0 * span) as f32
    }))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}
