use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageError, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{from_level, BinaryMask, FundusImage, GroundTruthMask};

/// File extensions probed by [`find_by_stem`], in order.
pub const SUPPORTED_EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let supported = matches!(
        reader.format(),
        Some(image::ImageFormat::Png) | Some(image::ImageFormat::Pnm)
    );
    if !supported {
        return Err(Error::UnsupportedFormat { path: path.into() });
    }
    reader.decode().map_err(|e| match e {
        ImageError::Unsupported(_) => Error::UnsupportedFormat { path: path.into() },
        ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.into(),
            message: other.to_string(),
        },
    })
}

/// Reads an 8-bit PNG/PPM/PGM as RGB with values scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<FundusImage> {
    let rgb = decode(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.as_raw().iter().map(|&v| from_level(v)).collect();
    FundusImage::new(stem(path), Tensor::new(vec![h, w, 3], data)?)
}

/// Reads a mask and binarizes it at half intensity. Color masks use the
/// brightest channel, so pure-red annotations count as foreground.
pub fn load_mask(path: &Path) -> Result<GroundTruthMask> {
    let rgb = decode(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb
        .pixels()
        .map(|p| (p.0.iter().copied().max().unwrap_or(0) >= 128) as u8)
        .collect();
    Ok(GroundTruthMask {
        id: stem(path),
        mask: BinaryMask::new(h, w, data)?,
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn save(path: &Path, img: DynamicImage) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            ImageError::IoError(io) => Error::io(path, io),
            other => Error::Decode {
                path: path.into(),
                message: other.to_string(),
            },
        })
}

pub fn write_gray_png(path: &Path, height: usize, width: usize, data: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::ExtentMismatch(format!("{} bytes for a {height}×{width} image", height * width)))?;
    save(path, DynamicImage::ImageLuma8(img))
}

pub fn write_rgb_png(path: &Path, height: usize, width: usize, data: Vec<u8>) -> Result<()> {
    let img = RgbImage::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::ExtentMismatch(format!("bad RGB buffer for a {height}×{width} image")))?;
    save(path, DynamicImage::ImageRgb8(img))
}

/// Raw 8-bit luma values, `(height, width, data)`.
pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let g = decode(path)?.to_luma8();
    Ok((g.height() as usize, g.width() as usize, g.into_raw()))
}

/// First `dir/stem.<ext>` that exists, trying [`SUPPORTED_EXTENSIONS`].
pub fn find_by_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    SUPPORTED_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}
