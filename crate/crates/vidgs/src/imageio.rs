//! 8-bit PNG/PPM frames and grayscale masks.
//!
//! Frame files are named by their 1-based index, zero-padded to five digits
//! (`00001.png`). Directory listings are sorted lexicographically and only
//! `.png` and `.ppm` files are picked up.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};
use vidgs_core::{Image, Mask};

use crate::error::{Error, IoContext, Result};

pub const FRAME_EXTENSIONS: [&str; 2] = ["png", "ppm"];

pub fn frame_name(index: usize, ext: &str) -> String {
    format!("{index:05}.{ext}")
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm") | Some("pgm") => Ok(ImageFormat::Pnm),
        _ => Err(Error::format(path, "unsupported image extension (expected .png or .ppm)")),
    }
}

/// Image files of a directory in lexicographic order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| FRAME_EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::format(dir, "no .png or .ppm frames"));
    }
    Ok(out)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).at(path)?;
    image::load_from_memory_with_format(&bytes, format_for(path)?).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Image::from_data(w, h, data).at(path)
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let gray = open(path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Mask::from_gray(w, h, gray.as_raw()).at(path)
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let buf: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let rgb = RgbImage::from_raw(img.width as u32, img.height as u32, buf).expect("buffer matches dimensions");
    rgb.save_with_format(path, format_for(path)?).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let buf: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let gray = GrayImage::from_raw(mask.width as u32, mask.height as u32, buf).expect("buffer matches dimensions");
    gray.save_with_format(path, format_for(path)?).map_err(|e| Error::format(path, e.to_string()))
}

fn check_sizes<T>(dir: &Path, items: &[(PathBuf, T)], size: impl Fn(&T) -> (usize, usize)) -> Result<()> {
    if let Some((_, first)) = items.first() {
        let expect = size(first);
        for (path, item) in items {
            if size(item) != expect {
                let (w, h) = size(item);
                return Err(Error::format(path, format!("is {w}x{h}, other frames in {} are {}x{}", dir.display(), expect.0, expect.1)));
            }
        }
    }
    Ok(())
}

pub fn read_frames(dir: &Path) -> Result<Vec<Image>> {
    let frames = list_images(dir)?.into_iter().map(|p| load_image(&p).map(|img| (p, img))).collect::<Result<Vec<_>>>()?;
    check_sizes(dir, &frames, |i| (i.width, i.height))?;
    Ok(frames.into_iter().map(|(_, i)| i).collect())
}

pub fn read_masks(dir: &Path) -> Result<Vec<Mask>> {
    let masks = list_images(dir)?.into_iter().map(|p| load_mask(&p).map(|m| (p, m))).collect::<Result<Vec<_>>>()?;
    check_sizes(dir, &masks, |m| (m.width, m.height))?;
    Ok(masks.into_iter().map(|(_, m)| m).collect())
}

/// Write `frames` as `00001.<ext>`, `00002.<ext>`, ...
pub fn write_frames(dir: &Path, frames: &[Image], ext: &str) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    for (i, f) in frames.iter().enumerate() {
        save_image(&dir.join(frame_name(i + 1, ext)), f)?;
    }
    Ok(())
}

pub fn write_masks(dir: &Path, masks: &[Mask], ext: &str) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    for (i, m) in masks.iter().enumerate() {
        save_mask(&dir.join(frame_name(i + 1, ext)), m)?;
    }
    Ok(())
}
