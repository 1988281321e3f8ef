//! PNG encoding of masks and overlays.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, RgbImage};
use thiserror::Error;

use crate::interp::resize_u8;
use crate::masking::{BinaryMask, ConfidenceMap, LabelMask};

/// Ground-truth pixels strictly above this value are positive.
pub const MASK_THRESHOLD: u8 = 127;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("label {0} does not fit an 8-bit label PNG")]
    LabelOverflow(u32),
}

fn png_bytes(img: &image::DynamicImage) -> Result<Vec<u8>, RasterError> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Decodes by content rather than extension; uploads are stored without one.
fn open(path: impl AsRef<Path>) -> Result<image::DynamicImage, RasterError> {
    Ok(image::ImageReader::open(path)?.with_guessed_format()?.decode()?)
}

fn gray(width: usize, height: usize, pixels: Vec<u8>) -> GrayImage {
    GrayImage::from_raw(width as u32, height as u32, pixels).expect("buffer matches dims")
}

/// 0 = background, 255 = selected.
pub fn binary_mask_png(mask: &BinaryMask) -> Result<Vec<u8>, RasterError> {
    let px = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    png_bytes(&gray(mask.width, mask.height, px).into())
}

/// Label value per pixel; at most 256 labels.
pub fn label_mask_png(mask: &LabelMask) -> Result<Vec<u8>, RasterError> {
    let px = mask
        .labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| RasterError::LabelOverflow(l)))
        .collect::<Result<Vec<u8>, _>>()?;
    png_bytes(&gray(mask.width, mask.height, px).into())
}

/// Confidence scaled to `round(255 * c)`.
pub fn confidence_png(conf: &ConfidenceMap) -> Result<Vec<u8>, RasterError> {
    let px = conf
        .values
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    png_bytes(&gray(conf.width, conf.height, px).into())
}

pub fn rgb_png(img: &RgbImage) -> Result<Vec<u8>, RasterError> {
    png_bytes(&img.clone().into())
}

pub fn binary_mask_from_gray(img: &GrayImage) -> BinaryMask {
    BinaryMask::new(
        img.width() as usize,
        img.height() as usize,
        img.pixels().map(|Luma([v])| *v > MASK_THRESHOLD).collect(),
    )
}

/// Loads any image as a binary mask, luma > 127 is positive.
pub fn load_binary_mask(path: impl AsRef<Path>) -> Result<BinaryMask, RasterError> {
    Ok(binary_mask_from_gray(&open(path)?.to_luma8()))
}

pub fn decode_binary_mask(bytes: &[u8]) -> Result<BinaryMask, RasterError> {
    Ok(binary_mask_from_gray(&image::load_from_memory(bytes)?.to_luma8()))
}

pub fn load_label_mask(path: impl AsRef<Path>, label_count: usize) -> Result<LabelMask, RasterError> {
    let img = open(path)?.to_luma8();
    let labels: Vec<u32> = img.pixels().map(|Luma([v])| u32::from(*v)).collect();
    let count = label_count.max(labels.iter().max().map_or(0, |&m| m as usize + 1));
    Ok(LabelMask::new(
        img.width() as usize,
        img.height() as usize,
        labels,
        count,
    ))
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage, RasterError> {
    Ok(open(path)?.to_rgb8())
}

/// Half-pixel bilinear resize of an RGB raster.
pub fn resize_rgb(img: &RgbImage, width: usize, height: usize) -> RgbImage {
    if (img.width() as usize, img.height() as usize) == (width, height) {
        return img.clone();
    }
    let px = resize_u8(
        img.as_raw(),
        img.height() as usize,
        img.width() as usize,
        3,
        height,
        width,
    );
    RgbImage::from_raw(width as u32, height as u32, px).expect("buffer matches dims")
}
