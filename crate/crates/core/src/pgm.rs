//! 8-bit binary PGM (P5) reading and writing.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::edge_maps::{EdgeImage, GrayImage, MaskImage};
use crate::error::{io_err, Error, Result};

fn read_luma(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

/// Encodes `pixels` (row-major, one byte each) as P5 with maxval 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Image { path: "<memory>".into(), message: e.to_string() })?;
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let bytes = encode_pgm(width, height, pixels)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let (w, h, px) = read_luma(path)?;
    GrayImage::new(w, h, px.iter().map(|v| *v as f64 / 255.0).collect())
}

pub fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    let px: Vec<u8> = img.data().iter().map(|v| to_byte(*v)).collect();
    write_pgm(path, img.width(), img.height(), &px)
}

/// Pixels at or above 128 are foreground.
pub fn read_mask(path: &Path) -> Result<MaskImage> {
    let (w, h, px) = read_luma(path)?;
    MaskImage::new(w, h, px.iter().map(|v| *v >= 128).collect())
}

pub fn write_mask(path: &Path, mask: &MaskImage) -> Result<()> {
    let px: Vec<u8> = mask.data().iter().map(|b| if *b { 255 } else { 0 }).collect();
    write_pgm(path, mask.width(), mask.height(), &px)
}

pub fn write_edges(path: &Path, e: &EdgeImage) -> Result<()> {
    let px: Vec<u8> = e.data().iter().map(|v| to_byte(*v)).collect();
    write_pgm(path, e.width(), e.height(), &px)
}
