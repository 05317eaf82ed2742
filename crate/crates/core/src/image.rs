//! 8-bit RGB rasters and their conversion to model input.

use std::io::Cursor;
use std::path::Path;

use image::{imageops::FilterType, ImageFormat, RgbImage};

use crate::error::{Error, IoContext, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    /// Row-major, interleaved RGB.
    pixels: Vec<u8>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        let pixels = fill.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, pixels }
    }

    pub fn from_raw(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * Self::CHANNELS {
            return Err(Error::InvalidInput(format!(
                "raster of {}x{} RGB needs {} bytes, got {}",
                width,
                height,
                width * height * Self::CHANNELS,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Decodes PNG or JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        Ok(Self::from_rgb(img))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::decode(&bytes)
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png()?).at(path)
    }

    /// Square image of `size` pixels per side; a no-op when already that size.
    pub fn resized(&self, size: usize) -> Self {
        if self.width == size && self.height == size {
            return self.clone();
        }
        let img = image::imageops::resize(&self.to_rgb(), size as u32, size as u32, FilterType::Triangle);
        Self::from_rgb(img)
    }

    fn to_rgb(&self) -> RgbImage {
        RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone()).expect("consistent raster size")
    }

    fn from_rgb(img: RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self { width: w as usize, height: h as usize, pixels: img.into_raw() }
    }
}
