//! Binary per-view masks.

use std::path::Path;

use image::GrayImage;
use thiserror::Error;

use crate::geometry::{pixel_index, Vec2};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        want_w: u32,
        want_h: u32,
        got_w: u32,
        got_h: u32,
    },
    #[error("mask has no foreground pixels")]
    Empty,
    #[error("mask image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; (width as usize) * (height as usize)],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![true; (width as usize) * (height as usize)],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity((width as usize) * (height as usize));
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    /// Inclusive pixel rectangle `[x0, x1] x [y0, y1]`, clipped to the image.
    pub fn from_rect(width: u32, height: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self::from_fn(width, height, |x, y| x >= x0 && x <= x1 && y >= y0 && y <= y1)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y as usize) * (self.width as usize) + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.bits[(y as usize) * w + x as usize] = value;
    }

    /// Foreground test for a continuous coordinate; out-of-image is background.
    pub fn contains_point(&self, p: Vec2) -> bool {
        let (x, y) = (pixel_index(p.x), pixel_index(p.y));
        x >= 0 && y >= 0 && (x as u64) < self.width as u64 && (y as u64) < self.height as u64 && self.get(x as u32, y as u32)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Foreground pixels as `(x, y)` in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| ((i as u32) % w, (i as u32) / w))
    }

    pub fn check_dims(&self, width: u32, height: u32) -> Result<(), MaskError> {
        if self.width != width || self.height != height {
            return Err(MaskError::DimensionMismatch {
                want_w: width,
                want_h: height,
                got_w: self.width,
                got_h: self.height,
            });
        }
        Ok(())
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            image::Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    /// Nonzero pixels are foreground.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self::from_fn(img.width(), img.height(), |x, y| img.get_pixel(x, y).0[0] > 0)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), MaskError> {
        self.to_gray().save(path).map_err(|source| MaskError::Image {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self, MaskError> {
        let img = image::open(path).map_err(|source| MaskError::Image {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_gray(&img.to_luma8()))
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_gray()
            .write_to(&mut out, image::ImageFormat::Png)
            .expect("in-memory PNG encode");
        out.into_inner()
    }
}
