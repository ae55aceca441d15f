//! Float color and depth images plus their PNG / PFM file forms.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::RgbImage;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: malformed PFM: {reason}")]
    Pfm { path: String, reason: String },
}

/// Linear RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f32; 3]>,
}

impl ColorImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0.0; 3]; (width as usize) * (height as usize)],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> [f32; 3] {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [f32; 3]) {
        let w = self.width;
        self.pixels[(y * w + x) as usize] = rgb;
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width, self.height, |x, y| {
            let p = self.get(x, y);
            image::Rgb(p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            pixels: img
                .pixels()
                .map(|p| p.0.map(|c| c as f32 / 255.0))
                .collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        self.to_rgb8().save(path).map_err(|source| RasterError::Image {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        let img = image::open(path).map_err(|source| RasterError::Image {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, image::ImageFormat::Png)
            .expect("in-memory PNG encode");
        out.into_inner()
    }
}

/// Per-pixel scalar depth, row-major from the top row.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; (width as usize) * (height as usize)],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, d: f32) {
        let w = self.width;
        self.values[(y * w + x) as usize] = d;
    }

    /// Writes a single-channel little-endian PFM (scale -1.0). PFM stores
    /// rows bottom-to-top.
    pub fn save_pfm(&self, path: &Path) -> Result<(), RasterError> {
        let io_err = |source| RasterError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf = Vec::with_capacity(self.values.len() * 4 + 32);
        write!(buf, "Pf\n{} {}\n-1.0\n", self.width, self.height).map_err(io_err)?;
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                buf.write_f32::<LittleEndian>(self.get(x, y)).map_err(io_err)?;
            }
        }
        std::fs::write(path, buf).map_err(io_err)
    }

    pub fn load_pfm(path: &Path) -> Result<Self, RasterError> {
        let name = path.display().to_string();
        let bad = |reason: &str| RasterError::Pfm {
            path: name.clone(),
            reason: reason.to_string(),
        };
        let file = std::fs::File::open(path).map_err(|source| RasterError::Io {
            path: name.clone(),
            source,
        })?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        let mut next_line = |reader: &mut BufReader<std::fs::File>| -> Result<String, RasterError> {
            header.clear();
            reader.read_line(&mut header).map_err(|source| RasterError::Io {
                path: name.clone(),
                source,
            })?;
            Ok(header.trim().to_string())
        };
        if next_line(&mut reader)? != "Pf" {
            return Err(bad("expected single-channel 'Pf' header"));
        }
        let dims = next_line(&mut reader)?;
        let mut it = dims.split_whitespace().map(str::parse::<u32>);
        let (width, height) = match (it.next(), it.next()) {
            (Some(Ok(w)), Some(Ok(h))) => (w, h),
            _ => return Err(bad("bad dimension line")),
        };
        let scale: f32 = next_line(&mut reader)?
            .parse()
            .map_err(|_| bad("bad scale line"))?;
        let mut raw = Vec::new();
        reader.read_to_end(&mut raw).map_err(|source| RasterError::Io {
            path: name.clone(),
            source,
        })?;
        let n = (width as usize) * (height as usize);
        if raw.len() < n * 4 {
            return Err(bad("truncated pixel data"));
        }
        let mut cursor = std::io::Cursor::new(raw);
        let mut out = DepthMap::new(width, height);
        for y in (0..height).rev() {
            for x in 0..width {
                let v = if scale < 0.0 {
                    cursor.read_f32::<LittleEndian>()
                } else {
                    cursor.read_f32::<byteorder::BigEndian>()
                }
                .map_err(|_| bad("truncated pixel data"))?;
                out.set(x, y, v);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_and_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = DepthMap::new(3, 2);
        for (i, v) in d.values.iter_mut().enumerate() {
            *v = i as f32 * 0.5 + 1.0;
        }
        let p = dir.path().join("x.depth.pfm");
        d.save_pfm(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // First stored value is the bottom-left pixel.
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first, d.get(0, 1));
        assert_eq!(DepthMap::load_pfm(&p).unwrap(), d);
    }

    #[test]
    fn pfm_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pfm");
        std::fs::write(&p, b"Pf\n4 4\n-1.0\n\0\0\0\0").unwrap();
        assert!(matches!(DepthMap::load_pfm(&p), Err(RasterError::Pfm { .. })));
    }

    #[test]
    fn png_quantizes_to_bytes() {
        let mut img = ColorImage::new(2, 1);
        img.set(1, 0, [1.0, 0.5, 0.0]);
        let back = ColorImage::from_rgb8(&img.to_rgb8());
        assert_eq!(back.get(1, 0)[0], 1.0);
        assert!((back.get(1, 0)[1] - 0.5).abs() <= 0.5 / 255.0 + 1e-6);
    }
}
